#pragma once

// Word error rate with SUB/INS/DEL split, the rare-word set, Rare WER and the
// context perturbations used in the evaluation sweep.

#include "ctxasr/corpus.hpp"

#include <json.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ctxasr {

enum class EditOp { match, sub, ins, del };

struct AlignStep {
  EditOp op;
  int ref = -1;  // index into ref, -1 for insertions
  int hyp = -1;  // index into hyp, -1 for deletions
};

struct Alignment {
  std::vector<AlignStep> steps;
  std::size_t sub = 0, ins = 0, del = 0;
  std::size_t distance() const { return sub + ins + del; }
};

// Levenshtein alignment with unit costs. Backtrace preference among equal-cost
// moves: match/substitution, then deletion, then insertion.
inline Alignment align_words(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
  Alignment a;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      const bool same = ref[i - 1] == hyp[j - 1];
      a.steps.push_back({same ? EditOp::match : EditOp::sub, static_cast<int>(i - 1), static_cast<int>(j - 1)});
      a.sub += !same;
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      a.steps.push_back({EditOp::del, static_cast<int>(i - 1), -1});
      ++a.del;
      --i;
    } else {
      a.steps.push_back({EditOp::ins, -1, static_cast<int>(j - 1)});
      ++a.ins;
      --j;
    }
  }
  std::reverse(a.steps.begin(), a.steps.end());
  return a;
}

struct WerReport {
  std::string label;
  std::size_t utterances = 0;
  std::size_t n_ref_words = 0;
  std::size_t sub = 0, ins = 0, del = 0;
  std::size_t rare_ref_words = 0;
  std::size_t rare_errors = 0;

  std::size_t errors() const { return sub + ins + del; }
  double denom() const { return static_cast<double>(std::max<std::size_t>(1, n_ref_words)); }
  double wer() const { return static_cast<double>(errors()) / denom(); }
  double sub_rate() const { return static_cast<double>(sub) / denom(); }
  double ins_rate() const { return static_cast<double>(ins) / denom(); }
  double del_rate() const { return static_cast<double>(del) / denom(); }
  // Undefined when no rare reference words were scored.
  std::optional<double> rare_wer() const {
    if (rare_ref_words == 0) return std::nullopt;
    return static_cast<double>(rare_errors) / static_cast<double>(rare_ref_words);
  }

  WerReport& operator+=(const WerReport& o) {
    utterances += o.utterances;
    n_ref_words += o.n_ref_words;
    sub += o.sub;
    ins += o.ins;
    del += o.del;
    rare_ref_words += o.rare_ref_words;
    rare_errors += o.rare_errors;
    return *this;
  }
};

// Rare reference words count as errors when substituted or deleted.
inline void score_rare(const Alignment& a, const std::vector<std::string>& ref, const std::set<std::string>& rare,
                       WerReport& r) {
  for (auto& st : a.steps) {
    if (st.ref < 0 || !rare.count(ref[static_cast<std::size_t>(st.ref)])) continue;
    ++r.rare_ref_words;
    if (st.op == EditOp::sub || st.op == EditOp::del) ++r.rare_errors;
  }
}

inline WerReport align_wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp,
                           const std::set<std::string>* rare = nullptr) {
  const auto a = align_words(ref, hyp);
  WerReport r;
  r.utterances = 1;
  r.n_ref_words = ref.size();
  r.sub = a.sub;
  r.ins = a.ins;
  r.del = a.del;
  if (rare) score_rare(a, ref, *rare, r);
  return r;
}

inline WerReport score_utterance(const std::string& ref, const std::string& hyp, const std::set<std::string>& rare) {
  return align_wer(split_words(ref), split_words(hyp), &rare);
}

// ---------------------------------------------------------------------------
// Rare words

enum class RareRule { token_mass, type_rank };

inline std::string rare_rule_name(RareRule r) { return r == RareRule::token_mass ? "token_mass" : "type_rank"; }

inline RareRule parse_rare_rule(const std::string& s) {
  if (s == "token_mass") return RareRule::token_mass;
  if (s == "type_rank") return RareRule::type_rank;
  throw std::invalid_argument("unknown rare rule '" + s + "' (expected token_mass|type_rank)");
}

// Words sorted by descending count, ties lexicographic. token_mass: frequent =
// shortest prefix covering `fraction` of all tokens. type_rank: frequent = the
// top (1 - fraction) share of word types, rounded up.
inline std::set<std::string> rare_word_set(const std::vector<std::string>& transcripts,
                                           RareRule rule = RareRule::token_mass, double fraction = 0.9) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (auto& t : transcripts)
    for (auto& w : split_words(t)) {
      ++counts[w];
      ++total;
    }
  std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](auto& a, auto& b) { return a.second > b.second; });
  std::size_t n_frequent = 0;
  if (rule == RareRule::token_mass) {
    std::size_t cum = 0;
    const double need = fraction * static_cast<double>(total);
    while (n_frequent < order.size() && static_cast<double>(cum) < need - 1e-9) cum += order[n_frequent++].second;
  } else {
    n_frequent = static_cast<std::size_t>(std::ceil((1.0 - fraction) * static_cast<double>(order.size()) - 1e-9));
  }
  std::set<std::string> rare;
  for (std::size_t i = n_frequent; i < order.size(); ++i) rare.insert(order[i].first);
  return rare;
}

// ---------------------------------------------------------------------------
// Context perturbations

enum class PerturbKind { none, remove_all, random, respell_replace, respell_append, ground_truth };

inline const std::vector<PerturbKind>& all_perturbations() {
  static const std::vector<PerturbKind> k{PerturbKind::none,          PerturbKind::remove_all,
                                          PerturbKind::random,        PerturbKind::respell_replace,
                                          PerturbKind::respell_append, PerturbKind::ground_truth};
  return k;
}

inline std::string perturb_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::none: return "none";
    case PerturbKind::remove_all: return "remove";
    case PerturbKind::random: return "random";
    case PerturbKind::respell_replace: return "respell-replace";
    case PerturbKind::respell_append: return "respell-append";
    case PerturbKind::ground_truth: return "ground-truth";
  }
  throw std::invalid_argument("unknown perturbation");
}

inline PerturbKind parse_perturb(const std::string& s) {
  for (auto k : all_perturbations())
    if (perturb_name(k) == s) return k;
  throw std::invalid_argument("unknown perturbation '" + s +
                              "' (expected none|remove|random|respell-replace|respell-append|ground-truth)");
}

// Word frequencies of the training transcripts, for drawing random contexts.
class WordSampler {
 public:
  explicit WordSampler(const std::vector<std::string>& transcripts) {
    std::map<std::string, std::size_t> counts;
    for (auto& t : transcripts)
      for (auto& w : split_words(t)) ++counts[w];
    std::vector<double> w;
    for (auto& [word, c] : counts) {
      words_.push_back(word);
      w.push_back(static_cast<double>(c));
    }
    if (words_.empty()) throw std::invalid_argument("WordSampler: no training words");
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
  const std::string& draw(Rng& rng) const { return words_[dist_(rng)]; }

 private:
  std::vector<std::string> words_;
  mutable std::discrete_distribution<std::size_t> dist_;
};

// Respelled variants go right after the original word, so that the inference
// crop (which keeps trailing tokens) treats both alike.
inline std::optional<std::string> perturb_context(const Sample& sample, PerturbKind kind, const Lexicon& lexicon,
                                                  const std::set<std::string>& rare, const WordSampler& sampler,
                                                  Rng& rng) {
  switch (kind) {
    case PerturbKind::none: return sample.context;
    case PerturbKind::remove_all: return std::nullopt;
    case PerturbKind::ground_truth: {
      std::vector<std::string> out;
      for (auto& w : split_words(sample.transcript))
        if (rare.count(w) && std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
      if (out.empty()) return std::nullopt;
      return join_words(out);
    }
    default: break;
  }
  if (!sample.context) return std::nullopt;
  const auto words = split_words(*sample.context);
  std::vector<std::string> out;
  if (kind == PerturbKind::random) {
    for (std::size_t i = 0; i < words.size(); ++i) out.push_back(sampler.draw(rng));
    return join_words(out);
  }
  const auto ref = split_words(sample.transcript);
  const std::set<std::string> in_ref(ref.begin(), ref.end());
  for (auto& w : words) {
    const bool target = rare.count(w) && in_ref.count(w) && lexicon.respellings.count(w);
    if (!target) {
      out.push_back(w);
    } else if (kind == PerturbKind::respell_replace) {
      out.push_back(lexicon.respell(w));
    } else {
      out.push_back(w);
      out.push_back(lexicon.respell(w));
    }
  }
  return join_words(out);
}

// ---------------------------------------------------------------------------
// Report rows

inline std::string fmt_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

inline nlohmann::ordered_json report_json(const WerReport& r) {
  nlohmann::ordered_json j;
  j["label"] = r.label;
  j["utterances"] = r.utterances;
  j["ref_words"] = r.n_ref_words;
  j["sub"] = r.sub;
  j["ins"] = r.ins;
  j["del"] = r.del;
  j["rare_ref_words"] = r.rare_ref_words;
  j["rare_errors"] = r.rare_errors;
  j["wer"] = r.wer();
  j["sub_rate"] = r.sub_rate();
  j["ins_rate"] = r.ins_rate();
  j["del_rate"] = r.del_rate();
  if (auto rw = r.rare_wer())
    j["rare_wer"] = *rw;
  else
    j["rare_wer"] = nullptr;
  return j;
}

inline WerReport report_from_json(const nlohmann::json& j) {
  WerReport r;
  r.label = j.value("label", "");
  r.utterances = j.at("utterances").get<std::size_t>();
  r.n_ref_words = j.at("ref_words").get<std::size_t>();
  r.sub = j.at("sub").get<std::size_t>();
  r.ins = j.at("ins").get<std::size_t>();
  r.del = j.at("del").get<std::size_t>();
  r.rare_ref_words = j.at("rare_ref_words").get<std::size_t>();
  r.rare_errors = j.at("rare_errors").get<std::size_t>();
  return r;
}

inline std::string rare_wer_cell(const WerReport& r) {
  auto rw = r.rare_wer();
  return rw ? fmt_pct(*rw) : "NA";
}

// A Markdown table: leading label columns, then WER, SUB, INS, DEL, RareWER.
inline std::string markdown_table(const std::vector<std::string>& label_headers,
                                  const std::vector<std::pair<std::vector<std::string>, WerReport>>& rows) {
  std::string out = "|";
  for (auto& h : label_headers) out += " " + h + " |";
  out += " WER | SUB | INS | DEL | RareWER |\n|";
  for (std::size_t i = 0; i < label_headers.size() + 5; ++i) out += "---|";
  out += "\n";
  for (auto& [labels, r] : rows) {
    out += "|";
    for (auto& l : labels) out += " " + l + " |";
    out += " " + fmt_pct(r.wer()) + " | " + fmt_pct(r.sub_rate()) + " | " + fmt_pct(r.ins_rate()) + " | " +
           fmt_pct(r.del_rate()) + " | " + rare_wer_cell(r) + " |\n";
  }
  return out;
}

}  // namespace ctxasr
