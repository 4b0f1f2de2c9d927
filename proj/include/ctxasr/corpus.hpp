#pragma once

// Synthetic corpus: a Zipf lexicon with homophone pairs, feature frames
// generated from each word's pronunciation ("prototype") spelling, context
// strings, augmentation, and a rule-based respeller.

#include "ctxasr/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace ctxasr {

// splitmix64 finalizer; combines a root seed with stream identifiers.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t root, Ids... ids) {
  std::uint64_t h = mix_seed(root);
  ((h = mix_seed(h ^ static_cast<std::uint64_t>(ids))), ...);
  return h;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Respelling

// Grapheme substitutions that keep the pronunciation. The first rule whose
// result is accepted by `accept` wins; the fallback appends an "h".
template <typename Accept>
std::string respell_word(const std::string& w, Accept&& accept) {
  static const std::vector<std::pair<std::string, std::string>> rules = {
      {"all", "awl"}, {"ee", "ea"}, {"ea", "ee"}, {"ph", "f"}, {"ck", "k"}, {"oo", "ou"}, {"ai", "ay"},
      {"c", "k"},     {"k", "c"},   {"f", "ph"},  {"y", "i"},  {"i", "y"},  {"s", "z"},   {"o", "oh"},
  };
  for (auto& [from, to] : rules) {
    const auto at = w.rfind(from);
    if (at == std::string::npos) continue;
    std::string r = w;
    r.replace(at, from.size(), to);
    if (r != w && accept(r)) return r;
  }
  for (std::string r = w + "h";; r += "h")
    if (accept(r)) return r;
}

// ---------------------------------------------------------------------------
// Lexicon

struct HomophonePair {
  std::string a, b;
  int prototype = 0;
};

struct Lexicon {
  std::vector<std::string> words;  // rank order, most frequent first
  std::vector<double> weights;     // Zipf(1.2) over ranks, normalized
  std::vector<bool> rare;
  std::vector<int> prototype;                 // per word
  std::vector<std::string> prototype_spelling;  // per prototype id
  std::vector<HomophonePair> homophone_pairs;
  std::map<std::string, std::string> respellings;
  std::uint64_t seed = 0;

  int index_of(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? -1 : it->second;
  }
  bool contains(const std::string& w) const { return index_of(w) >= 0; }
  bool is_rare(const std::string& w) const {
    const int i = index_of(w);
    return i >= 0 && rare[static_cast<std::size_t>(i)];
  }
  const std::string& spelling_of_sound(const std::string& w) const {
    const int i = index_of(w);
    if (i < 0) throw std::invalid_argument("word '" + w + "' is not in the lexicon");
    return prototype_spelling[static_cast<std::size_t>(prototype[static_cast<std::size_t>(i)])];
  }
  const std::string& respell(const std::string& w) const {
    auto it = respellings.find(w);
    if (it == respellings.end()) throw std::invalid_argument("no respelling for '" + w + "'");
    return it->second;
  }
  std::vector<std::size_t> rare_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < words.size(); ++i)
      if (rare[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> frequent_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < words.size(); ++i)
      if (!rare[i]) out.push_back(i);
    return out;
  }
  bool is_homophone(const std::string& w) const {
    for (auto& p : homophone_pairs)
      if (p.a == w || p.b == w) return true;
    return false;
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words.size(); ++i) index_[words[i]] = static_cast<int>(i);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["words"] = words;
    j["weights"] = weights;
    std::vector<int> flags(rare.begin(), rare.end());
    j["rare_flags"] = flags;
    j["prototype"] = prototype;
    j["prototype_spelling"] = prototype_spelling;
    auto pairs = nlohmann::ordered_json::array();
    for (auto& p : homophone_pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"prototype", p.prototype}});
    j["homophone_pairs"] = pairs;
    nlohmann::ordered_json resp = nlohmann::ordered_json::object();
    for (auto& [w, r] : respellings) resp[w] = r;
    j["respell"] = resp;
    return j;
  }

  static Lexicon from_json(const nlohmann::json& j) {
    Lexicon lx;
    lx.seed = j.at("seed").get<std::uint64_t>();
    lx.words = j.at("words").get<std::vector<std::string>>();
    lx.weights = j.at("weights").get<std::vector<double>>();
    for (int f : j.at("rare_flags").get<std::vector<int>>()) lx.rare.push_back(f != 0);
    lx.prototype = j.at("prototype").get<std::vector<int>>();
    lx.prototype_spelling = j.at("prototype_spelling").get<std::vector<std::string>>();
    for (auto& p : j.at("homophone_pairs"))
      lx.homophone_pairs.push_back({p.at("a").get<std::string>(), p.at("b").get<std::string>(), p.at("prototype").get<int>()});
    for (auto& [w, r] : j.at("respell").items()) lx.respellings[w] = r.get<std::string>();
    lx.reindex();
    return lx;
  }

 private:
  std::unordered_map<std::string, int> index_;
};

inline constexpr double kZipfExponent = 1.2;

namespace detail {

inline std::string make_syllable(Rng& rng, bool final) {
  static const std::vector<std::string> onsets = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n",
                                                  "p", "r", "s", "t", "v", "w", "z", "ch", "sh", "th",
                                                  "ph", "br", "cr", "dr", "fr", "gr", "pl", "st", "tr"};
  static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u", "ee", "ea", "oo", "ai", "y"};
  static const std::vector<std::string> codas = {"", "", "", "n", "r", "l", "s", "t", "ck", "ll", "m"};
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::string s = pick(onsets) + pick(vowels);
  if (final || std::bernoulli_distribution(0.3)(rng)) s += pick(codas);
  return s;
}

}  // namespace detail

// Deterministic for a seed. Words are ranked by Zipf weight; the last
// round(n_words * rare_fraction) ranks are rare. `pairs` rare words receive a
// homophone partner (their respelling) inserted directly after them.
inline Lexicon build_lexicon(std::uint64_t seed, std::size_t n_words, double rare_fraction, std::size_t pairs = 24) {
  if (n_words < 100) throw std::invalid_argument("build_lexicon: n_words must be >= 100");
  if (!(rare_fraction > 0.0 && rare_fraction < 1.0))
    throw std::invalid_argument("build_lexicon: rare_fraction must be in (0,1)");
  if (pairs < 20) throw std::invalid_argument("build_lexicon: at least 20 homophone pairs are required");
  const auto rare_count = static_cast<std::size_t>(std::llround(static_cast<double>(n_words) * rare_fraction));
  if (rare_count < 2 * pairs)
    throw std::invalid_argument("build_lexicon: rare_fraction leaves fewer than " + std::to_string(2 * pairs) +
                                " rare words for the homophone pairs");
  const std::size_t frequent_count = n_words - rare_count;
  const std::size_t base_count = n_words - pairs;

  Rng rng(derive_seed(seed, 0x1e71c0));
  std::vector<std::string> base;
  std::set<std::string> taken;
  while (base.size() < base_count) {
    const bool rare = base.size() >= frequent_count;
    const int syllables = rare ? std::uniform_int_distribution<int>(2, 3)(rng)
                               : std::uniform_int_distribution<int>(1, 2)(rng);
    std::string w;
    for (int s = 0; s < syllables; ++s) w += detail::make_syllable(rng, s + 1 == syllables);
    if (w.size() < 2 || w.size() > 10 || !taken.insert(w).second) continue;
    base.push_back(w);
  }

  // Pair sources: every other rare-region base word, from the head of the tail.
  std::vector<std::string> partners(base_count);
  std::size_t made = 0;
  for (std::size_t i = frequent_count; i < base_count && made < pairs; i += 2) {
    auto accept = [&](const std::string& r) { return !taken.count(r); };
    std::string p = respell_word(base[i], accept);
    taken.insert(p);
    partners[i] = p;
    ++made;
  }
  if (made < pairs) throw std::invalid_argument("build_lexicon: could not place all homophone pairs");

  Lexicon lx;
  lx.seed = seed;
  for (std::size_t i = 0; i < base_count; ++i) {
    const int proto = static_cast<int>(lx.prototype_spelling.size());
    lx.prototype_spelling.push_back(base[i]);
    lx.words.push_back(base[i]);
    lx.prototype.push_back(proto);
    if (!partners[i].empty()) {
      lx.words.push_back(partners[i]);
      lx.prototype.push_back(proto);
      lx.homophone_pairs.push_back({base[i], partners[i], proto});
    }
  }
  double z = 0;
  for (std::size_t k = 1; k <= lx.words.size(); ++k) z += std::pow(static_cast<double>(k), -kZipfExponent);
  for (std::size_t k = 1; k <= lx.words.size(); ++k)
    lx.weights.push_back(std::pow(static_cast<double>(k), -kZipfExponent) / z);
  for (std::size_t i = 0; i < lx.words.size(); ++i) lx.rare.push_back(i >= frequent_count);
  lx.reindex();

  for (auto& p : lx.homophone_pairs) {
    lx.respellings[p.a] = p.b;
    lx.respellings[p.b] = p.a;
  }
  std::set<std::string> all(lx.words.begin(), lx.words.end());
  for (auto& w : lx.words) {
    if (lx.respellings.count(w)) continue;
    lx.respellings[w] = respell_word(w, [&](const std::string& r) { return !all.count(r); });
  }
  return lx;
}

// ---------------------------------------------------------------------------
// Features

struct AudioFeatures {
  std::size_t frames = 0;
  std::size_t feat_dim = 0;
  std::vector<float> values;  // [frames, feat_dim] row-major
  static constexpr int frame_shift_ms = 10;

  float at(std::size_t t, std::size_t f) const { return values[t * feat_dim + f]; }
  bool operator==(const AudioFeatures&) const = default;
};

struct FeatureConfig {
  std::size_t feat_dim = 16;
  int frames_per_char_min = 2;
  int frames_per_char_max = 4;
  double jitter = 0.1;
};

// Fixed per-character feature vectors derived from the lexicon seed.
inline std::vector<std::vector<float>> char_prototypes(std::uint64_t lexicon_seed, std::size_t feat_dim) {
  Rng rng(derive_seed(lexicon_seed, 0xfea7));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<float>> protos(128, std::vector<float>(feat_dim));
  for (auto& p : protos)
    for (auto& v : p) v = static_cast<float>(nd(rng));
  return protos;
}

// Feature values are kept on a 1e-4 grid so they survive the text corpus format exactly.
inline double feature_grid(double v) { return std::round(v * 1e4) / 1e4; }

// Each character of every word's prototype spelling (and a single space
// between words) emits its prototype vector for 2..4 frames, plus Gaussian
// jitter. Homophones share a prototype spelling and hence identical frames.
inline AudioFeatures features_for(const std::string& transcript, const Lexicon& lexicon, std::uint64_t seed,
                                  const FeatureConfig& cfg = {}) {
  const auto words = split_words(transcript);
  if (words.empty()) throw std::invalid_argument("features_for: empty transcript");
  if (cfg.frames_per_char_min < 1 || cfg.frames_per_char_max < cfg.frames_per_char_min)
    throw std::invalid_argument("features_for: invalid frames-per-char range");
  std::string sound;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!lexicon.contains(words[i]))
      throw std::invalid_argument("features_for: out-of-vocabulary word '" + words[i] + "'");
    if (i) sound.push_back(' ');
    sound += lexicon.spelling_of_sound(words[i]);
  }
  const auto protos = char_prototypes(lexicon.seed, cfg.feat_dim);
  Rng rng(seed);
  std::uniform_int_distribution<int> reps(cfg.frames_per_char_min, cfg.frames_per_char_max);
  std::normal_distribution<double> jitter(0.0, cfg.jitter > 0 ? cfg.jitter : 1.0);
  const bool jittered = cfg.jitter > 0;
  AudioFeatures f;
  f.feat_dim = cfg.feat_dim;
  for (char c : sound) {
    const int r = reps(rng);
    const auto& proto = protos[static_cast<unsigned char>(c) & 0x7F];
    for (int k = 0; k < r; ++k) {
      for (std::size_t d = 0; d < cfg.feat_dim; ++d)
        f.values.push_back(static_cast<float>(feature_grid(proto[d] + (jittered ? jitter(rng) : 0.0))));
      ++f.frames;
    }
  }
  return f;
}


// ---------------------------------------------------------------------------
// Samples and corpus generation

struct Sample {
  std::string id;
  std::string transcript;
  std::vector<int> transcript_tokens;
  AudioFeatures feats;
  std::optional<std::string> context;
  std::vector<std::string> rare_words;  // rare-flagged lexicon words of the transcript, in order
};

struct CorpusConfig {
  std::size_t n_words = 400;
  double rare_fraction = 0.5;
  std::size_t homophone_pairs = 24;
  std::size_t n_train = 3000;
  std::size_t n_eval = 200;
  int min_words = 5;
  int max_words = 12;
  double context_fraction = 0.25;
  double rare_inject_prob = 0.5;
  double eval_homophone_fraction = 0.4;
  int distractors_min = 5;
  int distractors_max = 15;
  double distractor_rare_prob = 0.3;
  FeatureConfig features;
};

struct Corpus {
  Lexicon lexicon;
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

namespace detail {

inline std::string draw_weighted(const Lexicon& lx, const std::vector<std::size_t>& pool,
                                 std::discrete_distribution<std::size_t>& dist, Rng& rng) {
  return lx.words[pool[dist(rng)]];
}

inline std::vector<std::string> rare_words_of(const Lexicon& lx, const std::vector<std::string>& words) {
  std::vector<std::string> out;
  for (auto& w : words)
    if (lx.is_rare(w)) out.push_back(w);
  return out;
}

// Bag of words: the transcript's rare words plus 5..15 distractors, shuffled.
inline std::string make_context(const Lexicon& lx, const std::vector<std::string>& rare_in_transcript,
                                const CorpusConfig& cfg, Rng& rng) {
  const auto freq = lx.frequent_indices();
  const auto rare = lx.rare_indices();
  std::vector<double> fw;
  for (auto i : freq) fw.push_back(lx.weights[i]);
  std::discrete_distribution<std::size_t> fdist(fw.begin(), fw.end());
  std::uniform_int_distribution<std::size_t> rdist(0, rare.size() - 1);
  std::bernoulli_distribution use_rare(cfg.distractor_rare_prob);
  std::vector<std::string> bag;
  std::set<std::string> seen(rare_in_transcript.begin(), rare_in_transcript.end());
  for (auto& w : seen) bag.push_back(w);
  const int n = std::uniform_int_distribution<int>(cfg.distractors_min, cfg.distractors_max)(rng);
  for (int k = 0; k < n; ++k) {
    std::string w = use_rare(rng) ? lx.words[rare[rdist(rng)]] : draw_weighted(lx, freq, fdist, rng);
    // Keep distractors from spelling out the other member of a homophone pair.
    bool clash = false;
    for (auto& r : rare_in_transcript) clash = clash || lx.respellings.at(r) == w;
    if (!clash) bag.push_back(w);
  }
  std::shuffle(bag.begin(), bag.end(), rng);
  return join_words(bag);
}

inline std::vector<std::string> draw_transcript(const Lexicon& lx, const CorpusConfig& cfg, Rng& rng, int forced_rare,
                                                bool force_homophone) {
  const auto freq = lx.frequent_indices();
  const auto rare = lx.rare_indices();
  std::vector<double> fw;
  for (auto i : freq) fw.push_back(lx.weights[i]);
  std::discrete_distribution<std::size_t> fdist(fw.begin(), fw.end());
  const int n = std::uniform_int_distribution<int>(cfg.min_words, cfg.max_words)(rng);
  std::vector<std::string> words;
  for (int i = 0; i < n; ++i) words.push_back(draw_weighted(lx, freq, fdist, rng));
  std::uniform_int_distribution<std::size_t> pos(0, words.size() - 1);
  std::uniform_int_distribution<std::size_t> rdist(0, rare.size() - 1);
  std::set<std::size_t> used;
  for (int k = 0; k < forced_rare; ++k) {
    std::size_t at = pos(rng);
    while (used.count(at)) at = pos(rng);
    used.insert(at);
    if (k == 0 && force_homophone) {
      const auto& pair = lx.homophone_pairs[std::uniform_int_distribution<std::size_t>(0, lx.homophone_pairs.size() - 1)(rng)];
      words[at] = std::bernoulli_distribution(0.5)(rng) ? pair.a : pair.b;
    } else {
      words[at] = lx.words[rare[rdist(rng)]];
    }
  }
  return words;
}

inline Sample make_sample(const Lexicon& lx, const CorpusConfig& cfg, std::string id, std::vector<std::string> words,
                          std::uint64_t feat_seed, const CharTokenizer& tok) {
  Sample s;
  s.id = std::move(id);
  s.transcript = join_words(words);
  s.transcript_tokens = tok.tokenize(s.transcript);
  s.feats = features_for(s.transcript, lx, feat_seed, cfg.features);
  s.rare_words = rare_words_of(lx, words);
  return s;
}

}  // namespace detail

// Training: Zipf-drawn frequent words, one uniformly drawn rare word injected
// with probability rare_inject_prob, and a context for exactly
// round(context_fraction * n_train) samples. Evaluation: 1-2 rare words per
// transcript (a homophone for eval_homophone_fraction of them), always with a
// context that contains them, transcripts disjoint from training.
inline Corpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.n_train < 1 || cfg.n_eval < 1) throw std::invalid_argument("generate_corpus: split sizes must be >= 1");
  if (cfg.min_words < 1 || cfg.max_words < cfg.min_words)
    throw std::invalid_argument("generate_corpus: invalid transcript length range");
  Corpus c;
  c.lexicon = build_lexicon(seed, cfg.n_words, cfg.rare_fraction, cfg.homophone_pairs);
  const auto& lx = c.lexicon;
  const CharTokenizer tok;

  Rng pick(derive_seed(seed, 0xc0de));
  std::vector<std::size_t> order(cfg.n_train);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), pick);
  const auto n_ctx = static_cast<std::size_t>(std::llround(cfg.context_fraction * static_cast<double>(cfg.n_train)));
  std::vector<bool> has_ctx(cfg.n_train, false);
  for (std::size_t i = 0; i < n_ctx && i < cfg.n_train; ++i) has_ctx[order[i]] = true;

  std::set<std::string> train_set;
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    Rng rng(derive_seed(seed, 1, i));
    const int forced = std::bernoulli_distribution(cfg.rare_inject_prob)(rng) ? 1 : 0;
    auto words = detail::draw_transcript(lx, cfg, rng, forced, false);
    auto s = detail::make_sample(lx, cfg, "train-" + std::to_string(i), words, derive_seed(seed, 2, i), tok);
    if (has_ctx[i]) s.context = detail::make_context(lx, s.rare_words, cfg, rng);
    train_set.insert(s.transcript);
    c.train.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < cfg.n_eval; ++i) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng(derive_seed(seed, 3, i, attempt));
      const int forced = std::bernoulli_distribution(0.3)(rng) ? 2 : 1;
      const bool homophone = std::bernoulli_distribution(cfg.eval_homophone_fraction)(rng);
      auto words = detail::draw_transcript(lx, cfg, rng, forced, homophone);
      if (train_set.count(join_words(words))) continue;
      auto s = detail::make_sample(lx, cfg, "eval-" + std::to_string(i), words, derive_seed(seed, 4, i, attempt), tok);
      s.context = detail::make_context(lx, s.rare_words, cfg, rng);
      c.eval.push_back(std::move(s));
      break;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  int freq_masks = 2;
  int freq_mask_width = 5;  // round(27 * feat_dim / 80) at feat_dim 16
  int time_masks = 10;
  double time_mask_max_frac = 0.04;
  std::vector<double> speed_factors{0.9, 1.0, 1.1};
  double noise_sigma = 0.05;

  static int scaled_freq_width(std::size_t feat_dim) {
    return static_cast<int>(std::lround(27.0 * static_cast<double>(feat_dim) / 80.0));
  }

  static AugmentConfig identity() { return {0, 0, 0, 0.0, {1.0}, 0.0}; }

  void validate(std::size_t feat_dim) const {
    if (freq_masks < 0 || time_masks < 0) throw std::invalid_argument("augment: mask counts must be >= 0");
    if (freq_mask_width < 0 || static_cast<std::size_t>(freq_mask_width) > feat_dim)
      throw std::invalid_argument("augment: freq_mask_width must be within [0, feat_dim]");
    if (time_mask_max_frac < 0.0 || time_mask_max_frac > 1.0)
      throw std::invalid_argument("augment: time_mask_max_frac must be in [0,1]");
    if (speed_factors.empty()) throw std::invalid_argument("augment: speed_factors is empty");
    for (double f : speed_factors)
      if (!(f > 0.0)) throw std::invalid_argument("augment: speed factors must be positive");
    if (noise_sigma < 0.0) throw std::invalid_argument("augment: noise_sigma must be >= 0");
  }
};

inline std::size_t speed_perturbed_length(std::size_t frames, double factor) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(frames) / factor)));
}

// Speed perturbation (nearest-frame resampling), additive Gaussian noise, then
// frequency and time masks that zero whole bands.
inline AudioFeatures augment(const AudioFeatures& in, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate(in.feat_dim);
  const std::size_t d = in.feat_dim;
  const double factor = cfg.speed_factors[std::uniform_int_distribution<std::size_t>(0, cfg.speed_factors.size() - 1)(rng)];
  AudioFeatures out;
  out.feat_dim = d;
  if (factor == 1.0) {
    out = in;
  } else {
    out.frames = speed_perturbed_length(in.frames, factor);
    out.values.resize(out.frames * d);
    for (std::size_t t = 0; t < out.frames; ++t) {
      const auto src = std::min<std::size_t>(in.frames - 1, static_cast<std::size_t>(std::llround(static_cast<double>(t) * factor)));
      std::copy_n(in.values.begin() + static_cast<long>(src * d), d, out.values.begin() + static_cast<long>(t * d));
    }
  }
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> nd(0.0, cfg.noise_sigma);
    for (auto& v : out.values) v += static_cast<float>(nd(rng));
  }
  for (int m = 0; m < cfg.freq_masks; ++m) {
    const int w = std::uniform_int_distribution<int>(0, cfg.freq_mask_width)(rng);
    if (w == 0) continue;
    const auto start = std::uniform_int_distribution<std::size_t>(0, d - static_cast<std::size_t>(w))(rng);
    for (std::size_t t = 0; t < out.frames; ++t)
      for (std::size_t f = start; f < start + static_cast<std::size_t>(w); ++f) out.values[t * d + f] = 0.0f;
  }
  const auto max_w = static_cast<std::size_t>(cfg.time_mask_max_frac * static_cast<double>(out.frames));
  for (int m = 0; m < cfg.time_masks && max_w > 0; ++m) {
    const auto w = std::uniform_int_distribution<std::size_t>(0, max_w)(rng);
    if (w == 0) continue;
    const auto start = std::uniform_int_distribution<std::size_t>(0, out.frames - w)(rng);
    std::fill(out.values.begin() + static_cast<long>(start * d), out.values.begin() + static_cast<long>((start + w) * d), 0.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk corpus: train.jsonl, eval.jsonl, lexicon.json

inline nlohmann::ordered_json sample_to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["transcript"] = s.transcript;
  j["context"] = s.context ? nlohmann::ordered_json(*s.context) : nlohmann::ordered_json(nullptr);
  j["rare_words"] = s.rare_words;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < s.feats.frames; ++t) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t d = 0; d < s.feats.feat_dim; ++d) row.push_back(feature_grid(s.feats.values[t * s.feats.feat_dim + d]));
    rows.push_back(std::move(row));
  }
  j["feats"] = rows;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j, const CharTokenizer& tok) {
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.transcript = j.at("transcript").get<std::string>();
  s.transcript_tokens = tok.tokenize(s.transcript);
  if (!j.at("context").is_null()) s.context = j.at("context").get<std::string>();
  s.rare_words = j.at("rare_words").get<std::vector<std::string>>();
  const auto& rows = j.at("feats");
  if (rows.empty()) throw std::invalid_argument("sample " + s.id + " has no feature frames");
  s.feats.feat_dim = rows[0].size();
  for (auto& r : rows) {
    if (r.size() != s.feats.feat_dim) throw std::invalid_argument("sample " + s.id + " has ragged feature rows");
    for (auto& v : r) s.feats.values.push_back(v.get<float>());
    ++s.feats.frames;
  }
  return s;
}

inline void write_split(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (auto& s : samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::vector<Sample> read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  const CharTokenizer tok;
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(sample_from_json(nlohmann::json::parse(line), tok));
  return out;
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& c) {
  std::filesystem::create_directories(dir);
  write_split(dir / "train.jsonl", c.train);
  write_split(dir / "eval.jsonl", c.eval);
  std::ofstream lx(dir / "lexicon.json", std::ios::trunc);
  if (!lx) throw std::runtime_error("cannot write '" + (dir / "lexicon.json").string() + "'");
  lx << c.lexicon.to_json().dump(1) << '\n';
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  std::ifstream lx(dir / "lexicon.json");
  if (!lx) throw std::runtime_error("cannot read '" + (dir / "lexicon.json").string() + "'");
  c.lexicon = Lexicon::from_json(nlohmann::json::parse(lx));
  c.train = read_split(dir / "train.jsonl");
  c.eval = read_split(dir / "eval.jsonl");
  return c;
}

}  // namespace ctxasr
