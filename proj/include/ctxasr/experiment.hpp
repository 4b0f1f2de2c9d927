#pragma once

// Experiment configuration and the end-to-end commands: corpus generation,
// the two pretraining phases, fine-tuning, evaluation under context
// perturbations, the decoder-variant ablation and report merging.

#include "ctxasr/metrics.hpp"
#include "ctxasr/pipeline.hpp"
#include "ctxasr/trainer.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace ctxasr {

class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhaseConfig {
  ScheduleConfig schedule;
  std::size_t batch_size = 8;
  std::size_t eval_every = 0;
  std::size_t eval_samples = 100;
  std::size_t checkpoint_every = 0;
};

struct PathsConfig {
  std::filesystem::path data = "data";
  std::filesystem::path ctc = "ctc";
  std::filesystem::path lm = "lm";
};

struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 1234;
  Dtype scalar = Dtype::f32;
  CorpusConfig corpus;
  EncoderConfig encoder;
  DecoderConfig decoder;
  AugmentConfig augment;
  OptimizerConfig optimizer;
  PhaseConfig ctc{{1e-3, 1e-5, 200, 2000}, 8, 500, 100, 0};
  PhaseConfig lm{{1e-3, 1e-5, 200, 3000}, 16, 500, 200, 0};
  PhaseConfig finetune{{5e-4, 1e-5, 200, 4000}, 8, 500, 50, 0};
  bool context_in_training = true;
  bool context_in_eval = true;
  MaskKind mask = MaskKind::causal;
  RareRule rare_rule = RareRule::token_mass;
  std::size_t max_context_tokens = kMaxContextTokens;
  PathsConfig paths;

  void validate() const {
    if (schema_version != 1) throw ConfigError("schema_version " + std::to_string(schema_version) + " is not supported (expected 1)");
    try {
      encoder.validate();
      decoder.validate();
      augment.validate(encoder.feat_dim);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    optimizer.validate();
    ctc.schedule.validate();
    lm.schedule.validate();
    finetune.schedule.validate();
    if (corpus.features.feat_dim != encoder.feat_dim)
      throw ConfigError("corpus.feat_dim (" + std::to_string(corpus.features.feat_dim) + ") != encoder.feat_dim (" +
                        std::to_string(encoder.feat_dim) + ")");
    if (decoder.vocab_size != static_cast<std::size_t>(CharTokenizer{}.vocab_size()))
      throw ConfigError("decoder.vocab_size must equal the tokenizer vocabulary (" +
                        std::to_string(CharTokenizer{}.vocab_size()) + ")");
    if (encoder.decoder_dim != decoder.model_dim) throw ConfigError("encoder.decoder_dim must equal decoder.model_dim");
    if (max_context_tokens < 1) throw ConfigError("max_context_tokens must be >= 1");
    for (auto* p : {&ctc, &lm, &finetune})
      if (p->batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(corpus.rare_fraction > 0 && corpus.rare_fraction < 1)) throw ConfigError("corpus.rare_fraction must be in (0,1)");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const CorpusConfig& c) {
  return {{"n_words", c.n_words},
          {"rare_fraction", c.rare_fraction},
          {"homophone_pairs", c.homophone_pairs},
          {"n_train", c.n_train},
          {"n_eval", c.n_eval},
          {"min_words", c.min_words},
          {"max_words", c.max_words},
          {"context_fraction", c.context_fraction},
          {"rare_inject_prob", c.rare_inject_prob},
          {"eval_homophone_fraction", c.eval_homophone_fraction},
          {"distractors_min", c.distractors_min},
          {"distractors_max", c.distractors_max},
          {"distractor_rare_prob", c.distractor_rare_prob},
          {"feat_dim", c.features.feat_dim},
          {"frames_per_char_min", c.features.frames_per_char_min},
          {"frames_per_char_max", c.features.frames_per_char_max},
          {"jitter", c.features.jitter}};
}

inline CorpusConfig corpus_from_json(const nlohmann::json& j, const std::string& w = "corpus") {
  cfgio::check_keys(j,
                    {"n_words", "rare_fraction", "homophone_pairs", "n_train", "n_eval", "min_words", "max_words",
                     "context_fraction", "rare_inject_prob", "eval_homophone_fraction", "distractors_min",
                     "distractors_max", "distractor_rare_prob", "feat_dim", "frames_per_char_min",
                     "frames_per_char_max", "jitter"},
                    w);
  CorpusConfig c;
  cfgio::read(j, "n_words", c.n_words, w);
  cfgio::read(j, "rare_fraction", c.rare_fraction, w);
  cfgio::read(j, "homophone_pairs", c.homophone_pairs, w);
  cfgio::read(j, "n_train", c.n_train, w);
  cfgio::read(j, "n_eval", c.n_eval, w);
  cfgio::read(j, "min_words", c.min_words, w);
  cfgio::read(j, "max_words", c.max_words, w);
  cfgio::read(j, "context_fraction", c.context_fraction, w);
  cfgio::read(j, "rare_inject_prob", c.rare_inject_prob, w);
  cfgio::read(j, "eval_homophone_fraction", c.eval_homophone_fraction, w);
  cfgio::read(j, "distractors_min", c.distractors_min, w);
  cfgio::read(j, "distractors_max", c.distractors_max, w);
  cfgio::read(j, "distractor_rare_prob", c.distractor_rare_prob, w);
  cfgio::read(j, "feat_dim", c.features.feat_dim, w);
  cfgio::read(j, "frames_per_char_min", c.features.frames_per_char_min, w);
  cfgio::read(j, "frames_per_char_max", c.features.frames_per_char_max, w);
  cfgio::read(j, "jitter", c.features.jitter, w);
  return c;
}

inline Json to_json(const AugmentConfig& c) {
  return {{"freq_masks", c.freq_masks},       {"freq_mask_width", c.freq_mask_width},
          {"time_masks", c.time_masks},       {"time_mask_max_frac", c.time_mask_max_frac},
          {"speed_factors", c.speed_factors}, {"noise_sigma", c.noise_sigma}};
}

inline AugmentConfig augment_from_json(const nlohmann::json& j, const std::string& w = "augment") {
  cfgio::check_keys(j, {"freq_masks", "freq_mask_width", "time_masks", "time_mask_max_frac", "speed_factors", "noise_sigma"},
                    w);
  AugmentConfig c;
  cfgio::read(j, "freq_masks", c.freq_masks, w);
  cfgio::read(j, "freq_mask_width", c.freq_mask_width, w);
  cfgio::read(j, "time_masks", c.time_masks, w);
  cfgio::read(j, "time_mask_max_frac", c.time_mask_max_frac, w);
  cfgio::read(j, "speed_factors", c.speed_factors, w);
  cfgio::read(j, "noise_sigma", c.noise_sigma, w);
  return c;
}

inline Json to_json(const PhaseConfig& c) {
  return {{"schedule", to_json(c.schedule)},
          {"batch_size", c.batch_size},
          {"eval_every", c.eval_every},
          {"eval_samples", c.eval_samples},
          {"checkpoint_every", c.checkpoint_every}};
}

inline PhaseConfig phase_from_json(const nlohmann::json& j, PhaseConfig c, const std::string& w) {
  cfgio::check_keys(j, {"schedule", "batch_size", "eval_every", "eval_samples", "checkpoint_every"}, w);
  if (j.contains("schedule")) {
    auto merged = to_json(c.schedule);
    for (auto& [k, v] : j.at("schedule").items()) merged[k] = v;
    c.schedule = schedule_from_json(merged, w + ".schedule");
  }
  cfgio::read(j, "batch_size", c.batch_size, w);
  cfgio::read(j, "eval_every", c.eval_every, w);
  cfgio::read(j, "eval_samples", c.eval_samples, w);
  cfgio::read(j, "checkpoint_every", c.checkpoint_every, w);
  return c;
}

inline Json to_json(const ExperimentConfig& c) {
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"scalar", dtype_name(c.scalar)},
          {"corpus", to_json(c.corpus)},
          {"encoder", to_json(c.encoder)},
          {"decoder", to_json(c.decoder)},
          {"augment", to_json(c.augment)},
          {"optimizer", to_json(c.optimizer)},
          {"ctc_pretrain", to_json(c.ctc)},
          {"lm_pretrain", to_json(c.lm)},
          {"finetune", to_json(c.finetune)},
          {"context_in_training", c.context_in_training},
          {"context_in_eval", c.context_in_eval},
          {"mask_scheme", mask_name(c.mask)},
          {"rare_rule", rare_rule_name(c.rare_rule)},
          {"max_context_tokens", c.max_context_tokens},
          {"paths", {{"data", c.paths.data.string()}, {"ctc", c.paths.ctc.string()}, {"lm", c.paths.lm.string()}}}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  const std::string w = "config";
  cfgio::check_keys(j,
                    {"schema_version", "seed", "scalar", "corpus", "encoder", "decoder", "augment", "optimizer",
                     "ctc_pretrain", "lm_pretrain", "finetune", "context_in_training", "context_in_eval", "mask_scheme",
                     "variant", "rare_rule", "max_context_tokens", "paths"},
                    w);
  if (!j.contains("schema_version")) throw ConfigError("config: missing schema_version");
  ExperimentConfig c;
  cfgio::read(j, "schema_version", c.schema_version, w);
  if (c.schema_version != 1)
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected 1)");
  cfgio::read(j, "seed", c.seed, w);
  try {
    if (j.contains("scalar")) c.scalar = parse_dtype(j.at("scalar").get<std::string>());
    if (j.contains("rare_rule")) c.rare_rule = parse_rare_rule(j.at("rare_rule").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("corpus")) c.corpus = corpus_from_json(j.at("corpus"));
  if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
  if (j.contains("decoder")) c.decoder = decoder_from_json(j.at("decoder"));
  if (j.contains("variant")) c.decoder.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
  if (j.contains("ctc_pretrain")) c.ctc = phase_from_json(j.at("ctc_pretrain"), c.ctc, "ctc_pretrain");
  if (j.contains("lm_pretrain")) c.lm = phase_from_json(j.at("lm_pretrain"), c.lm, "lm_pretrain");
  if (j.contains("finetune")) c.finetune = phase_from_json(j.at("finetune"), c.finetune, "finetune");
  cfgio::read(j, "context_in_training", c.context_in_training, w);
  cfgio::read(j, "context_in_eval", c.context_in_eval, w);
  if (j.contains("mask_scheme")) c.mask = parse_mask(j.at("mask_scheme").get<std::string>());
  cfgio::read(j, "max_context_tokens", c.max_context_tokens, w);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    cfgio::check_keys(p, {"data", "ctc", "lm"}, "config.paths");
    if (p.contains("data")) c.paths.data = p.at("data").get<std::string>();
    if (p.contains("ctc")) c.paths.ctc = p.at("ctc").get<std::string>();
    if (p.contains("lm")) c.paths.lm = p.at("lm").get<std::string>();
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Helpers

inline std::size_t worker_count() {
  if (const char* env = std::getenv("CTXASR_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

// Runs fn(i) for i in [0, n) on up to worker_count() threads.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = worker_count()) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string file_checksum(const std::vector<std::filesystem::path>& files) {
  std::string all;
  for (auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw MissingPrerequisite("missing file '" + f.string() + "'");
    all.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return hex64(fnv1a(all));
}

inline std::string corpus_checksum(const std::filesystem::path& dir) {
  return file_checksum({dir / "train.jsonl", dir / "eval.jsonl", dir / "lexicon.json"});
}

inline void require_file(const std::filesystem::path& p, const std::string& what, const std::string& hint) {
  if (!std::filesystem::exists(p))
    throw MissingPrerequisite("missing " + what + " '" + p.string() + "'; run `" + hint + "` first");
}

inline Corpus load_corpus_checked(const std::filesystem::path& dir) {
  require_file(dir / "train.jsonl", "corpus", "ctxasr gen-data --out " + dir.string());
  require_file(dir / "eval.jsonl", "corpus", "ctxasr gen-data --out " + dir.string());
  require_file(dir / "lexicon.json", "lexicon", "ctxasr gen-data --out " + dir.string());
  return read_corpus(dir);
}

inline std::vector<std::string> transcripts_of(const std::vector<Sample>& s) {
  std::vector<std::string> out;
  for (auto& x : s) out.push_back(x.transcript);
  return out;
}

inline void write_json(const std::filesystem::path& p, const Json& j) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingPrerequisite("cannot read '" + p.string() + "'");
  return nlohmann::json::parse(in);
}

// ---------------------------------------------------------------------------
// gen-data

inline Json cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto corpus = generate_corpus(cfg.corpus, cfg.seed);
  write_corpus(out, corpus);
  std::size_t with_ctx = 0;
  for (auto& s : corpus.train) with_ctx += s.context.has_value();
  const auto rare = rare_word_set(transcripts_of(corpus.train), cfg.rare_rule);
  std::size_t eval_ok = 0;
  for (auto& s : corpus.eval) {
    bool ok = false;
    if (s.context) {
      const auto cw = split_words(*s.context);
      const std::set<std::string> cs(cw.begin(), cw.end());
      for (auto& w : split_words(s.transcript)) ok = ok || (rare.count(w) && cs.count(w));
    }
    eval_ok += ok;
  }
  Json info{{"seed", cfg.seed},
            {"corpus", to_json(cfg.corpus)},
            {"train_samples", corpus.train.size()},
            {"eval_samples", corpus.eval.size()},
            {"train_context_fraction", static_cast<double>(with_ctx) / static_cast<double>(corpus.train.size())},
            {"eval_shared_rare_fraction", static_cast<double>(eval_ok) / static_cast<double>(corpus.eval.size())},
            {"rare_words", rare.size()},
            {"checksum", corpus_checksum(out)}};
  write_json(out / "corpus.json", info);
  return info;
}

// ---------------------------------------------------------------------------
// Phases

template <typename S>
double ctc_greedy_wer(const ModelBundle<S>& b, const std::vector<Sample>& samples, std::size_t n) {
  NoGradGuard no_grad;
  const auto enc = b.encoder();
  const auto head = CtcHead<S>::bind(b.params, b.encoder_cfg);
  const CharTokenizer tok;
  n = std::min(n, samples.size());
  std::vector<WerReport> parts(n);
  parallel_for(n, [&](std::size_t i) {
    auto lp = ctc_log_probs(enc.hidden(features_tensor<S>(samples[i].feats), {}), head);
    parts[i] = align_wer(split_words(samples[i].transcript), split_words(tok.detokenize(ctc_greedy_decode(lp))));
  });
  WerReport total;
  for (auto& p : parts) total += p;
  return total.wer();
}

inline PhaseOptions phase_options(const ExperimentConfig& cfg, const PhaseConfig& pc, const std::string& phase,
                                  std::uint64_t seed, const std::filesystem::path& out) {
  PhaseOptions o;
  o.phase = phase;
  o.seed = seed;
  o.batch_size = pc.batch_size;
  o.schedule = pc.schedule;
  o.optimizer = cfg.optimizer;
  o.eval_every = pc.eval_every;
  o.checkpoint_every = pc.checkpoint_every;
  o.out_dir = out;
  return o;
}

struct RunControl {
  std::optional<std::size_t> stop_at;
  bool resume = false;
  bool verbose = true;
};

template <typename S>
Json cmd_pretrain_ctc(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunControl& rc = {}) {
  const auto corpus = load_corpus_checked(cfg.paths.data);
  const CharTokenizer tok;
  ModelBundle<S> b;
  b.encoder_cfg = cfg.encoder;
  b.decoder_cfg = cfg.decoder;
  Rng init(derive_seed(cfg.seed, phase_id("ctc_pretrain"), 0xC0FFEE));
  register_encoder(b.params, cfg.encoder, init);
  register_ctc_head(b.params, cfg.encoder, static_cast<std::size_t>(tok.vocab_size()) + 1, init);
  const auto enc = b.encoder();
  const auto head = CtcHead<S>::bind(b.params, b.encoder_cfg);
  std::size_t infeasible = 0;

  PhaseHooks<S> hooks;
  hooks.n_items = corpus.train.size();
  hooks.batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) -> Tensor<S> {
    std::vector<Tensor<S>> losses;
    for (auto i : idx) {
      const auto& s = corpus.train[i];
      const auto feats = augment(s.feats, cfg.augment, rng);
      auto lp = ctc_log_probs(enc.hidden(features_tensor<S>(feats), {true, &rng}), head);
      try {
        losses.push_back(ctc_loss(lp, s.transcript_tokens));
      } catch (const CtcInfeasible& e) {
        ++infeasible;
        std::cerr << "warning: skipping sample " << s.id << ": " << e.what() << "\n";
      }
    }
    if (losses.empty()) return {};
    auto total = losses[0];
    for (std::size_t k = 1; k < losses.size(); ++k) total = add(total, losses[k]);
    return scale(total, static_cast<S>(1.0 / static_cast<double>(losses.size())));
  };
  hooks.evaluate = [&] { return ctc_greedy_wer(b, corpus.train, cfg.ctc.eval_samples); };
  hooks.eval_key = "ctc_greedy_wer";
  auto opt = phase_options(cfg, cfg.ctc, "ctc_pretrain", cfg.seed, out);
  opt.stop_at = rc.stop_at;
  opt.resume = rc.resume;
  opt.verbose = rc.verbose;
  const auto res = run_phase(b, opt, hooks);
  Json info{{"phase", "ctc_pretrain"},       {"seed", cfg.seed},           {"steps", res.steps},
            {"first_loss", res.first_loss},  {"last_loss", res.last_loss}, {"infeasible_skipped", infeasible},
            {"corpus_checksum", corpus_checksum(cfg.paths.data)}};
  if (res.final_eval) info["ctc_greedy_wer"] = *res.final_eval;
  write_json(out / "summary.json", info);
  return info;
}

// Text for base LM pretraining: [cropped context] <bos> transcript <eos>.
inline std::vector<int> lm_text(const Sample& s, const CharTokenizer& tok, std::size_t max_context, Rng* rng) {
  std::vector<int> ids;
  if (s.context) ids = crop_context(tok.tokenize(*s.context), max_context, rng ? PromptMode::train : PromptMode::infer, rng);
  ids.push_back(CharTokenizer::kBos);
  ids.insert(ids.end(), s.transcript_tokens.begin(), s.transcript_tokens.end());
  ids.push_back(CharTokenizer::kEos);
  return ids;
}

template <typename S>
Tensor<S> lm_loss(const Decoder<S>& dec, std::span<const int> ids, const ForwardContext& ctx = {}) {
  auto h = dec.hidden(dec.embed_tokens(ids.first(ids.size() - 1)), {MaskKind::causal, 0}, nullptr, ctx);
  return cross_entropy(dec.logits(h), ids.subspan(1));
}

template <typename S>
double heldout_ce(const Decoder<S>& dec, const std::vector<Sample>& samples, std::size_t n, std::size_t max_context) {
  NoGradGuard no_grad;
  const CharTokenizer tok;
  n = std::min(n, samples.size());
  std::vector<double> sums(n), counts(n);
  parallel_for(n, [&](std::size_t i) {
    const auto ids = lm_text(samples[i], tok, max_context, nullptr);
    sums[i] = static_cast<double>(lm_loss(dec, ids).item()) * static_cast<double>(ids.size() - 1);
    counts[i] = static_cast<double>(ids.size() - 1);
  });
  double s = 0, c = 0;
  for (std::size_t i = 0; i < n; ++i) s += sums[i], c += counts[i];
  return s / c;
}

template <typename S>
Json cmd_pretrain_lm(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunControl& rc = {}) {
  const auto corpus = load_corpus_checked(cfg.paths.data);
  const CharTokenizer tok;
  ModelBundle<S> b;
  b.encoder_cfg = cfg.encoder;
  b.decoder_cfg = cfg.decoder;
  b.decoder_cfg.variant = DecoderVariant::decoder_only;
  Rng init(derive_seed(cfg.seed, phase_id("lm_pretrain"), 0xC0FFEE));
  register_decoder_base(b.params, b.decoder_cfg, init);
  const auto dec = b.decoder();

  PhaseHooks<S> hooks;
  hooks.n_items = corpus.train.size();
  hooks.batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) -> Tensor<S> {
    Tensor<S> total;
    for (auto i : idx) {
      const auto ids = lm_text(corpus.train[i], tok, cfg.max_context_tokens, &rng);
      auto l = lm_loss(dec, ids, {true, &rng});
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, static_cast<S>(1.0 / static_cast<double>(idx.size())));
  };
  hooks.evaluate = [&] { return heldout_ce(dec, corpus.eval, cfg.lm.eval_samples, cfg.max_context_tokens); };
  hooks.eval_key = "heldout_ce";
  auto opt = phase_options(cfg, cfg.lm, "lm_pretrain", cfg.seed, out);
  opt.stop_at = rc.stop_at;
  opt.resume = rc.resume;
  opt.verbose = rc.verbose;
  const auto res = run_phase(b, opt, hooks);
  if (std::filesystem::exists(final_manifest(out))) {
    // The pretrained base is stored frozen.
    auto done = load_bundle<S>(final_manifest(out));
    done.freeze_decoder_base();
    save_bundle(final_manifest(out), done);
  }
  Json info{{"phase", "lm_pretrain"},
            {"seed", cfg.seed},
            {"steps", res.steps},
            {"first_loss", res.first_loss},
            {"last_loss", res.last_loss},
            {"uniform_ce", std::log(static_cast<double>(tok.vocab_size()))},
            {"corpus_checksum", corpus_checksum(cfg.paths.data)}};
  if (res.final_eval) {
    info["heldout_ce"] = *res.final_eval;
    info["heldout_perplexity"] = std::exp(*res.final_eval);
  }
  write_json(out / "summary.json", info);
  return info;
}

// Joint model at step 0: CTC-pretrained encoder (head dropped), frozen base
// LM, fresh adapters (and cross-attention for the encoder-decoder variant).
template <typename S>
ModelBundle<S> initial_finetune_bundle(const ExperimentConfig& cfg, std::uint64_t seed) {
  require_file(final_manifest(cfg.paths.ctc), "CTC-pretrained encoder checkpoint", "ctxasr pretrain-ctc");
  require_file(final_manifest(cfg.paths.lm), "frozen LM checkpoint", "ctxasr pretrain-lm");
  auto enc = load_bundle<S>(final_manifest(cfg.paths.ctc));
  auto lm = load_bundle<S>(final_manifest(cfg.paths.lm));
  if (to_json(enc.encoder_cfg) != to_json(cfg.encoder))
    throw ConfigError("encoder config differs from the one in '" + cfg.paths.ctc.string() + "'");
  auto base_cfg = cfg.decoder;
  base_cfg.variant = DecoderVariant::decoder_only;
  base_cfg.lora = lm.decoder_cfg.lora;  // the base LM carries no adapters
  if (to_json(lm.decoder_cfg) != to_json(base_cfg))
    throw ConfigError("decoder config differs from the one in '" + cfg.paths.lm.string() + "'");
  ModelBundle<S> b;
  b.encoder_cfg = cfg.encoder;
  b.decoder_cfg = cfg.decoder;
  for (auto& [name, t] : enc.params.entries())
    if (!name.starts_with(kCtcHeadPrefix)) b.params.add(name, t.detach_copy(), true);
  for (auto& [name, t] : lm.params.entries()) b.params.add(name, t.detach_copy(), false);
  Rng init(derive_seed(seed, phase_id("finetune"), 0xC0FFEE));
  register_decoder_adapters(b.params, cfg.decoder, init);
  b.seed = seed;
  b.phase = "init";
  return b;
}

struct EvalOptions {
  bool context = true;
  PerturbKind perturb = PerturbKind::none;
  MaskKind mask = MaskKind::causal;
  std::size_t max_context = kMaxContextTokens;
  std::size_t limit = 0;  // 0: all samples
  std::uint64_t seed = 0;
};

struct EvalData {
  const Corpus* corpus;
  std::set<std::string> rare;
  WordSampler sampler;

  EvalData(const Corpus& c, RareRule rule)
      : corpus(&c), rare(rare_word_set(transcripts_of(c.train), rule)), sampler(transcripts_of(c.train)) {}
};

struct EvalResult {
  WerReport report;
  std::vector<std::string> hypotheses;
};

// Context off is the same path as the remove_all perturbation.
template <typename S>
EvalResult evaluate(const ModelBundle<S>& b, const EvalData& data, const EvalOptions& o) {
  const auto model = bind_model(b);
  const auto& samples = data.corpus->eval;
  const std::size_t n = o.limit ? std::min(o.limit, samples.size()) : samples.size();
  const PerturbKind kind = o.context ? o.perturb : PerturbKind::remove_all;
  std::vector<WerReport> parts(n);
  std::vector<std::string> hyps(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(o.seed, fnv1a("perturb:" + perturb_name(kind)), i));
    const auto ctx = perturb_context(samples[i], kind, data.corpus->lexicon, data.rare, data.sampler, rng);
    hyps[i] = transcribe(model, samples[i].feats, ctx, o.mask, o.max_context);
    parts[i] = score_utterance(samples[i].transcript, hyps[i], data.rare);
  });
  EvalResult r;
  for (auto& p : parts) r.report += p;
  r.hypotheses = std::move(hyps);
  return r;
}

inline std::filesystem::path run_info_path(const std::filesystem::path& dir) { return dir / "run.json"; }

template <typename S>
Json cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunControl& rc = {},
               std::optional<std::uint64_t> seed_override = std::nullopt) {
  const std::uint64_t seed = seed_override.value_or(cfg.seed);
  const auto corpus = load_corpus_checked(cfg.paths.data);
  auto b = initial_finetune_bundle<S>(cfg, seed);
  const auto frozen_before = hex64(b.params.frozen_checksum());
  std::filesystem::create_directories(out);
  save_bundle(out / "init.json", b);
  const CharTokenizer tok;
  const EvalData data(corpus, cfg.rare_rule);
  const auto model = bind_model(b);

  PhaseHooks<S> hooks;
  hooks.n_items = corpus.train.size();
  hooks.batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) -> Tensor<S> {
    Tensor<S> total;
    const ForwardContext fctx{true, &rng};
    for (auto i : idx) {
      const auto& s = corpus.train[i];
      const auto feats = augment(s.feats, cfg.augment, rng);
      auto audio = model.encoder.encode(features_tensor<S>(feats), fctx);
      std::vector<int> ctx_ids;
      if (cfg.context_in_training && s.context) ctx_ids = tok.tokenize(*s.context);
      auto p = assemble_prompt(model.decoder, ctx_ids.empty() ? nullptr : &ctx_ids, audio, s.transcript_tokens,
                               PromptMode::train, &rng, cfg.max_context_tokens);
      auto l = sequence_loss(model.decoder, p, cfg.mask, fctx);
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, static_cast<S>(1.0 / static_cast<double>(idx.size())));
  };
  EvalOptions eo;
  eo.context = cfg.context_in_training;
  eo.mask = cfg.mask;
  eo.max_context = cfg.max_context_tokens;
  eo.limit = cfg.finetune.eval_samples;
  eo.seed = seed;
  hooks.evaluate = [&] { return evaluate(b, data, eo).report.wer(); };
  hooks.eval_key = "eval_wer";
  auto opt = phase_options(cfg, cfg.finetune, "finetune", seed, out);
  opt.stop_at = rc.stop_at;
  opt.resume = rc.resume;
  opt.verbose = rc.verbose;
  const auto res = run_phase(b, opt, hooks);
  const auto frozen_after = hex64(b.params.frozen_checksum());
  if (frozen_after != frozen_before) throw NumericError("frozen decoder base changed during fine-tuning");
  Json info{{"phase", "finetune"},
            {"seed", seed},
            {"variant", variant_name(cfg.decoder.variant)},
            {"mask", mask_name(cfg.mask)},
            {"context_in_training", cfg.context_in_training},
            {"context_in_eval", cfg.context_in_eval},
            {"rare_rule", rare_rule_name(cfg.rare_rule)},
            {"max_context_tokens", cfg.max_context_tokens},
            {"steps", res.steps},
            {"first_loss", res.first_loss},
            {"last_loss", res.last_loss},
            {"trainable_parameters", b.params.trainable_count()},
            {"adapter_parameters", b.adapter_parameter_count()},
            {"frozen_parameters", b.params.count(b.params.frozen_names())},
            {"frozen_checksum", frozen_after},
            {"corpus_checksum", corpus_checksum(cfg.paths.data)},
            {"data", std::filesystem::absolute(cfg.paths.data).string()},
            {"config", to_json(cfg)}};
  if (res.final_eval) info["eval_wer_subset"] = *res.final_eval;
  write_json(run_info_path(out), info);
  return info;
}

inline std::string eval_file_name(bool context, PerturbKind k, MaskKind m) {
  return "eval_ctx-" + std::string(context ? "on" : "off") + "_" + perturb_name(context ? k : PerturbKind::remove_all) +
         "_" + mask_name(m) + ".json";
}

// Evaluates a checkpoint over the eval split; writes one JSON per condition
// next to the checkpoint and returns the rows.
template <typename S>
std::vector<Json> cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                           const std::vector<EvalOptions>& conditions, RareRule rule,
                           const std::filesystem::path& out_dir) {
  require_file(checkpoint, "checkpoint", "ctxasr train");
  const auto b = load_bundle<S>(checkpoint);
  if (!b.has_decoder() || !b.has_adapters()) throw BundleError("'" + checkpoint.string() + "' is not a fine-tuned model");
  const auto corpus = load_corpus_checked(data_dir);
  const EvalData data(corpus, rule);
  std::vector<Json> rows;
  for (auto o : conditions) {
    if (!o.context) o.perturb = PerturbKind::remove_all;
    o.seed = b.seed;
    auto r = evaluate(b, data, o);
    r.report.label = perturb_name(o.perturb);
    Json j{{"checkpoint", std::filesystem::absolute(checkpoint).string()},
           {"seed", b.seed},
           {"step", b.step},
           {"variant", variant_name(b.decoder_cfg.variant)},
           {"context", o.context},
           {"perturb", perturb_name(o.perturb)},
           {"mask", mask_name(o.mask)},
           {"weights_checksum", hex64(b.params.checksum(b.params.names()))},
           {"rare_rule", rare_rule_name(rule)},
           {"corpus_checksum", corpus_checksum(data_dir)},
           {"report", report_json(r.report)}};
    Json hyps = Json::array();
    for (std::size_t i = 0; i < r.hypotheses.size(); ++i)
      hyps.push_back({{"id", corpus.eval[i].id}, {"ref", corpus.eval[i].transcript}, {"hyp", r.hypotheses[i]}});
    j["hypotheses"] = hyps;
    write_json(out_dir / eval_file_name(o.context, o.perturb, o.mask), j);
    rows.push_back(j);
  }
  return rows;
}

inline std::string eval_rows_markdown(const std::vector<Json>& rows) {
  std::vector<std::pair<std::vector<std::string>, WerReport>> t;
  for (auto& j : rows)
    t.push_back({{j.at("context").get<bool>() ? "on" : "off", j.at("perturb").get<std::string>(),
                  j.at("mask").get<std::string>()},
                 report_from_json(j.at("report"))});
  return markdown_table({"context", "perturbation", "mask"}, t);
}

// ---------------------------------------------------------------------------
// report

struct ReportRow {
  std::string model, context_train, context_eval;
  WerReport report;
  std::string condition;
};

inline std::string lora_formula_note(const DecoderConfig& d) {
  const auto at_desk = lora_parameter_count(d.num_layers, d.model_dim, static_cast<std::size_t>(d.lora.rank),
                                            d.lora.target_projections.size());
  const auto at_paper = lora_parameter_count(32, 4096, 32, 4);
  return "LoRA adapter parameters = |targets| * L * 2 * d * r: desk config " + std::to_string(at_desk) +
         "; at L=32, d=4096, r=32 with q,k,v,o: " + std::to_string(at_paper) + " (about 30 million).";
}

// Merges eval_*.json files of the given run directories.
inline std::pair<std::string, Json> cmd_report(const std::vector<std::filesystem::path>& runs) {
  if (runs.empty()) throw ConfigError("report: no run directories given");
  std::vector<ReportRow> rows;
  std::set<std::string> corpora;
  std::optional<DecoderConfig> dec_cfg;
  std::vector<std::string> warnings;
  for (auto& dir : runs) {
    if (!std::filesystem::is_directory(dir)) throw MissingPrerequisite("run directory '" + dir.string() + "' not found");
    nlohmann::json info;
    if (std::filesystem::exists(run_info_path(dir))) info = read_json(run_info_path(dir));
    std::vector<std::filesystem::path> files;
    for (auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().filename().string().starts_with("eval_") && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw MissingPrerequisite("run '" + dir.string() + "' has no eval results; run `ctxasr eval` first");
    for (auto& f : files) {
      const auto j = read_json(f);
      ReportRow r;
      r.model = dir.filename().string() + " (" + j.at("variant").get<std::string>() + ", " + j.at("mask").get<std::string>() + ")";
      r.context_train = info.contains("context_in_training") ? (info.at("context_in_training").get<bool>() ? "yes" : "no") : "?";
      r.context_eval = j.at("context").get<bool>() ? "yes" : "no";
      r.condition = j.at("perturb").get<std::string>();
      r.report = report_from_json(j.at("report"));
      corpora.insert(j.at("corpus_checksum").get<std::string>());
      rows.push_back(r);
    }
    if (info.contains("config")) {
      auto d = decoder_from_json(info.at("config").at("decoder"));
      if (dec_cfg && to_json(*dec_cfg).at("lora") != to_json(d).at("lora"))
        warnings.push_back("conflicting LoRA configs across runs");
      dec_cfg = d;
    }
  }
  if (corpora.size() > 1) warnings.push_back("conflicting configs: runs were evaluated on " + std::to_string(corpora.size()) + " different corpora");

  std::vector<std::pair<std::vector<std::string>, WerReport>> table;
  Json jrows = Json::array();
  for (auto& r : rows) {
    table.push_back({{r.model + " [" + r.condition + "]", r.context_train, r.context_eval}, r.report});
    const auto rw = r.report.rare_wer();
    jrows.push_back({{"model", r.model + " [" + r.condition + "]"},
                     {"context-train", r.context_train},
                     {"context-eval", r.context_eval},
                     {"WER", fmt_pct(r.report.wer())},
                     {"SUB", fmt_pct(r.report.sub_rate())},
                     {"INS", fmt_pct(r.report.ins_rate())},
                     {"DEL", fmt_pct(r.report.del_rate())},
                     {"RareWER", rw ? fmt_pct(*rw) : "NA"}});
  }
  std::string md = "# Results\n\n";
  for (auto& w : warnings) md += "**Warning:** " + w + "\n\n";
  md += markdown_table({"model", "context-train", "context-eval"}, table);
  md += "\n" + lora_formula_note(dec_cfg.value_or(DecoderConfig{})) + "\n";
  Json j{{"rows", jrows}, {"warnings", warnings}, {"lora_note", lora_formula_note(dec_cfg.value_or(DecoderConfig{}))}};
  return {md, j};
}

}  // namespace ctxasr
