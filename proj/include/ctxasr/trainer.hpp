#pragma once

// Optimizer, learning-rate schedule and the generic training loop shared by
// the three phases (CTC encoder pretraining, base LM pretraining, fine-tuning).

#include "ctxasr/bundle.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>

namespace ctxasr {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 1e-5;
  double grad_clip_norm = 1.0;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
      throw ConfigError("optimizer: beta1 and beta2 must lie in (0,1)");
    if (weight_decay < 0 || !(grad_clip_norm > 0) || !(eps > 0)) throw ConfigError("optimizer: invalid values");
  }
};

struct ScheduleConfig {
  double peak_lr = 5e-4;
  double floor_lr = 1e-5;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 4000;

  void validate() const {
    if (!(floor_lr > 0) || floor_lr > peak_lr) throw ConfigError("schedule: need 0 < floor_lr <= peak_lr");
    if (warmup_steps == 0 || warmup_steps >= total_steps) throw ConfigError("schedule: need 0 < warmup_steps < total_steps");
  }
};

// Linear warmup to peak over W steps, then geometric decay reaching floor at T.
inline double lr_at(std::size_t step, const ScheduleConfig& c) {
  if (step > c.total_steps) throw std::invalid_argument("lr_at: step past total_steps");
  if (step <= c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double frac = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return c.peak_lr * std::pow(c.floor_lr / c.peak_lr, frac);
}

inline Json to_json(const OptimizerConfig& c) {
  return {{"beta1", c.beta1}, {"beta2", c.beta2}, {"weight_decay", c.weight_decay}, {"grad_clip_norm", c.grad_clip_norm},
          {"eps", c.eps}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j, const std::string& where = "optimizer") {
  cfgio::check_keys(j, {"beta1", "beta2", "weight_decay", "grad_clip_norm", "eps"}, where);
  OptimizerConfig c;
  cfgio::read(j, "beta1", c.beta1, where);
  cfgio::read(j, "beta2", c.beta2, where);
  cfgio::read(j, "weight_decay", c.weight_decay, where);
  cfgio::read(j, "grad_clip_norm", c.grad_clip_norm, where);
  cfgio::read(j, "eps", c.eps, where);
  c.validate();
  return c;
}

inline Json to_json(const ScheduleConfig& c) {
  return {{"peak_lr", c.peak_lr}, {"floor_lr", c.floor_lr}, {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps}};
}

inline ScheduleConfig schedule_from_json(const nlohmann::json& j, const std::string& where = "schedule") {
  cfgio::check_keys(j, {"peak_lr", "floor_lr", "warmup_steps", "total_steps"}, where);
  ScheduleConfig c;
  cfgio::read(j, "peak_lr", c.peak_lr, where);
  cfgio::read(j, "floor_lr", c.floor_lr, where);
  cfgio::read(j, "warmup_steps", c.warmup_steps, where);
  cfgio::read(j, "total_steps", c.total_steps, where);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

template <typename S>
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  std::size_t steps() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

  // Global L2 norm over the gradients of trainable entries.
  static double grad_norm(const ParamStore<S>& store) {
    double sq = 0;
    for (auto& name : store.trainable_names()) {
      const auto& t = store.get(name);
      if (!t.has_grad()) continue;
      for (S g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
  }

  // Clips, then applies decoupled weight decay and a bias-corrected Adam update
  // to trainable entries only. Returns the pre-clip gradient norm.
  double step(ParamStore<S>& store, double lr) {
    const double norm = grad_norm(store);
    if (!std::isfinite(norm)) throw NumericError("adam_step: non-finite gradient norm; step aborted");
    const double clip = norm > cfg_.grad_clip_norm ? cfg_.grad_clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - lr * cfg_.weight_decay;
    for (auto& name : store.trainable_names()) {
      auto& t = store.get(name);
      auto p = t.mutable_data();
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      const bool has = t.has_grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = has ? static_cast<double>(t.grad()[i]) * clip : 0.0;
        st.m[i] = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * g * g;
        const double upd = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
        p[i] = static_cast<S>(static_cast<double>(p[i]) * decay - lr * upd);
      }
    }
    return norm;
  }

  void save(const std::filesystem::path& path) const {
    std::vector<Tensor<double>> hold;
    std::vector<std::string> names;
    hold.reserve(2 * state_.size() + 1);
    hold.push_back(Tensor<double>::from({1}, {static_cast<double>(t_)}));
    names.push_back("step");
    for (auto& [name, st] : state_) {
      hold.push_back(Tensor<double>::from({st.m.size()}, st.m));
      names.push_back("m/" + name);
      hold.push_back(Tensor<double>::from({st.v.size()}, st.v));
      names.push_back("v/" + name);
    }
    std::vector<std::pair<std::string, const Tensor<double>*>> list;
    for (std::size_t i = 0; i < hold.size(); ++i) list.emplace_back(names[i], &hold[i]);
    save_tensors(path, list, Dtype::f64);
  }

  void load(const std::filesystem::path& path) {
    const auto loaded = load_tensors(path);
    state_.clear();
    t_ = static_cast<std::size_t>(loaded.at("step").values.at(0));
    for (auto& [name, st] : loaded) {
      if (name.starts_with("m/")) state_[name.substr(2)].m = st.values;
      if (name.starts_with("v/")) state_[name.substr(2)].v = st.values;
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Training loop

// Deterministic batch composition: position p = step*B + k falls in epoch
// p / N, whose order is a shuffle seeded by (seed, phase, epoch).
class BatchPlan {
 public:
  BatchPlan(std::size_t n_items, std::size_t batch_size, std::uint64_t seed)
      : n_(n_items), b_(batch_size), seed_(seed) {
    if (n_ == 0 || b_ == 0) throw std::invalid_argument("BatchPlan: empty data or zero batch size");
  }

  std::vector<std::size_t> batch(std::size_t step) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < b_; ++k) {
      const std::size_t pos = step * b_ + k;
      out.push_back(order(pos / n_)[pos % n_]);
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& order(std::size_t epoch) {
    if (epoch != cached_epoch_ || cached_.empty()) {
      cached_.resize(n_);
      std::iota(cached_.begin(), cached_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, 0x5u, epoch));
      std::shuffle(cached_.begin(), cached_.end(), rng);
      cached_epoch_ = epoch;
    }
    return cached_;
  }

  std::size_t n_, b_;
  std::uint64_t seed_;
  std::size_t cached_epoch_ = 0;
  std::vector<std::size_t> cached_;
};

struct PhaseOptions {
  std::string phase;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  std::size_t eval_every = 0;        // 0: only at the end
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::filesystem::path out_dir;
  std::optional<std::size_t> stop_at;  // stop early (schedule still spans total_steps)
  bool resume = false;
  bool verbose = true;
};

template <typename S>
struct PhaseHooks {
  std::size_t n_items = 0;
  // Mean loss over a batch (undefined tensor: nothing usable, step skipped).
  std::function<Tensor<S>(std::span<const std::size_t>, Rng&)> batch_loss;
  // Lower is better; logged under eval_key.
  std::function<double()> evaluate;
  std::string eval_key = "eval_wer";
};

struct PhaseResult {
  std::size_t steps = 0;
  double first_loss = 0, last_loss = 0;
  std::optional<double> best_eval;
  std::optional<double> final_eval;
  std::size_t skipped_steps = 0;
};

inline std::uint64_t phase_id(const std::string& phase) { return fnv1a("phase:" + phase); }

inline std::filesystem::path last_manifest(const std::filesystem::path& dir) { return dir / "last.json"; }
inline std::filesystem::path last_optimizer(const std::filesystem::path& dir) { return dir / "last.optim.ckpt"; }
inline std::filesystem::path final_manifest(const std::filesystem::path& dir) { return dir / "model.json"; }
inline std::filesystem::path best_manifest(const std::filesystem::path& dir) { return dir / "best.json"; }
inline std::filesystem::path metrics_log(const std::filesystem::path& dir) { return dir / "metrics.jsonl"; }

template <typename S>
PhaseResult run_phase(ModelBundle<S>& bundle, const PhaseOptions& opt, const PhaseHooks<S>& hooks) {
  opt.schedule.validate();
  const auto& dir = opt.out_dir;
  std::filesystem::create_directories(dir);
  Adam<S> adam(opt.optimizer);
  std::size_t start = 0;
  std::optional<double> best;
  if (opt.resume) {
    if (!std::filesystem::exists(last_manifest(dir)))
      throw BundleError("cannot resume: '" + last_manifest(dir).string() + "' not found");
    auto resumed = load_bundle<S>(last_manifest(dir));
    for (auto& name : bundle.params.names())
      if (!resumed.params.contains(name)) throw BundleError("cannot resume: checkpoint lacks '" + name + "'");
    assign_from(bundle.params, load_tensors(bundle_tensor_path(last_manifest(dir))));
    adam.load(last_optimizer(dir));
    start = resumed.step;
    if (std::filesystem::exists(best_manifest(dir))) {
      std::ifstream bin(best_manifest(dir));
      auto bj = nlohmann::json::parse(bin);
      if (bj.contains("best_eval")) best = bj.at("best_eval").get<double>();
    }
  }
  std::ofstream log(metrics_log(dir), opt.resume ? std::ios::app : std::ios::trunc);
  bundle.seed = opt.seed;
  bundle.phase = opt.phase;

  auto save_with = [&](const std::filesystem::path& p, std::size_t step, std::optional<double> eval) {
    bundle.step = step;
    save_bundle(p, bundle);
    if (eval) {
      std::ifstream in(p);
      auto j = nlohmann::ordered_json::parse(in);
      in.close();
      j["best_eval"] = *eval;
      std::ofstream out(p, std::ios::trunc);
      out << j.dump(2) << "\n";
    }
  };

  BatchPlan plan(hooks.n_items, opt.batch_size, derive_seed(opt.seed, phase_id(opt.phase)));
  const std::size_t end = std::min(opt.stop_at.value_or(opt.schedule.total_steps), opt.schedule.total_steps);
  PhaseResult res;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = start; step < end; ++step) {
    Rng rng(derive_seed(opt.seed, phase_id(opt.phase), step));
    const auto idx = plan.batch(step);
    bundle.params.zero_grad();
    auto loss = hooks.batch_loss(idx, rng);
    const double lr = lr_at(step + 1, opt.schedule);
    Json line{{"step", step + 1}, {"phase", opt.phase}, {"lr", lr}};
    if (!loss.defined()) {
      ++res.skipped_steps;
      line["loss"] = nullptr;
    } else {
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l)) throw NumericError(opt.phase + ": non-finite loss at step " + std::to_string(step + 1));
      backward(loss);
      const double gnorm = adam.step(bundle.params, lr);
      line["loss"] = l;
      line["grad_norm"] = gnorm;
      if (res.steps == 0) res.first_loss = l;
      res.last_loss = l;
    }
    ++res.steps;
    const bool last_step = step + 1 == opt.schedule.total_steps;
    if (hooks.evaluate && ((opt.eval_every && (step + 1) % opt.eval_every == 0) || last_step)) {
      const double e = hooks.evaluate();
      line[hooks.eval_key] = e;
      res.final_eval = e;
      if (!best || e < *best) {
        best = e;
        save_with(best_manifest(dir), step + 1, e);
      }
    }
    log << line.dump() << "\n";
    log.flush();
    if (opt.verbose && ((step + 1) % 50 == 0 || step + 1 == end)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "[" << opt.phase << "] step " << step + 1 << "/" << opt.schedule.total_steps << " loss "
                << res.last_loss << " lr " << lr;
      if (line.contains(hooks.eval_key)) std::cerr << " " << hooks.eval_key << " " << line[hooks.eval_key].template get<double>();
      std::cerr << " (" << static_cast<int>(secs) << "s)\n";
    }
    if ((opt.checkpoint_every && (step + 1) % opt.checkpoint_every == 0) || step + 1 == end) {
      save_with(last_manifest(dir), step + 1, std::nullopt);
      adam.save(last_optimizer(dir));
    }
  }
  if (end == opt.schedule.total_steps) save_with(final_manifest(dir), end, std::nullopt);
  res.best_eval = best;
  return res;
}

}  // namespace ctxasr
