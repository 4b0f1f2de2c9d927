#pragma once

// Audio encoder (downsampling blocks, Conformer stack, final downsampling,
// projection to the decoder width) and the CTC criterion used to pretrain it.

#include "ctxasr/corpus.hpp"
#include "ctxasr/nn.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace ctxasr {

struct EncoderConfig {
  std::size_t feat_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t num_conformer_blocks = 2;
  std::size_t conv_kernel = 9;
  std::size_t pre_blocks = 4;
  std::size_t post_blocks = 1;
  std::size_t decoder_dim = 128;
  std::size_t num_heads = 4;
  std::size_t ff_mult = 4;
  double rope_base = 10000.0;

  std::size_t reduction() const { return std::size_t{1} << (pre_blocks + post_blocks); }

  AttentionConfig attention() const { return {hidden_dim, num_heads, rope_base}; }

  void validate() const {
    if (pre_blocks + post_blocks != 5)
      throw std::invalid_argument("encoder: pre_blocks + post_blocks must give a 32x reduction");
    if (conv_kernel % 2 == 0) throw std::invalid_argument("encoder: conv_kernel must be odd");
    if (feat_dim == 0 || hidden_dim == 0 || decoder_dim == 0) throw std::invalid_argument("encoder: zero width");
    attention().validate();
  }
};

// Output length after n stride-2 blocks: ceil applied n times.
inline std::size_t encoded_length(std::size_t frames, std::size_t blocks = 5) {
  for (std::size_t i = 0; i < blocks; ++i) frames = downsampled_length(frames);
  return frames;
}

inline const std::string kEncoderPrefix = "encoder.";
inline const std::string kCtcHeadPrefix = "encoder.ctc_head.";

template <typename S>
void register_encoder(ParamStore<S>& store, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.pre_blocks; ++i)
    register_downsample(store, "encoder.pre" + std::to_string(i), cfg.hidden_dim, i == 0 ? cfg.feat_dim : cfg.hidden_dim,
                        true, rng);
  for (std::size_t i = 0; i < cfg.num_conformer_blocks; ++i)
    register_conformer(store, "encoder.conformer" + std::to_string(i), cfg.hidden_dim, cfg.ff_mult * cfg.hidden_dim,
                       cfg.conv_kernel, true, rng);
  for (std::size_t i = 0; i < cfg.post_blocks; ++i)
    register_downsample(store, "encoder.post" + std::to_string(i), cfg.hidden_dim, cfg.hidden_dim, true, rng);
  register_linear(store, "encoder.proj", cfg.decoder_dim, cfg.hidden_dim, true, true, rng);
}

// CTC head for pretraining: each encoder frame predicts `reduction()` CTC
// frames, restoring the input frame rate so char-level targets stay feasible.
// One encoder frame spans ~10 characters, so the head gets a hidden layer.
template <typename S>
void register_ctc_head(ParamStore<S>& store, const EncoderConfig& cfg, std::size_t classes, Rng& rng) {
  register_linear(store, "encoder.ctc_head.hidden", 4 * cfg.hidden_dim, cfg.hidden_dim, true, true, rng);
  register_linear(store, "encoder.ctc_head.out", cfg.reduction() * classes, 4 * cfg.hidden_dim, true, true, rng);
}

template <typename S>
struct CtcHead {
  Linear<S> hidden, out;
  std::size_t reduction = 1;

  static CtcHead bind(const ParamStore<S>& s, const EncoderConfig& cfg) {
    return {Linear<S>::bind(s, "encoder.ctc_head.hidden"), Linear<S>::bind(s, "encoder.ctc_head.out"), cfg.reduction()};
  }
};

template <typename S>
struct AudioEncoder {
  EncoderConfig cfg;
  std::vector<Linear<S>> pre, post;
  std::vector<ConformerBlock<S>> blocks;
  Linear<S> proj;

  static AudioEncoder bind(const ParamStore<S>& s, const EncoderConfig& cfg) {
    AudioEncoder e{cfg, {}, {}, {}, Linear<S>::bind(s, "encoder.proj")};
    for (std::size_t i = 0; i < cfg.pre_blocks; ++i) e.pre.push_back(Linear<S>::bind(s, "encoder.pre" + std::to_string(i) + ".conv"));
    for (std::size_t i = 0; i < cfg.post_blocks; ++i)
      e.post.push_back(Linear<S>::bind(s, "encoder.post" + std::to_string(i) + ".conv"));
    for (std::size_t i = 0; i < cfg.num_conformer_blocks; ++i)
      e.blocks.push_back(ConformerBlock<S>::bind(s, "encoder.conformer" + std::to_string(i)));
    return e;
  }

  // Encoder states before the decoder projection: [ceil^5(T), hidden_dim].
  Tensor<S> hidden(const Tensor<S>& feats, const ForwardContext& ctx) const {
    if (feats.rank() != 2 || feats.dim(1) != cfg.feat_dim)
      throw ShapeError("encode", "features " + shape_str(feats.shape()) + " vs feat_dim " + std::to_string(cfg.feat_dim));
    auto h = feats;
    for (auto& b : pre) h = downsample_block(h, b);
    const auto att = cfg.attention();
    for (auto& b : blocks) h = conformer_block(h, b, att, ctx);
    for (auto& b : post) h = downsample_block(h, b);
    return h;
  }

  // Audio tokens for the decoder: [ceil^5(T), decoder_dim].
  Tensor<S> encode(const Tensor<S>& feats, const ForwardContext& ctx) const { return proj(hidden(feats, ctx)); }
};

template <typename S>
Tensor<S> features_tensor(const AudioFeatures& f) {
  if (f.frames < 1) throw std::invalid_argument("encode: audio must have at least one frame");
  return Tensor<S>::from({f.frames, f.feat_dim}, std::vector<S>(f.values.begin(), f.values.end()));
}

// Log-probabilities [reduction * T', classes] from the CTC head.
template <typename S>
Tensor<S> ctc_log_probs(const Tensor<S>& hidden, const CtcHead<S>& head) {
  auto logits = head.out(silu(head.hidden(hidden)));
  const std::size_t classes = logits.dim(1) / head.reduction;
  return log_softmax_lastdim(reshape(logits, {hidden.dim(0) * head.reduction, classes}));
}

// ---------------------------------------------------------------------------
// CTC

class CtcInfeasible : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Frames needed to emit `target`: one per label plus a blank between repeats.
inline std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

namespace detail {
template <typename S>
S log_add(S a, S b) {
  constexpr S ninf = -std::numeric_limits<S>::infinity();
  if (a == ninf) return b;
  if (b == ninf) return a;
  const S m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}
}  // namespace detail

// -log sum over all alignments of `target` to the rows of log_probs [T', C]
// (blank = C-1 unless given). Alpha/beta recursions run in log space.
template <typename S>
Tensor<S> ctc_loss(const Tensor<S>& log_probs, std::span<const int> target, int blank = -1) {
  using detail::log_add;
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss", "log_probs must be [T, C], got " + shape_str(log_probs.shape()));
  const std::size_t t_len = log_probs.dim(0), classes = log_probs.dim(1);
  if (blank < 0) blank = static_cast<int>(classes) - 1;
  for (int id : target)
    if (id < 0 || id >= static_cast<int>(classes) || id == blank)
      throw ShapeError("ctc_loss", "target id " + std::to_string(id) + " invalid for " + std::to_string(classes) + " classes");
  if (ctc_min_frames(target) > t_len)
    throw CtcInfeasible("ctc_loss: target needs " + std::to_string(ctc_min_frames(target)) + " frames, only " +
                        std::to_string(t_len) + " available");

  constexpr S ninf = -std::numeric_limits<S>::infinity();
  const std::size_t ext = 2 * target.size() + 1;
  std::vector<int> lab(ext, blank);
  for (std::size_t i = 0; i < target.size(); ++i) lab[2 * i + 1] = target[i];
  auto lp = [&](std::size_t t, std::size_t s) { return log_probs.data()[t * classes + static_cast<std::size_t>(lab[s])]; };
  auto can_skip = [&](std::size_t s) { return s >= 2 && lab[s] != blank && lab[s] != lab[s - 2]; };

  // alpha includes the emission at t; beta covers frames after t.
  std::vector<S> alpha(t_len * ext, ninf), beta(t_len * ext, ninf);
  alpha[0] = lp(0, 0);
  if (ext > 1) alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < t_len; ++t)
    for (std::size_t s = 0; s < ext; ++s) {
      S a = alpha[(t - 1) * ext + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * ext + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * ext + s - 2]);
      alpha[t * ext + s] = a == ninf ? ninf : a + lp(t, s);
    }
  beta[(t_len - 1) * ext + ext - 1] = 0;
  if (ext > 1) beta[(t_len - 1) * ext + ext - 2] = 0;
  for (std::size_t t = t_len - 1; t-- > 0;)
    for (std::size_t s = 0; s < ext; ++s) {
      S b = beta[(t + 1) * ext + s] + lp(t + 1, s);
      if (s + 1 < ext) b = log_add(b, beta[(t + 1) * ext + s + 1] + lp(t + 1, s + 1));
      if (s + 2 < ext && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * ext + s + 2] + lp(t + 1, s + 2));
      beta[t * ext + s] = b;
    }
  S log_total = alpha[(t_len - 1) * ext + ext - 1];
  if (ext > 1) log_total = log_add(log_total, alpha[(t_len - 1) * ext + ext - 2]);

  return detail::make_result<S>(
      "ctc_loss", {1}, {-log_total}, {&log_probs},
      [t_len, classes, ext, lab = std::move(lab), alpha = std::move(alpha), beta = std::move(beta), log_total](TensorNode<S>& o) {
        S* g = o.parents[0]->grad_buf();
        const S go = o.grad[0];
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t s = 0; s < ext; ++s) {
            const S v = alpha[t * ext + s] + beta[t * ext + s];
            if (v == -std::numeric_limits<S>::infinity()) continue;
            g[t * classes + static_cast<std::size_t>(lab[s])] -= go * std::exp(v - log_total);
          }
      });
}

// Per-frame argmax, merge repeats, drop blanks.
template <typename S>
std::vector<int> ctc_greedy_decode(const Tensor<S>& log_probs, int blank = -1) {
  const std::size_t t_len = log_probs.dim(0), classes = log_probs.dim(1);
  if (blank < 0) blank = static_cast<int>(classes) - 1;
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < t_len; ++t) {
    const S* row = log_probs.data().data() + t * classes;
    const int best = static_cast<int>(std::max_element(row, row + classes) - row);
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace ctxasr
