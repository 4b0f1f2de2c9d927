#pragma once

// Layers shared by the audio encoder and the decoder: linear projections with
// optional low-rank adapters, rotary multi-head attention with pluggable masks,
// Conformer blocks and stride-2 downsampling blocks.

#include "ctxasr/param_store.hpp"
#include "ctxasr/tensor.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

namespace ctxasr {

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

enum class Projection { q, k, v, o };

struct LoraConfig {
  int rank = 32;
  double dropout_rate = 0.05;
  double scaling = 0.05;
  std::vector<Projection> target_projections{Projection::q, Projection::k, Projection::v, Projection::o};

  bool targets(Projection p) const {
    return std::find(target_projections.begin(), target_projections.end(), p) != target_projections.end();
  }

  void validate() const {
    if (rank < 1) throw std::invalid_argument("lora: rank must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("lora: dropout_rate must be in [0,1)");
    if (!(scaling > 0.0)) throw std::invalid_argument("lora: scaling must be > 0");
    if (target_projections.empty()) throw std::invalid_argument("lora: target_projections is empty");
  }
};

// Adapter parameters for a projection set of L layers of width d:
// |targets| * L * 2 * d * r.
inline std::size_t lora_parameter_count(std::size_t layers, std::size_t width, std::size_t rank,
                                        std::size_t targets = 4) {
  return targets * layers * 2 * width * rank;
}

enum class MaskKind { causal, prefix_full };

struct MaskScheme {
  MaskKind kind = MaskKind::causal;
  std::size_t prefix_len = 0;
};

inline BoolMatrix build_mask(const MaskScheme& scheme, std::size_t seq_len) {
  if (seq_len < 1) throw std::invalid_argument("build_mask: seq_len must be >= 1");
  if (scheme.kind == MaskKind::prefix_full && scheme.prefix_len > seq_len)
    throw std::invalid_argument("build_mask: prefix_len " + std::to_string(scheme.prefix_len) +
                                " exceeds seq_len " + std::to_string(seq_len));
  BoolMatrix m{seq_len, seq_len, std::vector<std::uint8_t>(seq_len * seq_len, 0)};
  const std::size_t p = scheme.kind == MaskKind::prefix_full ? scheme.prefix_len : 0;
  for (std::size_t i = 0; i < seq_len; ++i)
    for (std::size_t j = 0; j < seq_len; ++j) m.bits[i * seq_len + j] = (j <= i) || (i < p && j < p);
  return m;
}

// Rows [start, start+n) of a mask, keeping all columns.
inline BoolMatrix mask_rows(const BoolMatrix& full, std::size_t start, std::size_t n) {
  BoolMatrix m{n, full.cols, {}};
  m.bits.assign(full.bits.begin() + static_cast<long>(start * full.cols),
                full.bits.begin() + static_cast<long>((start + n) * full.cols));
  return m;
}

struct AttentionConfig {
  std::size_t model_dim = 128;
  std::size_t num_heads = 4;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return model_dim / num_heads; }
  void validate() const {
    if (num_heads == 0 || model_dim % num_heads)
      throw std::invalid_argument("attention: model_dim " + std::to_string(model_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
  }
};

// ---------------------------------------------------------------------------
// Parameter registration

template <typename S>
void register_linear(ParamStore<S>& store, const std::string& name, std::size_t d_out, std::size_t d_in,
                     bool bias, bool trainable, Rng& rng, double stddev = -1.0) {
  if (stddev < 0) stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
  store.add(name + ".weight", Tensor<S>::randn({d_out, d_in}, rng, stddev), trainable);
  if (bias) store.add(name + ".bias", Tensor<S>::zeros({d_out}), trainable);
}

template <typename S>
void register_layernorm(ParamStore<S>& store, const std::string& name, std::size_t d, bool trainable) {
  store.add(name + ".gamma", Tensor<S>::from({d}, std::vector<S>(d, S(1))), trainable);
  store.add(name + ".beta", Tensor<S>::zeros({d}), trainable);
}

template <typename S>
void register_rmsnorm(ParamStore<S>& store, const std::string& name, std::size_t d, bool trainable) {
  store.add(name + ".gamma", Tensor<S>::from({d}, std::vector<S>(d, S(1))), trainable);
}

// A ~ N(0, 0.02^2), B = 0, so the adapted projection starts equal to the base.
template <typename S>
void register_lora(ParamStore<S>& store, const std::string& name, std::size_t d_out, std::size_t d_in,
                   const LoraConfig& cfg, Rng& rng) {
  const auto r = static_cast<std::size_t>(cfg.rank);
  store.add(name + ".lora_a", Tensor<S>::randn({r, d_in}, rng, 0.02), true);
  store.add(name + ".lora_b", Tensor<S>::zeros({d_out, r}), true);
}

// ---------------------------------------------------------------------------
// Bound layers (handles into a ParamStore)

template <typename S>
struct Linear {
  Tensor<S> weight;
  Tensor<S> bias;

  static Linear bind(const ParamStore<S>& s, const std::string& name) {
    Linear l{s.get(name + ".weight"), {}};
    if (s.contains(name + ".bias")) l.bias = s.get(name + ".bias");
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto y = matmul(x, weight, true);
    return bias.defined() ? add(y, bias) : y;
  }
};

template <typename S>
struct LayerNorm {
  Tensor<S> gamma, beta;
  static LayerNorm bind(const ParamStore<S>& s, const std::string& name) {
    return {s.get(name + ".gamma"), s.get(name + ".beta")};
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return layernorm(x, gamma, beta); }
};

template <typename S>
struct RmsNorm {
  Tensor<S> gamma;
  static RmsNorm bind(const ParamStore<S>& s, const std::string& name) { return {s.get(name + ".gamma")}; }
  Tensor<S> operator()(const Tensor<S>& x) const { return rmsnorm(x, gamma); }
};

// y = x W^T + s * B (A dropout(x)), written for row-major activations x[T, d_in].
template <typename S>
Tensor<S> lora_linear(const Tensor<S>& x, const Tensor<S>& w_base, const Tensor<S>& a, const Tensor<S>& b,
                      const LoraConfig& cfg, const ForwardContext& ctx, const Tensor<S>* bias = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(1))
    throw ShapeError("lora_linear", "adapter rank mismatch between A " + shape_str(a.shape()) + " and B " +
                                        shape_str(b.shape()));
  if (a.dim(1) != w_base.dim(1) || b.dim(0) != w_base.dim(0))
    throw ShapeError("lora_linear", "adapter " + shape_str(a.shape()) + "/" + shape_str(b.shape()) +
                                        " does not fit base " + shape_str(w_base.shape()));
  auto y = matmul(x, w_base, true);
  if (bias && bias->defined()) y = add(y, *bias);
  auto xin = dropout(x, cfg.dropout_rate, ctx.rng, ctx.training);
  auto delta = matmul(matmul(xin, a, true), b, true);
  return add(y, scale(delta, static_cast<S>(cfg.scaling)));
}

template <typename S>
struct LoraLinear {
  Linear<S> base;
  Tensor<S> lora_a, lora_b;
  std::optional<LoraConfig> cfg;

  static LoraLinear bind(const ParamStore<S>& s, const std::string& name, const LoraConfig* cfg) {
    LoraLinear l{Linear<S>::bind(s, name), {}, {}, std::nullopt};
    if (cfg && s.contains(name + ".lora_a")) {
      l.lora_a = s.get(name + ".lora_a");
      l.lora_b = s.get(name + ".lora_b");
      l.cfg = *cfg;
    }
    return l;
  }

  bool adapted() const { return cfg.has_value(); }

  Tensor<S> operator()(const Tensor<S>& x, const ForwardContext& ctx) const {
    if (!adapted()) return base(x);
    return lora_linear(x, base.weight, lora_a, lora_b, *cfg, ctx, &base.bias);
  }
};

// ---------------------------------------------------------------------------
// Attention

template <typename S>
struct AttentionWeights {
  LoraLinear<S> q, k, v, o;

  static AttentionWeights bind(const ParamStore<S>& s, const std::string& prefix, const LoraConfig* lora) {
    auto pick = [&](Projection p) { return lora && lora->targets(p) ? lora : nullptr; };
    return {LoraLinear<S>::bind(s, prefix + ".q", pick(Projection::q)),
            LoraLinear<S>::bind(s, prefix + ".k", pick(Projection::k)),
            LoraLinear<S>::bind(s, prefix + ".v", pick(Projection::v)),
            LoraLinear<S>::bind(s, prefix + ".o", pick(Projection::o))};
  }
};

template <typename S>
void register_attention(ParamStore<S>& store, const std::string& prefix, std::size_t d, bool bias,
                        bool trainable, Rng& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) register_linear(store, prefix + p, d, d, bias, trainable, rng);
}

// Keys and values already seen by an incremental decoder, post-rotation.
template <typename S>
struct AttentionCache {
  Tensor<S> keys;
  Tensor<S> values;
};

// Scaled dot-product attention over x[T, d]. Self-attention rotates queries
// and keys by `positions` and applies `mask` (null = full visibility). When
// kv_source[S, d] is given the layer is cross-attention: no rotation and no
// mask. With a cache, keys/values for x are appended to it and queries attend
// over everything cached so far.
template <typename S>
Tensor<S> mha_forward(const Tensor<S>& x, const AttentionWeights<S>& w, const AttentionConfig& cfg,
                      const BoolMatrix* mask, std::span<const std::size_t> positions,
                      const ForwardContext& ctx, const std::type_identity_t<Tensor<S>>* kv_source = nullptr,
                      std::type_identity_t<AttentionCache<S>>* cache = nullptr) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.model_dim)
    throw ShapeError("mha_forward", "input " + shape_str(x.shape()) + " vs model_dim " +
                                        std::to_string(cfg.model_dim));
  const std::size_t heads = cfg.num_heads, hd = cfg.head_dim();
  Tensor<S> q = w.q(x, ctx);
  Tensor<S> keys, values;
  if (kv_source) {
    if (mask) throw ShapeError("mha_forward", "cross-attention over kv_source is unmasked; got a mask");
    if (kv_source->rank() != 2 || kv_source->dim(1) != cfg.model_dim)
      throw ShapeError("mha_forward", "kv_source " + shape_str(kv_source->shape()) + " vs model_dim " +
                                          std::to_string(cfg.model_dim));
    if (cache && cache->keys.defined()) {
      keys = cache->keys;
      values = cache->values;
    } else {
      keys = w.k(*kv_source, ctx);
      values = w.v(*kv_source, ctx);
      if (cache) *cache = {keys, values};
    }
  } else {
    q = rope(q, positions, heads, cfg.rope_base);
    keys = rope(w.k(x, ctx), positions, heads, cfg.rope_base);
    values = w.v(x, ctx);
    if (cache) {
      if (cache->keys.defined()) {
        keys = concat<S>({cache->keys, keys}, 0);
        values = concat<S>({cache->values, values}, 0);
      }
      *cache = {keys, values};
    }
    if (mask && (mask->rows != x.dim(0) || mask->cols != keys.dim(0)))
      throw ShapeError("mha_forward", "mask [" + std::to_string(mask->rows) + "," + std::to_string(mask->cols) +
                                          "] vs attention [" + std::to_string(x.dim(0)) + "," +
                                          std::to_string(keys.dim(0)) + "]");
  }
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Tensor<S>> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice(q, 1, h * hd, hd);
    auto kh = heads == 1 ? keys : slice(keys, 1, h * hd, hd);
    auto vh = heads == 1 ? values : slice(values, 1, h * hd, hd);
    auto scores = scale(matmul(qh, kh, true), inv_sqrt);
    if (mask && !kv_source) scores = mask_fill(scores, *mask);
    per_head.push_back(matmul(softmax_lastdim(scores), vh));
  }
  auto merged = heads == 1 ? per_head[0] : concat(per_head, 1);
  return w.o(merged, ctx);
}

inline std::vector<std::size_t> iota_positions(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), start);
  return p;
}

// ---------------------------------------------------------------------------
// Conformer

template <typename S>
void register_conformer(ParamStore<S>& store, const std::string& prefix, std::size_t d, std::size_t ff,
                        std::size_t kernel, bool trainable, Rng& rng) {
  for (const char* f : {".ff1", ".ff2"}) {
    register_layernorm(store, prefix + f + ".norm", d, trainable);
    register_linear(store, prefix + f + ".in", ff, d, true, trainable, rng);
    register_linear(store, prefix + f + ".out", d, ff, true, trainable, rng);
  }
  register_layernorm(store, prefix + ".attn.norm", d, trainable);
  register_attention(store, prefix + ".attn", d, true, trainable, rng);
  register_layernorm(store, prefix + ".conv.norm", d, trainable);
  register_linear(store, prefix + ".conv.pw1", 2 * d, d, true, trainable, rng);
  store.add(prefix + ".conv.dw.weight",
            Tensor<S>::randn({d, kernel}, rng, 1.0 / std::sqrt(static_cast<double>(kernel))), trainable);
  store.add(prefix + ".conv.dw.bias", Tensor<S>::zeros({d}), trainable);
  register_layernorm(store, prefix + ".conv.norm2", d, trainable);
  register_linear(store, prefix + ".conv.pw2", d, d, true, trainable, rng);
  register_layernorm(store, prefix + ".final_norm", d, trainable);
}

template <typename S>
struct ConformerBlock {
  struct FeedForward {
    LayerNorm<S> norm;
    Linear<S> in, out;
    Tensor<S> operator()(const Tensor<S>& x) const { return out(silu(in(norm(x)))); }
  };

  FeedForward ff1, ff2;
  LayerNorm<S> attn_norm;
  AttentionWeights<S> attn;
  LayerNorm<S> conv_norm, conv_norm2, final_norm;
  Linear<S> pw1, pw2;
  Tensor<S> dw_weight, dw_bias;

  static ConformerBlock bind(const ParamStore<S>& s, const std::string& p) {
    auto ff = [&](const std::string& f) {
      return FeedForward{LayerNorm<S>::bind(s, p + f + ".norm"), Linear<S>::bind(s, p + f + ".in"),
                         Linear<S>::bind(s, p + f + ".out")};
    };
    return {ff(".ff1"),
            ff(".ff2"),
            LayerNorm<S>::bind(s, p + ".attn.norm"),
            AttentionWeights<S>::bind(s, p + ".attn", nullptr),
            LayerNorm<S>::bind(s, p + ".conv.norm"),
            LayerNorm<S>::bind(s, p + ".conv.norm2"),
            LayerNorm<S>::bind(s, p + ".final_norm"),
            Linear<S>::bind(s, p + ".conv.pw1"),
            Linear<S>::bind(s, p + ".conv.pw2"),
            s.get(p + ".conv.dw.weight"),
            s.get(p + ".conv.dw.bias")};
  }
};

// Half-step FF, rotary self-attention (full visibility), depthwise conv module,
// half-step FF, final layer norm; each sub-block wrapped in a residual.
template <typename S>
Tensor<S> conformer_block(const Tensor<S>& x, const ConformerBlock<S>& blk, const AttentionConfig& cfg,
                          const ForwardContext& ctx) {
  if (x.rank() != 2 || x.dim(1) != cfg.model_dim)
    throw ShapeError("conformer_block", "input " + shape_str(x.shape()) + " vs hidden_dim " +
                                            std::to_string(cfg.model_dim));
  if (blk.dw_weight.dim(1) % 2 == 0)
    throw ShapeError("conformer_block", "conv kernel must be odd, got " + std::to_string(blk.dw_weight.dim(1)));
  const S half = S(0.5);
  auto h = add(x, scale(blk.ff1(x), half));
  const auto pos = iota_positions(h.dim(0));
  h = add(h, mha_forward(blk.attn_norm(h), blk.attn, cfg, nullptr, pos, ctx));
  auto c = glu(blk.pw1(blk.conv_norm(h)));
  c = add(depthwise_conv1d(c, blk.dw_weight), blk.dw_bias);
  c = blk.pw2(silu(blk.conv_norm2(c)));
  h = add(h, c);
  h = add(h, scale(blk.ff2(h), half));
  return blk.final_norm(h);
}

// ---------------------------------------------------------------------------
// Downsampling: stride-2 convolution (kernel 3, pad 1) + SiLU, T -> ceil(T/2).

inline constexpr std::size_t kDownsampleKernel = 3;

inline std::size_t downsampled_length(std::size_t t) { return (t + 1) / 2; }

template <typename S>
void register_downsample(ParamStore<S>& store, const std::string& prefix, std::size_t d_out, std::size_t d_in,
                         bool trainable, Rng& rng) {
  register_linear(store, prefix + ".conv", d_out, kDownsampleKernel * d_in, true, trainable, rng);
}

template <typename S>
Tensor<S> downsample_block(const Tensor<S>& x, const Linear<S>& conv) {
  if (x.rank() != 2 || x.dim(1) * kDownsampleKernel != conv.weight.dim(1))
    throw ShapeError("downsample_block", "input " + shape_str(x.shape()) + " vs kernel " +
                                             shape_str(conv.weight.shape()));
  return silu(conv(im2col(x, kDownsampleKernel, 2, 1)));
}

}  // namespace ctxasr
