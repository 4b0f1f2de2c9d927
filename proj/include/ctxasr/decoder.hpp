#pragma once

// Decoder-only language model: token embeddings, pre-norm (RMS) layers with
// rotary self-attention and SwiGLU feed-forward, optional low-rank adapters on
// the attention projections, and an optional cross-attention sub-layer for the
// encoder-decoder variant.

#include "ctxasr/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace ctxasr {

enum class DecoderVariant { decoder_only, encoder_decoder };

struct DecoderConfig {
  std::size_t vocab_size = 67;
  std::size_t model_dim = 128;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 512;
  double rope_base = 10000.0;
  LoraConfig lora;
  DecoderVariant variant = DecoderVariant::decoder_only;

  AttentionConfig attention() const { return {model_dim, num_heads, rope_base}; }
  void validate() const {
    attention().validate();
    lora.validate();
    if (vocab_size < 4 || ff_dim == 0 || num_layers == 0) throw std::invalid_argument("decoder: invalid sizes");
  }
};

inline std::string layer_prefix(std::size_t i) { return "decoder.layer" + std::to_string(i); }

// Base (language model) weights. They are the ones frozen after pretraining.
template <typename S>
void register_decoder_base(ParamStore<S>& store, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  store.add("decoder.embed.weight", Tensor<S>::randn({cfg.vocab_size, d}, rng, 0.5), true);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto p = layer_prefix(i);
    register_rmsnorm(store, p + ".attn_norm", d, true);
    register_attention(store, p + ".attn", d, false, true, rng);
    register_rmsnorm(store, p + ".ff_norm", d, true);
    register_linear(store, p + ".ff.w1", cfg.ff_dim, d, false, true, rng);
    register_linear(store, p + ".ff.w3", cfg.ff_dim, d, false, true, rng);
    register_linear(store, p + ".ff.w2", d, cfg.ff_dim, false, true, rng);
  }
  register_rmsnorm(store, "decoder.final_norm", d, true);
  register_linear(store, "decoder.head", cfg.vocab_size, d, true, true, rng);
}

// Trainable additions on top of a frozen base: adapters on the configured
// attention projections and, for the encoder-decoder variant, a cross-attention
// sub-layer per layer whose output projection starts at zero.
template <typename S>
void register_decoder_adapters(ParamStore<S>& store, const DecoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.model_dim;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto p = layer_prefix(i);
    const std::pair<Projection, const char*> projs[] = {
        {Projection::q, ".attn.q"}, {Projection::k, ".attn.k"}, {Projection::v, ".attn.v"}, {Projection::o, ".attn.o"}};
    for (auto& [proj, name] : projs)
      if (cfg.lora.targets(proj)) register_lora(store, p + name, d, d, cfg.lora, rng);
    if (cfg.variant == DecoderVariant::encoder_decoder) {
      register_rmsnorm(store, p + ".xattn_norm", d, true);
      for (const char* name : {".xattn.q", ".xattn.k", ".xattn.v"}) register_linear(store, p + name, d, d, false, true, rng);
      store.add(p + ".xattn.o.weight", Tensor<S>::zeros({d, d}), true);
    }
  }
}

// Names of the base weights.
template <typename S>
std::vector<std::string> decoder_base_names(const ParamStore<S>& store) {
  std::vector<std::string> out;
  for (auto& [name, t] : store.entries())
    if (name.starts_with("decoder.") && name.find(".lora_") == std::string::npos &&
        name.find(".xattn") == std::string::npos)
      out.push_back(name);
  return out;
}

template <typename S>
struct DecoderState {
  std::vector<AttentionCache<S>> self;
  std::vector<AttentionCache<S>> cross;
  std::size_t length = 0;
};

template <typename S>
struct DecoderLayer {
  RmsNorm<S> attn_norm, ff_norm;
  AttentionWeights<S> attn;
  Linear<S> w1, w3, w2;
  std::optional<RmsNorm<S>> xattn_norm;
  std::optional<AttentionWeights<S>> xattn;
};

template <typename S>
struct Decoder {
  DecoderConfig cfg;
  Tensor<S> embed;
  std::vector<DecoderLayer<S>> layers;
  RmsNorm<S> final_norm;
  Linear<S> head;

  static Decoder bind(const ParamStore<S>& s, const DecoderConfig& cfg) {
    Decoder dec{cfg, s.get("decoder.embed.weight"), {}, RmsNorm<S>::bind(s, "decoder.final_norm"),
                Linear<S>::bind(s, "decoder.head")};
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      const auto p = layer_prefix(i);
      DecoderLayer<S> l{RmsNorm<S>::bind(s, p + ".attn_norm"),
                        RmsNorm<S>::bind(s, p + ".ff_norm"),
                        AttentionWeights<S>::bind(s, p + ".attn", nullptr),
                        Linear<S>::bind(s, p + ".ff.w1"),
                        Linear<S>::bind(s, p + ".ff.w3"),
                        Linear<S>::bind(s, p + ".ff.w2"),
                        std::nullopt,
                        std::nullopt};
      dec.layers.push_back(std::move(l));
    }
    return dec;
  }

  // Attaches adapters and cross-attention weights present in the store.
  void bind_adapters(const ParamStore<S>& s) {
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      const auto p = layer_prefix(i);
      layers[i].attn = AttentionWeights<S>::bind(s, p + ".attn", &cfg.lora);
      if (s.contains(p + ".xattn.q.weight")) {
        layers[i].xattn_norm = RmsNorm<S>::bind(s, p + ".xattn_norm");
        layers[i].xattn = AttentionWeights<S>::bind(s, p + ".xattn", nullptr);
      }
    }
  }

  Tensor<S> embed_tokens(std::span<const int> ids) const { return embedding_lookup(embed, ids); }

  // Hidden states for new rows x[n, d] appended after `state->length` earlier
  // positions (0 without a state). Rows are masked per `scheme` over the full
  // sequence seen so far.
  Tensor<S> hidden(const Tensor<S>& x, const MaskScheme& scheme, const Tensor<S>* encoder_out, const ForwardContext& ctx,
                   DecoderState<S>* state = nullptr) const {
    const bool cross = cfg.variant == DecoderVariant::encoder_decoder;
    if (cross && (!encoder_out || !encoder_out->defined()))
      throw std::invalid_argument("decoder_forward: encoder-decoder variant requires a non-empty encoder output");
    if (!cross && encoder_out) throw std::invalid_argument("decoder_forward: decoder-only variant takes no encoder output");
    if (x.rank() != 2 || x.dim(1) != cfg.model_dim)
      throw ShapeError("decoder_forward", "embeddings " + shape_str(x.shape()) + " vs model_dim " + std::to_string(cfg.model_dim));
    const std::size_t start = state ? state->length : 0;
    const std::size_t n = x.dim(0);
    const auto full = build_mask(scheme, start + n);
    const auto mask = start == 0 ? full : mask_rows(full, start, n);
    const auto pos = iota_positions(n, start);
    const auto att = cfg.attention();
    if (state && state->self.empty()) {
      state->self.resize(layers.size());
      state->cross.resize(layers.size());
    }
    auto h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      h = add(h, mha_forward(l.attn_norm(h), l.attn, att, &mask, pos, ctx, nullptr, state ? &state->self[i] : nullptr));
      if (cross) {
        if (!l.xattn) throw std::invalid_argument("decoder_forward: cross-attention weights are missing");
        h = add(h, mha_forward((*l.xattn_norm)(h), *l.xattn, att, nullptr, pos, ctx, encoder_out,
                               state ? &state->cross[i] : nullptr));
      }
      auto z = l.ff_norm(h);
      h = add(h, l.w2(mul(silu(l.w1(z)), l.w3(z))));
    }
    if (state) state->length += n;
    return h;
  }

  Tensor<S> logits(const Tensor<S>& hidden_states) const { return head(final_norm(hidden_states)); }

  Tensor<S> forward(const Tensor<S>& x, const MaskScheme& scheme, const Tensor<S>* encoder_out,
                    const ForwardContext& ctx = {}) const {
    return logits(hidden(x, scheme, encoder_out, ctx));
  }
};

template <typename S>
int argmax_row(const Tensor<S>& logits, std::size_t row) {
  const std::size_t v = logits.dim(1);
  const S* p = logits.data().data() + row * v;
  return static_cast<int>(std::max_element(p, p + v) - p);
}

// Greedy decoding with cached keys/values: feed the prompt once, then one
// argmax token at a time until eos or max_new_tokens.
template <typename S>
std::vector<int> greedy_generate(const Decoder<S>& dec, const Tensor<S>& prompt, std::size_t max_new_tokens,
                                 const MaskScheme& scheme, const std::type_identity_t<Tensor<S>>* encoder_out, int eos) {
  if (max_new_tokens < 1) throw std::invalid_argument("greedy_generate: max_new_tokens must be >= 1");
  NoGradGuard no_grad;
  DecoderState<S> state;
  const ForwardContext ctx{};
  auto h = dec.hidden(prompt, scheme, encoder_out, ctx, &state);
  auto last = dec.logits(slice(h, 0, h.dim(0) - 1, 1));
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    const int next = argmax_row(last, 0);
    if (next == eos) break;
    out.push_back(next);
    if (step + 1 == max_new_tokens) break;
    const int ids[] = {next};
    last = dec.logits(dec.hidden(dec.embed_tokens(ids), scheme, encoder_out, ctx, &state));
  }
  return out;
}

}  // namespace ctxasr
