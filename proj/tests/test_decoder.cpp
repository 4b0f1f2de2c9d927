#include "grad_check.hpp"

#include "ctxasr/decoder.hpp"
#include "ctxasr/trainer.hpp"

#include <gtest/gtest.h>

using namespace ctxasr;
using namespace ctxasr::testing;

namespace {

DecoderConfig tiny_decoder(DecoderVariant v = DecoderVariant::decoder_only) {
  DecoderConfig c;
  c.vocab_size = 11;
  c.model_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ff_dim = 16;
  c.lora.rank = 2;
  c.lora.dropout_rate = 0.0;
  c.variant = v;
  return c;
}

struct Model {
  DecoderConfig cfg;
  ParamStore<double> store;
  Decoder<double> dec;

  explicit Model(DecoderConfig c, std::uint64_t seed = 1, bool adapters = false) : cfg(std::move(c)) {
    Rng rng(seed);
    register_decoder_base(store, cfg, rng);
    if (adapters) register_decoder_adapters(store, cfg, rng);
    dec = Decoder<double>::bind(store, cfg);
    if (adapters) dec.bind_adapters(store);
  }
};

void expect_rows_equal(const T& a, const T& b, std::size_t rows, double tol) {
  const std::size_t w = a.dim(1);
  for (std::size_t i = 0; i < rows * w; ++i) ASSERT_NEAR(a[i], b[i], tol) << "element " << i;
}

double rows_diff(const T& a, const T& b, std::size_t r0, std::size_t r1) {
  const std::size_t w = a.dim(1);
  double d = 0;
  for (std::size_t i = r0 * w; i < r1 * w; ++i) d += std::abs(a[i] - b[i]);
  return d;
}

}  // namespace

class Leakage : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Leakage, CausalHidesFuture) {
  const std::size_t n = GetParam();
  Model m(tiny_decoder(), 2 + n);
  auto x = rand_tensor({n, 8}, 3 + n);
  const MaskScheme causal{MaskKind::causal, 0};
  auto y = m.dec.forward(x, causal, nullptr);
  const std::size_t cut = n / 2;
  auto x2 = x.detach_copy();
  for (std::size_t i = cut * 8; i < n * 8; ++i) x2.mutable_data()[i] += 5.0;
  auto y2 = m.dec.forward(x2, causal, nullptr);
  expect_rows_equal(y, y2, cut, 1e-6);
  EXPECT_GT(rows_diff(y, y2, cut, n), 1e-6);
}

TEST_P(Leakage, PrefixIsInterVisibleAndSuffixCausal) {
  const std::size_t n = GetParam();
  const std::size_t p = n / 2;
  Model m(tiny_decoder(), 4 + n);
  auto x = rand_tensor({n, 8}, 5 + n);
  const MaskScheme prefix{MaskKind::prefix_full, p};
  auto y = m.dec.forward(x, prefix, nullptr);
  // Last prefix row changes row 0.
  auto x2 = x.detach_copy();
  for (std::size_t i = (p - 1) * 8; i < p * 8; ++i) x2.mutable_data()[i] += 5.0;
  auto y2 = m.dec.forward(x2, prefix, nullptr);
  if (p > 1) EXPECT_GT(rows_diff(y, y2, 0, 1), 1e-6);
  // Rows after p+1 leave rows [0, p+1] alone.
  auto x3 = x.detach_copy();
  for (std::size_t i = (p + 1) * 8; i < n * 8; ++i) x3.mutable_data()[i] -= 5.0;
  auto y3 = m.dec.forward(x3, prefix, nullptr);
  expect_rows_equal(y, y3, p + 1, 1e-6);
}

TEST_P(Leakage, PrefixZeroEqualsCausal) {
  const std::size_t n = GetParam();
  Model m(tiny_decoder(), 6 + n);
  auto x = rand_tensor({n, 8}, 7 + n);
  auto a = m.dec.forward(x, {MaskKind::causal, 0}, nullptr);
  auto b = m.dec.forward(x, {MaskKind::prefix_full, 0}, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

INSTANTIATE_TEST_SUITE_P(SeqLens, Leakage, ::testing::Values(4, 17, 64));

TEST(Decoder, VariantArgumentMismatch) {
  Model only(tiny_decoder());
  Model ed(tiny_decoder(DecoderVariant::encoder_decoder), 1, true);
  auto x = rand_tensor({3, 8}, 1), enc = rand_tensor({2, 8}, 2);
  EXPECT_THROW(only.dec.forward(x, {}, &enc), std::invalid_argument);
  EXPECT_THROW(ed.dec.forward(x, {}, nullptr), std::invalid_argument);
  EXPECT_NO_THROW(ed.dec.forward(x, {}, &enc));
  EXPECT_THROW(only.dec.forward(rand_tensor({3, 6}, 1), {}, nullptr), ShapeError);
}

TEST(Decoder, ZeroInitAdaptersAreBitwiseNoOps) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder}) {
    Model base(tiny_decoder(), 9);
    Model adapted(tiny_decoder(v), 9, true);
    auto x = rand_tensor({6, 8}, 10), enc = rand_tensor({3, 8}, 11);
    auto a = base.dec.forward(x, {}, nullptr);
    auto b = adapted.dec.forward(x, {}, v == DecoderVariant::encoder_decoder ? &enc : nullptr);
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
  }
}

TEST(Decoder, AdapterCountMatchesFormula) {
  Model m(tiny_decoder(), 1, true);
  std::size_t n = 0;
  for (auto& [name, t] : m.store.entries())
    if (name.find(".lora_") != std::string::npos) n += t.numel();
  EXPECT_EQ(n, lora_parameter_count(2, 8, 2));
  EXPECT_EQ(decoder_base_names(m.store).size(), 1 + 2 * 9 + 1 + 2);
}

TEST(Decoder, ForwardIsDeterministic) {
  Model a(tiny_decoder(), 12), b(tiny_decoder(), 12);
  auto x = rand_tensor({5, 8}, 13);
  auto ya = a.dec.forward(x, {}, nullptr), yb = b.dec.forward(x, {}, nullptr);
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

namespace {

// Greedy decoding recomputing the full sequence at every step.
std::vector<int> naive_generate(const Decoder<double>& dec, const T& prompt, std::size_t max_new, MaskScheme scheme,
                                const T* enc, int eos) {
  NoGradGuard g;
  std::vector<int> out;
  auto seq = prompt;
  for (std::size_t s = 0; s < max_new; ++s) {
    auto logits = dec.forward(seq, scheme, enc);
    const int next = argmax_row(logits, logits.dim(0) - 1);
    if (next == eos) break;
    out.push_back(next);
    const int ids[] = {next};
    seq = concat<double>({seq, dec.embed_tokens(ids)}, 0);
  }
  return out;
}

}  // namespace

TEST(Generate, CachedMatchesNaive) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder}) {
    for (auto kind : {MaskKind::causal, MaskKind::prefix_full}) {
      Model m(tiny_decoder(v), 14, true);
      // Make the cross-attention live so the test covers it.
      if (v == DecoderVariant::encoder_decoder) {
        Rng rng(1);
        for (std::size_t l = 0; l < 2; ++l) {
          auto w = m.store.get(layer_prefix(l) + ".xattn.o.weight").mutable_data();
          std::normal_distribution<double> nd(0, 0.3);
          for (auto& e : w) e = nd(rng);
        }
      }
      auto prompt = rand_tensor({5, 8}, 15), enc = rand_tensor({3, 8}, 16);
      const T* e = v == DecoderVariant::encoder_decoder ? &enc : nullptr;
      const MaskScheme scheme{kind, 3};
      auto fast = greedy_generate(m.dec, prompt, 12, scheme, e, 2);
      auto slow = naive_generate(m.dec, prompt, 12, scheme, e, 2);
      EXPECT_EQ(fast, slow);
    }
  }
}

TEST(Generate, StopsImmediatelyWhenEosDominates) {
  Model m(tiny_decoder(), 17);
  auto bias = m.store.get("decoder.head.bias").mutable_data();
  bias[2] = 1e6;
  auto prompt = rand_tensor({3, 8}, 18);
  EXPECT_TRUE(greedy_generate(m.dec, prompt, 10, {}, nullptr, 2).empty());
  EXPECT_THROW(greedy_generate(m.dec, prompt, 0, {}, nullptr, 2), std::invalid_argument);
}

TEST(Generate, RespectsMaxNewTokens) {
  Model m(tiny_decoder(), 19);
  auto bias = m.store.get("decoder.head.bias").mutable_data();
  bias[5] = 1e6;
  auto prompt = rand_tensor({2, 8}, 20);
  EXPECT_EQ(greedy_generate(m.dec, prompt, 7, {}, nullptr, 2), std::vector<int>(7, 5));
}

TEST(Decoder, GradientsWithAdaptersAndCrossAttention) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder}) {
    auto cfg = tiny_decoder(v);
    Model m(cfg, 21, true);
    // Non-zero B so adapter gradients flow to A as well.
    for (auto& name : m.store.names())
      if (name.ends_with(".lora_b") || name.ends_with(".xattn.o.weight")) {
        Rng rng(std::hash<std::string>{}(name));
        std::normal_distribution<double> nd(0, 0.3);
        for (auto& e : m.store.get(name).mutable_data()) e = nd(rng);
      }
    auto x = rand_tensor({5, 8}, 22), enc = rand_tensor({3, 8}, 23);
    const T* e = v == DecoderVariant::encoder_decoder ? &enc : nullptr;
    std::vector<T*> probe{&x};
    std::vector<T> held;
    for (auto& name : m.store.names())
      if (name.find("layer1") != std::string::npos) held.push_back(m.store.get(name));
    held.push_back(m.store.get("decoder.head.weight"));
    if (e) held.push_back(enc);
    for (auto& t : held) probe.push_back(&t);
    const std::vector<int> targets{1, 4, 7, 2, 9};
    auto loss = [&] { return cross_entropy(m.dec.forward(x, {MaskKind::prefix_full, 2}, e), targets); };
    auto r = check_gradients(loss, probe, 1e-5, 80);
    EXPECT_LT(r.max_rel, 1e-4) << "variant " << static_cast<int>(v);
    EXPECT_GE(r.probes, 20u);
  }
}

TEST(Decoder, LearnsABigramTable) {
  // Next token is (t * 3 + 1) mod V; after training, greedy decoding follows it.
  auto cfg = tiny_decoder();
  cfg.model_dim = 16;
  cfg.ff_dim = 32;
  Model m(cfg, 30);
  Adam<double> opt;
  std::vector<int> seq{3};
  for (int i = 0; i < 20; ++i) seq.push_back((seq.back() * 3 + 1) % 11);
  std::vector<int> in(seq.begin(), seq.end() - 1), tgt(seq.begin() + 1, seq.end());
  for (int step = 0; step < 200; ++step) {
    m.store.zero_grad();
    auto loss = cross_entropy(m.dec.forward(m.dec.embed_tokens(in), {}, nullptr), tgt);
    backward(loss);
    opt.step(m.store, 3e-3);
  }
  const int start[] = {3};
  auto out = greedy_generate(m.dec, m.dec.embed_tokens(start), 6, {}, nullptr, -1);
  EXPECT_EQ(out, std::vector<int>(seq.begin() + 1, seq.begin() + 7));
}
