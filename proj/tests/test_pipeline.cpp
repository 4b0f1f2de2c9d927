#include "grad_check.hpp"

#include "ctxasr/pipeline.hpp"
#include "ctxasr/trainer.hpp"

#include <gtest/gtest.h>

using namespace ctxasr;
using namespace ctxasr::testing;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.feat_dim = 4;
  c.hidden_dim = 8;
  c.num_conformer_blocks = 1;
  c.conv_kernel = 3;
  c.decoder_dim = 8;
  c.num_heads = 2;
  c.ff_mult = 2;
  return c;
}

DecoderConfig tiny_decoder(DecoderVariant v = DecoderVariant::decoder_only) {
  DecoderConfig c;
  c.vocab_size = static_cast<std::size_t>(CharTokenizer{}.vocab_size());
  c.model_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ff_dim = 16;
  c.lora.rank = 2;
  c.lora.dropout_rate = 0.0;
  c.variant = v;
  return c;
}

ModelBundle<double> tiny_bundle(DecoderVariant v = DecoderVariant::decoder_only, std::uint64_t seed = 1,
                                bool live_adapters = false) {
  ModelBundle<double> b;
  b.encoder_cfg = tiny_encoder();
  b.decoder_cfg = tiny_decoder(v);
  Rng rng(seed);
  register_encoder(b.params, b.encoder_cfg, rng);
  register_decoder_base(b.params, b.decoder_cfg, rng);
  register_decoder_adapters(b.params, b.decoder_cfg, rng);
  if (live_adapters)
    for (auto& name : b.params.names())
      if (name.ends_with(".lora_b") || name.ends_with(".xattn.o.weight")) {
        std::normal_distribution<double> nd(0, 0.3);
        for (auto& e : b.params.get(name).mutable_data()) e = nd(rng);
      }
  return b;
}

std::vector<int> ids(const std::string& s) { return CharTokenizer{}.tokenize(s); }

}  // namespace

// ---------------------------------------------------------------------------
// Context crop

TEST(Crop, ShortContextIsUntouched) {
  std::vector<int> t{4, 5, 6};
  EXPECT_EQ(crop_context(t, 50, PromptMode::infer), t);
  Rng rng(1);
  EXPECT_EQ(crop_context(t, 3, PromptMode::train, &rng), t);
}

TEST(Crop, InferKeepsTrailingTokens) {
  std::vector<int> t(80);
  std::iota(t.begin(), t.end(), 0);
  auto c = crop_context(t, 50, PromptMode::infer);
  ASSERT_EQ(c.size(), 50u);
  EXPECT_EQ(c.front(), 30);
  EXPECT_EQ(c.back(), 79);
}

TEST(Crop, TrainWindowIsContiguousAndUniform) {
  std::vector<int> t(60);
  std::iota(t.begin(), t.end(), 0);
  Rng rng(7);
  const std::size_t starts = 11, draws = 11000;
  std::vector<double> hist(starts, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    auto c = crop_context(t, 50, PromptMode::train, &rng);
    ASSERT_EQ(c.size(), 50u);
    for (std::size_t k = 1; k < c.size(); ++k) ASSERT_EQ(c[k], c[k - 1] + 1);
    hist[static_cast<std::size_t>(c.front())] += 1;
  }
  const double expect = static_cast<double>(draws) / starts;
  double chi2 = 0;
  for (double h : hist) chi2 += (h - expect) * (h - expect) / expect;
  EXPECT_LT(chi2, 29.59);  // 10 dof, p = 0.001
}

TEST(Crop, Errors) {
  std::vector<int> t(10, 4);
  EXPECT_THROW(crop_context(t, 0, PromptMode::infer), std::invalid_argument);
  EXPECT_THROW(crop_context(t, 5, PromptMode::train, nullptr), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Prompt assembly

TEST(Assemble, DecoderOnlyLayout) {
  auto b = tiny_bundle();
  auto dec = b.decoder();
  auto audio = rand_tensor({3, 8}, 2);
  const auto ctx = ids("foo bar"), tr = ids("hi");
  auto p = assemble_prompt(dec, &ctx, audio, tr, PromptMode::train);
  ASSERT_EQ(p.size(), 7u + 1 + 3 + 2 + 1);
  EXPECT_EQ(p.count(Source::context), 7u);
  EXPECT_EQ(p.count(Source::audio), 3u);
  EXPECT_EQ(p.prefix_len, 7u + 1 + 3);
  EXPECT_EQ(p.sources[7], Source::bos);
  EXPECT_EQ(p.labels[7], CharTokenizer::kBos);
  for (std::size_t i = 8; i < 11; ++i) EXPECT_EQ(p.labels[i], -1);
  EXPECT_EQ(p.labels.back(), CharTokenizer::kEos);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p.loss_mask[i], i >= 11);
  EXPECT_EQ(p.embeddings.dim(0), p.size());
  for (std::size_t k = 0; k < 3 * 8; ++k) EXPECT_EQ(p.embeddings[8 * 8 + k], audio[k]);
  EXPECT_FALSE(p.cross_source.defined());
}

TEST(Assemble, NoContextStartsWithBos) {
  auto b = tiny_bundle();
  auto dec = b.decoder();
  auto audio = rand_tensor({2, 8}, 3);
  auto p = assemble_prompt(dec, nullptr, audio, {}, PromptMode::infer);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p.sources[0], Source::bos);
  EXPECT_EQ(p.prefix_len, 3u);
  EXPECT_EQ(std::count(p.loss_mask.begin(), p.loss_mask.end(), true), 0);
}

TEST(Assemble, EncoderDecoderKeepsAudioOutOfSequence) {
  auto b = tiny_bundle(DecoderVariant::encoder_decoder);
  auto dec = b.decoder();
  auto audio = rand_tensor({4, 8}, 4);
  const auto ctx = ids("ab"), tr = ids("c");
  auto p = assemble_prompt(dec, &ctx, audio, tr, PromptMode::train);
  EXPECT_EQ(p.count(Source::audio), 0u);
  EXPECT_EQ(p.size(), 2u + 1 + 1 + 1);
  EXPECT_EQ(p.prefix_len, 3u);
  ASSERT_TRUE(p.cross_source.defined());
  EXPECT_EQ(p.cross_source.dim(0), 4u);
}

TEST(Assemble, InferCropsContextToTrailingTokens) {
  auto b = tiny_bundle();
  auto dec = b.decoder();
  auto audio = rand_tensor({1, 8}, 5);
  std::vector<int> ctx(70);
  for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] = 3 + static_cast<int>(i % 60);
  auto p = assemble_prompt(dec, &ctx, audio, {}, PromptMode::infer, nullptr, 50);
  EXPECT_EQ(p.count(Source::context), 50u);
  EXPECT_EQ(p.labels[0], ctx[20]);
}

TEST(Assemble, Errors) {
  auto b = tiny_bundle();
  auto dec = b.decoder();
  auto audio = rand_tensor({2, 8}, 6);
  const auto tr = ids("x");
  EXPECT_THROW(assemble_prompt(dec, nullptr, T{}, tr, PromptMode::train), std::invalid_argument);
  EXPECT_THROW(assemble_prompt(dec, nullptr, audio, tr, PromptMode::infer), std::invalid_argument);
  EXPECT_THROW(assemble_prompt(dec, nullptr, audio, {}, PromptMode::train), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Loss

TEST(SequenceLoss, IgnoresLabelsOutsideTheTranscript) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder})
    for (auto mk : {MaskKind::causal, MaskKind::prefix_full}) {
      auto b = tiny_bundle(v, 8, true);
      auto dec = b.decoder();
      auto audio = rand_tensor({3, 8}, 9);
      const auto ctx = ids("some context"), tr = ids("a cat");
      auto p = assemble_prompt(dec, &ctx, audio, tr, PromptMode::train);
      const double base = sequence_loss(dec, p, mk).item();
      auto q = p;
      for (std::size_t i = 0; i < q.size(); ++i)
        if (!q.loss_mask[i]) q.labels[i] = (q.labels[i] + 17) % 60 + 3;
      EXPECT_EQ(sequence_loss(dec, q, mk).item(), base);
      auto r = p;
      r.labels[r.size() - 2] = r.labels[r.size() - 2] == 5 ? 6 : 5;
      EXPECT_NE(sequence_loss(dec, r, mk).item(), base);
    }
}

TEST(SequenceLoss, ZeroHeadGivesUniformCrossEntropy) {
  auto b = tiny_bundle();
  for (auto* n : {"decoder.head.weight", "decoder.head.bias"})
    for (auto& e : b.params.get(n).mutable_data()) e = 0;
  auto dec = b.decoder();
  auto audio = rand_tensor({2, 8}, 10);
  const auto tr = ids("hello there");
  auto p = assemble_prompt(dec, nullptr, audio, tr, PromptMode::train);
  EXPECT_NEAR(sequence_loss(dec, p, MaskKind::causal).item(), std::log(67.0), 1e-12);
}

TEST(SequenceLoss, RequiresTargets) {
  auto b = tiny_bundle();
  auto dec = b.decoder();
  auto p = assemble_prompt(dec, nullptr, rand_tensor({2, 8}, 11), {}, PromptMode::infer);
  EXPECT_THROW(sequence_loss(dec, p, MaskKind::causal), std::invalid_argument);
}

TEST(SequenceLoss, GradientsMatchFiniteDifferences) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder})
    for (auto mk : {MaskKind::causal, MaskKind::prefix_full}) {
      auto b = tiny_bundle(v, 12, true);
      b.freeze_decoder_base();
      auto enc = b.encoder();
      auto dec = b.decoder();
      auto feats = rand_tensor({40, 4}, 13);
      const auto ctx = ids("ctx"), tr = ids("ab c");
      auto loss = [&] {
        auto audio = enc.encode(feats, {});
        auto p = assemble_prompt(dec, &ctx, audio, tr, PromptMode::train);
        return sequence_loss(dec, p, mk);
      };
      std::vector<T> held;
      for (auto& n : b.params.trainable_names())
        if (n.find("layer1") != std::string::npos || n.starts_with("encoder.proj") || n.starts_with("encoder.post0"))
          held.push_back(b.params.get(n));
      std::vector<T*> probe{&feats};
      for (auto& t : held) probe.push_back(&t);
      auto r = check_gradients(loss, probe, 1e-5, 80);
      EXPECT_LT(r.max_rel, 1e-4);
      EXPECT_GE(r.probes, 20u);
    }
}

TEST(SequenceLoss, FrozenBaseReceivesNoGradient) {
  auto b = tiny_bundle(DecoderVariant::decoder_only, 14, true);
  b.freeze_decoder_base();
  auto enc = b.encoder();
  auto dec = b.decoder();
  const auto tr = ids("xy");
  auto p = assemble_prompt(dec, nullptr, enc.encode(rand_tensor({20, 4}, 15), {}), tr, PromptMode::train);
  backward(sequence_loss(dec, p, MaskKind::causal));
  for (auto& n : b.decoder_base()) EXPECT_FALSE(b.params.get(n).has_grad()) << n;
  EXPECT_TRUE(b.params.get("encoder.proj.weight").has_grad());
  EXPECT_TRUE(b.params.get("decoder.layer0.attn.q.lora_b").has_grad());
}

TEST(Transcribe, OverfitsOneUtterance) {
  for (auto v : {DecoderVariant::decoder_only, DecoderVariant::encoder_decoder}) {
    auto b = tiny_bundle(v, 16);
    auto model = bind_model(b);
    AudioFeatures f{40, 4, {}};
    Rng rng(17);
    std::normal_distribution<float> nd(0, 1);
    for (std::size_t i = 0; i < 160; ++i) f.values.push_back(nd(rng));
    const std::string text = "ab ba";
    const auto tr = ids(text), ctx = ids("ctx");
    Adam<double> opt;
    for (int step = 0; step < 200; ++step) {
      b.params.zero_grad();
      auto audio = model.encoder.encode(features_tensor<double>(f), {});
      auto p = assemble_prompt(model.decoder, &ctx, audio, tr, PromptMode::train);
      backward(sequence_loss(model.decoder, p, MaskKind::causal));
      opt.step(b.params, 1e-2);
    }
    EXPECT_EQ(transcribe(model, f, std::string("ctx"), MaskKind::causal), text);
    // An empty context behaves like no context at all.
    EXPECT_EQ(transcribe(model, f, std::string(""), MaskKind::causal), transcribe(model, f, std::nullopt, MaskKind::causal));
  }
}
