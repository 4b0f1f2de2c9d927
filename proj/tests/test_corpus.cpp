#include "ctxasr/corpus.hpp"
#include "ctxasr/metrics.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ctxasr;
namespace fs = std::filesystem;

namespace {

CorpusConfig small_config() {
  CorpusConfig c;
  c.n_train = 400;
  c.n_eval = 60;
  return c;
}

const Corpus& small_corpus() {
  static const Corpus c = generate_corpus(small_config(), 99);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Tokenizer, RoundTripAndFiltering) {
  const CharTokenizer tok;
  EXPECT_EQ(tok.vocab_size(), 67);
  const std::string s = "Hello world it's 42";
  EXPECT_EQ(tok.detokenize(tok.tokenize(s)), s);
  EXPECT_EQ(tok.detokenize(tok.tokenize("caf\xc3\xa9")), "caf");
  EXPECT_TRUE(tok.tokenize("").empty());
  const int specials[] = {CharTokenizer::kBos, CharTokenizer::kEos, CharTokenizer::kPad};
  EXPECT_EQ(tok.detokenize(specials), "");
}

TEST(Seeds, DeriveSeedSeparatesStreams) {
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
}

TEST(Lexicon, Invariants) {
  auto lx = build_lexicon(5, 400, 0.5);
  EXPECT_EQ(lx.words.size(), 400u);
  EXPECT_GE(lx.homophone_pairs.size(), 20u);
  std::set<std::string> uniq(lx.words.begin(), lx.words.end());
  EXPECT_EQ(uniq.size(), lx.words.size());
  for (auto& p : lx.homophone_pairs) {
    EXPECT_NE(p.a, p.b);
    EXPECT_TRUE(lx.is_rare(p.a));
    EXPECT_TRUE(lx.is_rare(p.b));
    EXPECT_EQ(lx.spelling_of_sound(p.a), lx.spelling_of_sound(p.b));
  }
  for (auto& w : lx.words) {
    EXPECT_NE(lx.respell(w), w);
    for (char c : lx.respell(w)) EXPECT_TRUE(c >= 'a' && c <= 'z') << lx.respell(w);
  }
  // Zipf weights
  for (std::size_t k = 1; k < lx.weights.size(); ++k)
    EXPECT_NEAR(lx.weights[k] / lx.weights[0], std::pow(static_cast<double>(k + 1), -1.2), 1e-12);
  // Rare words are the low-frequency tail.
  bool seen_rare = false;
  for (bool r : lx.rare) {
    if (seen_rare) EXPECT_TRUE(r);
    seen_rare = seen_rare || r;
  }
}

TEST(Lexicon, DeterministicAndJsonRoundTrip) {
  auto a = build_lexicon(7, 200, 0.5), b = build_lexicon(7, 200, 0.5);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_NE(a.to_json().dump(), build_lexicon(8, 200, 0.5).to_json().dump());
  auto c = Lexicon::from_json(a.to_json());
  EXPECT_EQ(c.to_json().dump(), a.to_json().dump());
}

TEST(Lexicon, Errors) {
  EXPECT_THROW(build_lexicon(1, 99, 0.5), std::invalid_argument);
  EXPECT_THROW(build_lexicon(1, 400, 0.0), std::invalid_argument);
  EXPECT_THROW(build_lexicon(1, 400, 1.0), std::invalid_argument);
}

TEST(Features, HomophonesShareAudio) {
  auto lx = build_lexicon(3, 400, 0.5);
  for (auto& p : lx.homophone_pairs) {
    EXPECT_EQ(features_for(p.a, lx, 11), features_for(p.b, lx, 11));
    EXPECT_EQ(features_for(lx.words[0] + " " + p.a, lx, 12), features_for(lx.words[0] + " " + p.b, lx, 12));
  }
}

TEST(Features, FrameCountBounds) {
  auto lx = build_lexicon(3, 400, 0.5);
  const std::string t = lx.words[0] + " " + lx.words[5] + " " + lx.words[300];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto f = features_for(t, lx, seed);
    std::size_t chars = 0;
    for (auto& w : split_words(t)) chars += lx.spelling_of_sound(w).size();
    chars += 2;  // spaces
    EXPECT_GE(f.frames, 2 * chars);
    EXPECT_LE(f.frames, 4 * chars);
    EXPECT_EQ(f.values.size(), f.frames * 16);
  }
}

TEST(Features, Errors) {
  auto lx = build_lexicon(3, 400, 0.5);
  EXPECT_THROW(features_for("", lx, 1), std::invalid_argument);
  EXPECT_THROW(features_for("qqqqzzzz", lx, 1), std::invalid_argument);
}

TEST(Corpus, ContextFractionAndEvalSelection) {
  const auto& c = small_corpus();
  std::size_t with = 0;
  for (auto& s : c.train) with += s.context.has_value();
  const double frac = static_cast<double>(with) / static_cast<double>(c.train.size());
  EXPECT_NEAR(frac, 0.25, 0.02);
  std::set<std::string> train_set;
  for (auto& s : c.train) train_set.insert(s.transcript);
  std::size_t homophone_samples = 0;
  for (auto& s : c.eval) {
    ASSERT_TRUE(s.context.has_value());
    const auto ctx = split_words(*s.context);
    bool shared = false;
    for (auto& r : s.rare_words) shared = shared || std::find(ctx.begin(), ctx.end(), r) != ctx.end();
    EXPECT_TRUE(shared) << s.id;
    EXPECT_FALSE(train_set.count(s.transcript)) << s.id;
    bool h = false;
    for (auto& w : split_words(s.transcript)) h = h || c.lexicon.is_homophone(w);
    homophone_samples += h;
  }
  EXPECT_GT(homophone_samples, 0u);
}

TEST(Corpus, TranscriptsAndContexts) {
  const auto& c = small_corpus();
  for (auto& s : c.train) {
    const auto words = split_words(s.transcript);
    EXPECT_GE(words.size(), 5u);
    EXPECT_LE(words.size(), 12u);
    EXPECT_EQ(s.transcript_tokens, CharTokenizer{}.tokenize(s.transcript));
    if (s.context) {
      const auto ctx = split_words(*s.context);
      for (auto& r : s.rare_words) EXPECT_NE(std::find(ctx.begin(), ctx.end(), r), ctx.end());
      EXPECT_GE(ctx.size(), 1u);
    }
  }
}

TEST(Corpus, HomophonesAreRareUnderTokenMassRule) {
  const auto& c = small_corpus();
  std::vector<std::string> tr;
  for (auto& s : c.train) tr.push_back(s.transcript);
  auto rare = rare_word_set(tr);
  std::set<std::string> seen;
  for (auto& t : tr)
    for (auto& w : split_words(t)) seen.insert(w);
  for (auto& p : c.lexicon.homophone_pairs) {
    if (seen.count(p.a)) EXPECT_TRUE(rare.count(p.a)) << p.a;
    if (seen.count(p.b)) EXPECT_TRUE(rare.count(p.b)) << p.b;
  }
}

TEST(Corpus, FilesAreByteIdenticalAcrossRuns) {
  const auto dir = fs::temp_directory_path() / "ctxasr_test_corpus";
  fs::remove_all(dir);
  auto cfg = small_config();
  cfg.n_train = 50;
  cfg.n_eval = 10;
  write_corpus(dir / "a", generate_corpus(cfg, 4));
  write_corpus(dir / "b", generate_corpus(cfg, 4));
  for (auto* f : {"train.jsonl", "eval.jsonl", "lexicon.json"}) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  auto back = read_corpus(dir / "a");
  auto orig = generate_corpus(cfg, 4);
  ASSERT_EQ(back.train.size(), orig.train.size());
  for (std::size_t i = 0; i < orig.train.size(); ++i) {
    EXPECT_EQ(back.train[i].feats, orig.train[i].feats);
    EXPECT_EQ(back.train[i].context, orig.train[i].context);
    EXPECT_EQ(back.train[i].transcript, orig.train[i].transcript);
  }
  fs::remove_all(dir);
}

TEST(Corpus, Errors) {
  auto cfg = small_config();
  cfg.n_train = 0;
  EXPECT_THROW(generate_corpus(cfg, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {
AudioFeatures ramp(std::size_t frames, std::size_t d) {
  AudioFeatures f{frames, d, {}};
  for (std::size_t i = 0; i < frames * d; ++i) f.values.push_back(static_cast<float>(i % 13) + 1.0f);
  return f;
}
}  // namespace

TEST(Augment, IdentityConfigIsIdentity) {
  Rng rng(1);
  auto f = ramp(50, 16);
  EXPECT_EQ(augment(f, AugmentConfig::identity(), rng), f);
}

TEST(Augment, SpeedChangesLength) {
  auto f = ramp(100, 4);
  for (double s : {0.9, 1.1}) {
    AugmentConfig c = AugmentConfig::identity();
    c.speed_factors = {s};
    Rng rng(2);
    EXPECT_EQ(augment(f, c, rng).frames, static_cast<std::size_t>(std::llround(100 / s)));
  }
}

TEST(Augment, MaskedBandsAreExactlyZero) {
  auto f = ramp(200, 16);
  AugmentConfig c = AugmentConfig::identity();
  c.freq_masks = 2;
  c.freq_mask_width = 5;
  Rng rng(3);
  auto g = augment(f, c, rng);
  std::size_t zero_cols = 0;
  for (std::size_t d = 0; d < 16; ++d) {
    bool all_zero = true, any_zero = false;
    for (std::size_t t = 0; t < g.frames; ++t) {
      all_zero = all_zero && g.at(t, d) == 0.0f;
      any_zero = any_zero || g.at(t, d) == 0.0f;
    }
    EXPECT_EQ(all_zero, any_zero);
    zero_cols += all_zero;
  }
  EXPECT_LE(zero_cols, 10u);
  c = AugmentConfig::identity();
  c.time_masks = 10;
  c.time_mask_max_frac = 0.04;
  auto h = augment(f, c, rng);
  for (std::size_t t = 0; t < h.frames; ++t) {
    bool all_zero = true, any_zero = false;
    for (std::size_t d = 0; d < 16; ++d) {
      all_zero = all_zero && h.at(t, d) == 0.0f;
      any_zero = any_zero || h.at(t, d) == 0.0f;
    }
    EXPECT_EQ(all_zero, any_zero);
  }
}

TEST(Augment, DefaultWidthScalesWithFeatDim) {
  EXPECT_EQ(AugmentConfig::scaled_freq_width(80), 27);
  EXPECT_EQ(AugmentConfig::scaled_freq_width(16), 5);
  AugmentConfig c;
  c.freq_mask_width = 20;
  EXPECT_THROW(c.validate(16), std::invalid_argument);
  c = AugmentConfig{};
  c.time_mask_max_frac = 1.5;
  EXPECT_THROW(c.validate(16), std::invalid_argument);
}
