#include "ctxasr/metrics.hpp"

#include <gtest/gtest.h>

using namespace ctxasr;

namespace {

using Words = std::vector<std::string>;

// Plain recursive edit distance, no table.
std::size_t brute_distance(const Words& a, std::size_t i, const Words& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = brute_distance(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  if (a[i] == b[j]) return sub;
  return std::min({sub, brute_distance(a, i + 1, b, j) + 1, brute_distance(a, i, b, j + 1) + 1});
}

Words random_words(Rng& rng, std::size_t max_len) {
  static const Words vocab{"a", "b", "c", "d", "e"};
  Words w(std::uniform_int_distribution<std::size_t>(0, max_len)(rng));
  for (auto& x : w) x = vocab[std::uniform_int_distribution<std::size_t>(0, vocab.size() - 1)(rng)];
  return w;
}

}  // namespace

TEST(Wer, Examples) {
  auto same = align_wer({"a", "b", "c"}, {"a", "b", "c"});
  EXPECT_EQ(same.wer(), 0.0);
  auto sub = align_wer({"a", "b", "c"}, {"a", "x", "c"});
  EXPECT_EQ(sub.sub, 1u);
  EXPECT_DOUBLE_EQ(sub.wer(), 1.0 / 3.0);
  auto del = align_wer({"a", "b", "c"}, {"a", "c"});
  EXPECT_EQ(del.del, 1u);
  EXPECT_EQ(del.ins + del.sub, 0u);
  auto ins = align_wer({"a", "c"}, {"a", "b", "c"});
  EXPECT_EQ(ins.ins, 1u);
}

TEST(Wer, EmptySequences) {
  auto both = align_wer({}, {});
  EXPECT_EQ(both.wer(), 0.0);
  auto only_hyp = align_wer({}, {"x", "y"});
  EXPECT_EQ(only_hyp.ins, 2u);
  EXPECT_EQ(only_hyp.wer(), 2.0);  // denominator max(1, 0)
  auto only_ref = align_wer({"x", "y"}, {});
  EXPECT_EQ(only_ref.del, 2u);
  EXPECT_EQ(only_ref.wer(), 1.0);
}

TEST(Wer, TieBreakPrefersSubstitutionThenDeletion) {
  // "a b" vs "c": one sub + one del either way; the split must be fixed.
  auto r = align_wer({"a", "b"}, {"c"});
  EXPECT_EQ(r.sub, 1u);
  EXPECT_EQ(r.del, 1u);
  EXPECT_EQ(r.ins, 0u);
  auto s = align_wer({"a"}, {"b", "c"});
  EXPECT_EQ(s.sub, 1u);
  EXPECT_EQ(s.ins, 1u);
  // "a b" vs "b a": two substitutions tie with a deletion plus an insertion.
  auto t = align_wer({"a", "b"}, {"b", "a"});
  EXPECT_EQ(t.sub, 2u);
  EXPECT_EQ(t.ins + t.del, 0u);
}

TEST(Wer, MatchesBruteForceOnRandomPairs) {
  Rng rng(123);
  for (int k = 0; k < 1000; ++k) {
    auto ref = random_words(rng, 8), hyp = random_words(rng, 8);
    auto r = align_wer(ref, hyp);
    EXPECT_EQ(r.sub + r.ins + r.del, brute_distance(ref, 0, hyp, 0));
    // Swapping roles swaps ins and del and keeps the distance.
    auto back = align_wer(hyp, ref);
    EXPECT_EQ(back.errors(), r.errors());
    auto a = align_words(ref, hyp);
    std::size_t refs = 0, hyps = 0;
    for (auto& st : a.steps) {
      refs += st.ref >= 0;
      hyps += st.hyp >= 0;
    }
    EXPECT_EQ(refs, ref.size());
    EXPECT_EQ(hyps, hyp.size());
  }
}

TEST(Wer, ReportsAggregate) {
  auto a = align_wer({"a", "b"}, {"a", "c"});
  auto b = align_wer({"x", "y", "z"}, {"x"});
  auto sum = a;
  sum += b;
  EXPECT_EQ(sum.n_ref_words, 5u);
  EXPECT_EQ(sum.errors(), 3u);
  EXPECT_DOUBLE_EQ(sum.wer(), 0.6);
  EXPECT_DOUBLE_EQ(sum.sub_rate() + sum.ins_rate() + sum.del_rate(), sum.wer());
  auto j = report_json(sum);
  auto back = report_from_json(j);
  EXPECT_EQ(back.errors(), sum.errors());
  EXPECT_EQ(back.n_ref_words, sum.n_ref_words);
}

// ---------------------------------------------------------------------------
// Rare words

TEST(Rare, TokenMassRule) {
  EXPECT_TRUE(rare_word_set({"w w w", "w"}).empty());
  Words ten{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
  auto rare = rare_word_set({join_words(ten)});
  ASSERT_EQ(rare.size(), 1u);
  EXPECT_EQ(*rare.begin(), "j");  // ties broken lexicographically
  // 80 x "a", 10 x "b", 5 x "c", 5 x "d": 90% reached at "b".
  std::string t;
  for (int i = 0; i < 80; ++i) t += "a ";
  for (int i = 0; i < 10; ++i) t += "b ";
  for (int i = 0; i < 5; ++i) t += "c d ";
  EXPECT_EQ(rare_word_set({t}), (std::set<std::string>{"c", "d"}));
}

TEST(Rare, TypeRankRule) {
  Words ten{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
  auto rare = rare_word_set({join_words(ten)}, RareRule::type_rank);
  EXPECT_EQ(rare.size(), 9u);
  EXPECT_FALSE(rare.count("a"));
  EXPECT_EQ(parse_rare_rule("type_rank"), RareRule::type_rank);
  EXPECT_THROW(parse_rare_rule("other"), std::invalid_argument);
}

TEST(Rare, RareWerExamples) {
  const std::set<std::string> rare{"zorb"};
  auto ok = score_utterance("x zorb y", "x zorb y", rare);
  EXPECT_EQ(ok.rare_wer().value(), 0.0);
  auto del = score_utterance("x zorb y", "x y", rare);
  EXPECT_EQ(del.rare_wer().value(), 1.0);
  auto sub = score_utterance("x zorb", "x zorbh", rare);
  EXPECT_EQ(sub.rare_wer().value(), 1.0);
  // Insertions are not attributed to rare words.
  auto ins = score_utterance("x y", "x zorb y", rare);
  EXPECT_FALSE(ins.rare_wer().has_value());
  EXPECT_EQ(rare_wer_cell(ins), "NA");
  auto j = report_json(ins);
  EXPECT_TRUE(j["rare_wer"].is_null());
}

TEST(Rare, ErrorsNeverExceedReferences) {
  Rng rng(9);
  const std::set<std::string> rare{"a", "c"};
  for (int k = 0; k < 300; ++k) {
    auto r = align_wer(random_words(rng, 8), random_words(rng, 8), &rare);
    EXPECT_LE(r.rare_errors, r.rare_ref_words);
  }
}

// ---------------------------------------------------------------------------
// Perturbations

namespace {

struct PerturbFixture {
  Lexicon lx = build_lexicon(21, 400, 0.5);
  std::set<std::string> rare;
  Sample s;
  std::string r1, r2, freq;

  PerturbFixture() {
    for (std::size_t i = 0; i < lx.words.size(); ++i)
      if (lx.rare[i]) rare.insert(lx.words[i]);
    r1 = lx.homophone_pairs[0].a;
    r2 = lx.words.back();
    freq = lx.words[0];
    s.transcript = freq + " " + r1 + " " + lx.words[1] + " " + r2;
    s.context = lx.words[2] + " " + r1 + " " + r2 + " " + lx.words[3];
  }
  WordSampler sampler() const { return WordSampler({s.transcript, join_words({lx.words[4], lx.words[5]})}); }
};

}  // namespace

TEST(Perturb, NoneAndRemove) {
  PerturbFixture f;
  Rng rng(1);
  auto sm = f.sampler();
  EXPECT_EQ(perturb_context(f.s, PerturbKind::none, f.lx, f.rare, sm, rng), f.s.context);
  EXPECT_FALSE(perturb_context(f.s, PerturbKind::remove_all, f.lx, f.rare, sm, rng).has_value());
  auto no_ctx = f.s;
  no_ctx.context.reset();
  for (auto k : all_perturbations())
    if (k != PerturbKind::ground_truth) EXPECT_FALSE(perturb_context(no_ctx, k, f.lx, f.rare, sm, rng).has_value());
}

TEST(Perturb, GroundTruthKeepsReferenceRareWordsInOrder) {
  PerturbFixture f;
  Rng rng(1);
  auto sm = f.sampler();
  EXPECT_EQ(perturb_context(f.s, PerturbKind::ground_truth, f.lx, f.rare, sm, rng), join_words({f.r1, f.r2}));
}

TEST(Perturb, RespellReplaceAndAppend) {
  PerturbFixture f;
  Rng rng(1);
  auto sm = f.sampler();
  auto rep = split_words(*perturb_context(f.s, PerturbKind::respell_replace, f.lx, f.rare, sm, rng));
  auto app = split_words(*perturb_context(f.s, PerturbKind::respell_append, f.lx, f.rare, sm, rng));
  auto has = [](const Words& w, const std::string& x) { return std::find(w.begin(), w.end(), x) != w.end(); };
  EXPECT_FALSE(has(rep, f.r1));
  EXPECT_TRUE(has(rep, f.lx.respell(f.r1)));
  EXPECT_TRUE(has(rep, f.lx.respell(f.r2)));
  EXPECT_EQ(rep.size(), 4u);
  EXPECT_TRUE(has(app, f.r1));
  EXPECT_TRUE(has(app, f.lx.respell(f.r1)));
  EXPECT_EQ(app.size(), 6u);
  // The respelling follows its original directly.
  auto at = std::find(app.begin(), app.end(), f.r1);
  EXPECT_EQ(*(at + 1), f.lx.respell(f.r1));
  EXPECT_EQ(f.lx.respell(f.r1), f.lx.homophone_pairs[0].b);
}

TEST(Perturb, RandomKeepsLengthAndDrawsTrainingWords) {
  PerturbFixture f;
  auto sm = f.sampler();
  Rng a(5), b(5);
  auto x = perturb_context(f.s, PerturbKind::random, f.lx, f.rare, sm, a);
  auto y = perturb_context(f.s, PerturbKind::random, f.lx, f.rare, sm, b);
  EXPECT_EQ(x, y);
  const auto words = split_words(*x);
  EXPECT_EQ(words.size(), 4u);
  const auto pool = split_words(f.s.transcript + " " + f.lx.words[4] + " " + f.lx.words[5]);
  for (auto& w : words) EXPECT_NE(std::find(pool.begin(), pool.end(), w), pool.end());
}

TEST(Perturb, NamesRoundTrip) {
  for (auto k : all_perturbations()) EXPECT_EQ(parse_perturb(perturb_name(k)), k);
  EXPECT_THROW(parse_perturb("bogus"), std::invalid_argument);
  EXPECT_EQ(all_perturbations().size(), 6u);
}

TEST(Report, MarkdownTableLayout) {
  auto r = align_wer({"a", "b", "c", "d"}, {"a", "x", "c"});
  r.label = "row";
  auto md = markdown_table({"model"}, {{{"m1"}, r}});
  EXPECT_NE(md.find("| model | WER | SUB | INS | DEL | RareWER |"), std::string::npos);
  EXPECT_NE(md.find("| m1 | 50.00 | 25.00 | 0.00 | 25.00 | NA |"), std::string::npos) << md;
}
