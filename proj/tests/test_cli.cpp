#include <json.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = CTXASR_CLI;
const std::string kTiny = std::string(CTXASR_SOURCE_DIR) + "/configs/tiny.json";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the CLI inside `dir`; returns the exit code.
int run(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + kCli + "' " + args + " >cli.out 2>cli.err";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string err() const { return slurp(dir / "cli.err"); }

  void write_config(const std::string& name, const nlohmann::json& j) const {
    std::ofstream(dir / name) << j.dump(2);
  }

  void pipeline() const {
    ASSERT_EQ(run(dir, "gen-data --config " + kTiny + " --out data"), 0) << err();
    ASSERT_EQ(run(dir, "pretrain-ctc --quiet --config " + kTiny + " --out ctc"), 0) << err();
    ASSERT_EQ(run(dir, "pretrain-lm --quiet --config " + kTiny + " --out lm"), 0) << err();
    ASSERT_EQ(run(dir, "train --quiet --config " + kTiny + " --out run"), 0) << err();
  }
};

nlohmann::json tiny_json() { return nlohmann::json::parse(slurp(kTiny)); }

}  // namespace

TEST(Cli, ConfigErrorsExitWithTwo) {
  Workspace w("ctxasr_cli_cfg");
  auto j = tiny_json();
  j["surprise"] = 1;
  w.write_config("bad.json", j);
  EXPECT_EQ(run(w.dir, "gen-data --config bad.json --out data"), 2);
  EXPECT_NE(w.err().find("surprise"), std::string::npos) << w.err();
  EXPECT_EQ(run(w.dir, "gen-data --config missing.json --out data"), 2);
  EXPECT_EQ(run(w.dir, "eval --checkpoint x.json --perturb bogus"), 2);
  EXPECT_EQ(run(w.dir, "eval --checkpoint x.json --mask full"), 2);
  EXPECT_EQ(run(w.dir, "no-such-command"), 2);
}

TEST(Cli, MissingPrerequisitesExitWithThree) {
  Workspace w("ctxasr_cli_prereq");
  EXPECT_EQ(run(w.dir, "pretrain-ctc --config " + kTiny + " --out ctc"), 3);
  EXPECT_NE(w.err().find("gen-data"), std::string::npos) << w.err();
  ASSERT_EQ(run(w.dir, "gen-data --config " + kTiny + " --out data"), 0) << w.err();
  EXPECT_EQ(run(w.dir, "train --config " + kTiny + " --out run"), 3);
  EXPECT_NE(w.err().find("pretrain-ctc"), std::string::npos) << w.err();
  ASSERT_EQ(run(w.dir, "pretrain-ctc --quiet --config " + kTiny + " --out ctc"), 0) << w.err();
  EXPECT_EQ(run(w.dir, "train --config " + kTiny + " --out run"), 3);
  EXPECT_NE(w.err().find("pretrain-lm"), std::string::npos) << w.err();
  EXPECT_EQ(run(w.dir, "eval --checkpoint nowhere/model.json --data data"), 3);
}

TEST(Cli, EvalContextOffEqualsRemoveAndSweepHasSixRows) {
  Workspace w("ctxasr_cli_eval");
  w.pipeline();
  ASSERT_EQ(run(w.dir, "eval --checkpoint run/model.json --context off --out off"), 0) << w.err();
  ASSERT_EQ(run(w.dir, "eval --checkpoint run/model.json --perturb remove --out rm"), 0) << w.err();
  auto off = nlohmann::json::parse(slurp(w.dir / "off" / "eval_ctx-off_remove_causal.json"));
  auto rm = nlohmann::json::parse(slurp(w.dir / "rm" / "eval_ctx-on_remove_causal.json"));
  EXPECT_EQ(off["report"]["wer"], rm["report"]["wer"]);
  EXPECT_EQ(off["hypotheses"], rm["hypotheses"]);

  ASSERT_EQ(run(w.dir, "eval --checkpoint run/model.json --perturb all"), 0) << w.err();
  const auto out = slurp(w.dir / "cli.out");
  for (auto* row : {"| none |", "| remove |", "| random |", "| respell-replace |", "| respell-append |", "| ground-truth |"})
    EXPECT_NE(out.find(row), std::string::npos) << row;

  ASSERT_EQ(run(w.dir, "report --runs run --out rep/report.md"), 0) << w.err();
  const auto md = slurp(w.dir / "rep" / "report.md");
  EXPECT_NE(md.find("| model | context-train | context-eval | WER | SUB | INS | DEL | RareWER |"), std::string::npos);
  EXPECT_NE(md.find("33554432"), std::string::npos);
  EXPECT_TRUE(fs::exists(w.dir / "rep" / "report.json"));
  EXPECT_NE(run(w.dir, "report --runs empty_dir --out rep/x.md"), 0);
}

TEST(Cli, MaskFlagChangesOnlyTheMask) {
  Workspace w("ctxasr_cli_mask");
  w.pipeline();
  ASSERT_EQ(run(w.dir, "eval --checkpoint run/model.json --mask prefix"), 0) << w.err();
  auto j = nlohmann::json::parse(slurp(w.dir / "run" / "eval_ctx-on_none_prefix.json"));
  EXPECT_EQ(j["mask"], "prefix");
  EXPECT_EQ(j["weights_checksum"], nlohmann::json::parse(slurp(w.dir / "run" / "model.json"))["checksum"]);
}

TEST(Cli, RerunsAreByteIdentical) {
  Workspace a("ctxasr_cli_det_a"), b("ctxasr_cli_det_b");
  a.pipeline();
  b.pipeline();
  for (auto* f : {"data/train.jsonl", "data/eval.jsonl", "data/lexicon.json", "ctc/model.ckpt", "ctc/metrics.jsonl",
                  "lm/model.ckpt", "lm/metrics.jsonl", "run/model.ckpt", "run/model.json", "run/metrics.jsonl",
                  "run/last.optim.ckpt"})
    EXPECT_EQ(slurp(a.dir / f), slurp(b.dir / f)) << f;
}

TEST(Cli, AblationReportsBothVariants) {
  Workspace w("ctxasr_cli_ablate");
  ASSERT_EQ(run(w.dir, "gen-data --config " + kTiny + " --out data"), 0) << w.err();
  ASSERT_EQ(run(w.dir, "pretrain-ctc --quiet --config " + kTiny + " --out ctc"), 0) << w.err();
  ASSERT_EQ(run(w.dir, "pretrain-lm --quiet --config " + kTiny + " --out lm"), 0) << w.err();
  ASSERT_EQ(run(w.dir, "ablate-decoder --quiet --config " + kTiny + " --out abl"), 0) << w.err();
  auto j = nlohmann::json::parse(slurp(w.dir / "abl" / "ablation.json"));
  ASSERT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["rows"][0]["variant"], "decoder-only");
  EXPECT_EQ(j["rows"][1]["variant"], "encoder-decoder");
  EXPECT_EQ(j["rows"][0]["corpus_checksum"], j["rows"][1]["corpus_checksum"]);
  EXPECT_LT(j["rows"][0]["trainable_parameters"].get<std::size_t>(),
            j["rows"][1]["trainable_parameters"].get<std::size_t>());
}
