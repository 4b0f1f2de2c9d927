// ctxasr command-line interface.
//
// Exit codes: 0 ok, 2 config/usage error, 3 missing prerequisite, 4 numeric failure.

#include "ctxasr/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace ctxasr;
namespace fs = std::filesystem;

namespace {

struct PathOverrides {
  std::string data, ctc, lm;
  void apply(ExperimentConfig& cfg) const {
    if (!data.empty()) cfg.paths.data = data;
    if (!ctc.empty()) cfg.paths.ctc = ctc;
    if (!lm.empty()) cfg.paths.lm = lm;
  }
};

void add_path_overrides(CLI::App* c, PathOverrides& p) {
  c->add_option("--data", p.data, "corpus directory (overrides paths.data)");
  c->add_option("--ctc", p.ctc, "CTC pretraining output directory (overrides paths.ctc)");
  c->add_option("--lm", p.lm, "LM pretraining output directory (overrides paths.lm)");
}

template <typename Fn>
auto with_scalar(Dtype d, Fn&& fn) {
  if (d == Dtype::f64) return fn(double{});
  return fn(float{});
}

void print(const Json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctxasr: contextual speech recognition as mixed-modal language modeling"};
  app.require_subcommand(1);

  std::string config_path, out;
  PathOverrides paths;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_at;
  bool resume = false, quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto add_train_opts = [&](CLI::App* c) {
    c->add_option("--config", config_path, "experiment config (JSON)")->required();
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--seed", seed, "override the root seed");
    c->add_option("--stop-at", stop_at, "stop after this many steps (the schedule still spans total_steps)");
    c->add_flag("--resume", resume, "continue from <out>/last.json");
    c->add_flag("--quiet", quiet, "no progress lines");
    add_path_overrides(c, paths);
  };
  auto* ctc = app.add_subcommand("pretrain-ctc", "pretrain the audio encoder with CTC");
  add_train_opts(ctc);
  auto* lm = app.add_subcommand("pretrain-lm", "pretrain and freeze the base decoder LM");
  add_train_opts(lm);
  auto* train = app.add_subcommand("train", "fine-tune encoder + adapters on the mixed-modal task");
  add_train_opts(train);

  std::string checkpoint, context = "on", mask, rare_rule = "token_mass", data_dir;
  std::vector<std::string> perturbs;
  std::size_t limit = 0;
  auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint on the eval split");
  ev->add_option("--checkpoint", checkpoint, "bundle manifest (model.json)")->required();
  ev->add_option("--context", context, "use context")->check(CLI::IsMember({"on", "off"}));
  ev->add_option("--perturb", perturbs, "context perturbation(s); 'all' runs the six-row sweep")
      ->check(CLI::IsMember({"none", "remove", "random", "respell-replace", "respell-append", "ground-truth", "all"}));
  ev->add_option("--mask", mask, "attention mask (default: the one used in training)")
      ->check(CLI::IsMember({"causal", "prefix"}));
  ev->add_option("--rare-rule", rare_rule, "rare-word rule")->check(CLI::IsMember({"token_mass", "type_rank"}));
  ev->add_option("--data", data_dir, "corpus directory (default: the one recorded by train)");
  ev->add_option("--limit", limit, "evaluate only the first N samples (0 = all)");
  ev->add_option("--out", out, "directory for eval JSON files (default: next to the checkpoint)");

  std::vector<std::string> variants;
  auto* abl = app.add_subcommand("ablate-decoder", "train and evaluate decoder-only vs encoder-decoder");
  abl->add_option("--config", config_path, "experiment config (JSON)")->required();
  abl->add_option("--out", out, "output directory")->required();
  abl->add_option("--variant", variants, "variant(s) to run (default: both)")
      ->check(CLI::IsMember({"decoder-only", "encoder-decoder"}));
  abl->add_option("--seed", seed, "override the root seed");
  abl->add_flag("--quiet", quiet, "no progress lines");
  add_path_overrides(abl, paths);

  std::vector<std::string> runs;
  auto* rep = app.add_subcommand("report", "merge eval results of several runs");
  rep->add_option("--runs", runs, "run directories")->required();
  rep->add_option("--out", out, "report path (Markdown; JSON is written alongside)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const RunControl rc{stop_at, resume, !quiet};
    if (gen->parsed()) {
      auto cfg = load_experiment(config_path);
      if (seed) cfg.seed = *seed;
      print(cmd_gen_data(cfg, out));
    } else if (ctc->parsed() || lm->parsed() || train->parsed()) {
      auto cfg = load_experiment(config_path);
      paths.apply(cfg);
      if (seed) cfg.seed = *seed;
      print(with_scalar(cfg.scalar, [&](auto s) {
        using S = decltype(s);
        if (ctc->parsed()) return cmd_pretrain_ctc<S>(cfg, out, rc);
        if (lm->parsed()) return cmd_pretrain_lm<S>(cfg, out, rc);
        return cmd_train<S>(cfg, out, rc);
      }));
    } else if (ev->parsed()) {
      const fs::path ckpt = checkpoint;
      const fs::path run_dir = ckpt.parent_path();
      nlohmann::json info;
      if (fs::exists(run_info_path(run_dir))) info = read_json(run_info_path(run_dir));
      fs::path data = data_dir;
      if (data.empty()) {
        if (!info.contains("data")) throw ConfigError("eval: --data is required (no run.json next to the checkpoint)");
        data = info.at("data").get<std::string>();
      }
      MaskKind m = MaskKind::causal;
      if (!mask.empty())
        m = parse_mask(mask);
      else if (info.contains("mask"))
        m = parse_mask(info.at("mask").get<std::string>());
      std::size_t max_ctx = info.contains("max_context_tokens") ? info.at("max_context_tokens").get<std::size_t>()
                                                                : kMaxContextTokens;
      if (perturbs.empty()) perturbs = {"none"};
      std::vector<EvalOptions> conds;
      for (auto& p : perturbs) {
        std::vector<PerturbKind> kinds;
        if (p == "all")
          kinds = all_perturbations();
        else
          kinds = {parse_perturb(p)};
        for (auto k : kinds) conds.push_back({context == "on", k, m, max_ctx, limit, 0});
      }
      const auto dtype = fs::exists(ckpt) ? parse_dtype(read_json(ckpt).at("dtype").get<std::string>()) : Dtype::f32;
      const auto rows = with_scalar(dtype, [&](auto s) {
        using S = decltype(s);
        return cmd_eval<S>(ckpt, data, conds, parse_rare_rule(rare_rule), out.empty() ? run_dir : fs::path(out));
      });
      std::cout << eval_rows_markdown(rows);
      for (auto& r : rows) std::cout << r.at("report").dump() << "\n";
    } else if (abl->parsed()) {
      auto cfg = load_experiment(config_path);
      paths.apply(cfg);
      if (seed) cfg.seed = *seed;
      if (variants.empty()) variants = {"decoder-only", "encoder-decoder"};
      std::vector<std::pair<std::vector<std::string>, WerReport>> table;
      Json jrows = Json::array();
      for (auto& v : variants) {
        auto vc = cfg;
        vc.decoder.variant = parse_variant(v);
        const fs::path dir = fs::path(out) / v;
        const auto row = with_scalar(cfg.scalar, [&](auto s) {
          using S = decltype(s);
          auto info = cmd_train<S>(vc, dir, rc);
          EvalOptions eo{vc.context_in_eval, PerturbKind::none, vc.mask, vc.max_context_tokens, 0, 0};
          auto rows = cmd_eval<S>(final_manifest(dir), vc.paths.data, {eo}, vc.rare_rule, dir);
          return Json{{"variant", v},
                      {"trainable_parameters", info.at("trainable_parameters")},
                      {"corpus_checksum", info.at("corpus_checksum")},
                      {"report", rows.at(0).at("report")}};
        });
        table.push_back({{v, std::to_string(row.at("trainable_parameters").get<std::size_t>())},
                         report_from_json(row.at("report"))});
        jrows.push_back(row);
      }
      const auto md = markdown_table({"model", "trainable params"}, table);
      std::ofstream(fs::path(out) / "ablation.md") << md;
      write_json(fs::path(out) / "ablation.json", Json{{"rows", jrows}});
      std::cout << md;
    } else if (rep->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      auto [md, j] = cmd_report(dirs);
      const fs::path p = out;
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      std::ofstream(p) << md;
      auto jp = p;
      write_json(jp.replace_extension(".json"), j);
      std::cout << md;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const BundleError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
