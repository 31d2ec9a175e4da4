// act: synthetic benchmark generation, adaptation runs, ablations and evaluation.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.

#include "act/cli.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

struct CommonFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_file, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "Override one setting, section.key=value (repeatable)");
}

act::RunConfig resolve(const CommonFlags& f) {
  act::ConfigSource src;
  if (!f.config_file.empty()) src.file = f.config_file;
  src.sets = f.sets;
  return act::load_config(src);
}

std::optional<act::fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return act::fs::path(s);
}

void print_metrics(const act::RetrievalResult& r) {
  std::cout << "mAP=" << act::format_real(r.map) << " rank1=" << act::format_real(r.rank1())
            << " queries=" << r.n_queries << " skipped=" << r.n_skipped << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asymmetric co-teaching for unsupervised domain adaptation on synthetic re-ID features"};
  app.require_subcommand(1);

  CommonFlags synth_flags;
  std::string synth_out;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "Generate a source/target dataset");
  add_common(synth, synth_flags);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Dataset seed (synth.seed)");

  CommonFlags run_flags;
  std::string run_data, run_out, run_pipeline = "act";
  std::optional<int> run_r2, run_r3;
  auto* run = app.add_subcommand("run", "Run one pipeline end to end");
  add_common(run, run_flags);
  run->add_option("--data", run_data, "Dataset directory written by synth (default: generate from config)");
  run->add_option("--out", run_out, "Output directory")->required();
  run->add_option("--pipeline", run_pipeline, "direct|theory|theory_plus_to|ct|ct_plus_to|act");
  run->add_option("--seed", run_flags.seed, "Run seed (run.seed)");
  run->add_option("--r2", run_r2, "Stage-2 rounds");
  run->add_option("--r3", run_r3, "Stage-3 rounds");

  CommonFlags ablate_flags;
  std::string ablate_data, ablate_out;
  int n_seeds = 3;
  std::uint64_t first_seed = 1;
  auto* ablate = app.add_subcommand("ablate", "Compare all pipelines and k-means variants over several seeds");
  add_common(ablate, ablate_flags);
  ablate->add_option("--data", ablate_data, "Dataset directory (default: generate from config)");
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate->add_option("--seeds", n_seeds, "Number of run seeds")->check(CLI::PositiveNumber);
  ablate->add_option("--first-seed", first_seed, "First run seed");

  CommonFlags eval_flags;
  std::string eval_data, eval_checkpoint;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on the target split");
  add_common(eval, eval_flags);
  eval->add_option("--data", eval_data, "Dataset directory (default: generate from config)");
  eval->add_option("--checkpoint", eval_checkpoint, "Encoder checkpoint JSON")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      act::SynthOptions opt;
      if (synth_seed) synth_flags.sets.push_back("synth.seed=" + std::to_string(*synth_seed));
      opt.config = resolve(synth_flags);
      opt.out = synth_out;
      act::cmd_synth(opt);
      std::cout << "wrote " << act::resolve_output(opt.out).string() << '\n';
    } else if (*run) {
      if (run_flags.seed) run_flags.sets.push_back("run.seed=" + std::to_string(*run_flags.seed));
      if (run_r2) run_flags.sets.push_back("adapt.r2=" + std::to_string(*run_r2));
      if (run_r3) run_flags.sets.push_back("adapt.r3=" + std::to_string(*run_r3));
      act::RunOptions opt;
      opt.config = resolve(run_flags);
      opt.pipeline = act::parse_pipeline(run_pipeline);
      opt.data = optional_path(run_data);
      opt.out = run_out;
      const auto outcome = act::cmd_run(opt);
      print_metrics(outcome.final_metrics);
    } else if (*ablate) {
      act::AblateOptions opt;
      opt.config = resolve(ablate_flags);
      opt.data = optional_path(ablate_data);
      opt.out = ablate_out;
      for (int i = 0; i < n_seeds; ++i) opt.seeds.push_back(first_seed + static_cast<std::uint64_t>(i));
      act::write_ablation_csv(std::cout, act::cmd_ablate(opt));
    } else if (*eval) {
      act::EvalOptions opt;
      opt.config = resolve(eval_flags);
      opt.data = optional_path(eval_data);
      opt.checkpoint = eval_checkpoint;
      print_metrics(act::cmd_eval(opt));
    }
  } catch (const act::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
