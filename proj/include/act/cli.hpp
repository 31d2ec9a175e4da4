#pragma once

// Command implementations behind tools/act. Argument parsing lives in the tool;
// everything here takes already-parsed options so tests can call it directly.

#include "act/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace act {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "ACT_OUTPUT_ROOT";

/// Relative output paths are placed under $ACT_OUTPUT_ROOT when it is set.
inline fs::path resolve_output(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

struct ConfigSource {
  std::optional<std::string> file;
  std::vector<std::string> sets;  // "section.key=value"
};

inline RunConfig load_config(const ConfigSource& src, RunConfig cfg = {}) {
  if (src.file) apply_ini_file(cfg, *src.file);
  for (const auto& s : src.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  auto os = open_for_write(path.string());
  os << j.dump(2) << '\n';
}

struct SynthOptions {
  fs::path out;
  RunConfig config;
};

/// Generates the domain pair and checks that the configured query split is
/// feasible, so a dataset that cannot be evaluated is rejected up front.
inline void cmd_synth(const SynthOptions& opt) {
  const DomainPair pair = generate_domain_pair(opt.config.synth);
  split_query_gallery(pair.target, opt.config.queries_per_identity, opt.config.split_seed);
  write_dataset_dir(resolve_output(opt.out), pair, opt.config.synth);
}

struct RunOptions {
  std::optional<fs::path> data;  // synthesise from the config when absent
  fs::path out;
  Pipeline pipeline = Pipeline::act;
  RunConfig config;
};

inline std::pair<FeatureSet, FeatureSet> load_or_generate(const std::optional<fs::path>& data, const SynthConfig& synth) {
  if (data) return read_dataset_dir(*data);
  DomainPair pair = generate_domain_pair(synth);
  return {std::move(pair.source), std::move(pair.target)};
}

inline nlohmann::json seeds_json(const RunConfig& cfg) {
  AdaptConfig staged = cfg.adapt;
  staged.seed_stages(cfg.seed);
  return {{"run", cfg.seed},
          {"synth", cfg.synth.seed},
          {"split", cfg.split_seed},
          {"init", derive_seed(cfg.seed, 0)},
          {"stage1", staged.stage1.seed},
          {"stage2", staged.stage2.seed},
          {"stage3", staged.stage3.seed}};
}

/// Runs one pipeline and writes its artefacts plus manifest.json into the
/// output directory. On failure the manifest is still written, flagged
/// incomplete with the error message, and the exception is rethrown.
inline PipelineOutcome cmd_run(const RunOptions& opt) {
  const fs::path out = resolve_output(opt.out);
  fs::create_directories(out);
  nlohmann::json manifest = {{"pipeline", to_string(opt.pipeline)},
                             {"config", config_snapshot(opt.config)},
                             {"seeds", seeds_json(opt.config)},
                             {"dataset", opt.data ? nlohmann::json(fs::absolute(*opt.data).string()) : nlohmann::json("generated")},
                             {"complete", false}};
  write_json(out / "manifest.json", manifest);
  try {
    auto [source, target] = load_or_generate(opt.data, opt.config.synth);
    Experiment exp(std::move(source), std::move(target), opt.config);
    PipelineOutcome outcome = exp.run(opt.pipeline);
    write_run_artifacts(out, outcome);
    manifest["checkpoints"] = {{"m_src", "m_src.json"}, {"m_ada", "m_ada.json"}, {"final", "final_model.json"}};
    manifest["metrics"] = {{"final", "metrics.json"},
                           {"round_records", "round_records.csv"},
                           {"act_records", "act_records.csv"},
                           {"selection_trace", "selection_trace.csv"}};
    manifest["timings_seconds"] = outcome.timings;
    manifest["complete"] = true;
    write_json(out / "manifest.json", manifest);
    return outcome;
  } catch (const std::exception& e) {
    manifest["error"] = e.what();
    write_json(out / "manifest.json", manifest);
    throw;
  }
}

struct AblationRow {
  std::string pipeline;
  std::uint64_t seed = 0;
  double map = 0.0;
  double rank1 = 0.0;
};

/// Pipelines compared by the ablation, in output order.
inline const std::vector<Pipeline>& ablation_pipelines() {
  static const std::vector<Pipeline> p{Pipeline::direct, Pipeline::theory, Pipeline::theory_plus_to, Pipeline::ct,
                                       Pipeline::ct_plus_to, Pipeline::act};
  return p;
}

inline const std::vector<double>& ablation_kmeans_fracs() {
  static const std::vector<double> u{0.2, 0.3};
  return u;
}

inline std::string kmeans_row_name(bool with_act, double u) {
  return std::string(with_act ? "kmeans_act_u" : "kmeans_u") + std::to_string(static_cast<int>(std::lround(u * 100)));
}

/// One seed of the ablation: every pipeline on the DBSCAN backend, then the
/// k-means stage-2 baseline and k-means + ACT for each outlier share u.
inline std::vector<AblationRow> ablate_seed(const FeatureSet& source, const FeatureSet& target, RunConfig cfg,
                                            std::uint64_t seed) {
  cfg.seed = seed;
  std::vector<AblationRow> rows;
  {
    RunConfig c = cfg;
    c.adapt.cluster.backend = ClusterBackend::dbscan;
    Experiment exp(source, target, c);
    for (auto p : ablation_pipelines()) {
      const auto o = exp.run(p);
      rows.push_back({to_string(p), seed, o.final_metrics.map, o.final_metrics.rank1()});
    }
  }
  for (double u : ablation_kmeans_fracs()) {
    RunConfig c = cfg;
    c.adapt.cluster.backend = ClusterBackend::kmeans;
    c.adapt.cluster.outlier_frac = u;
    Experiment exp(source, target, c);
    for (bool with_act : {false, true}) {
      const auto o = exp.run(with_act ? Pipeline::act : Pipeline::theory);
      rows.push_back({kmeans_row_name(with_act, u), seed, o.final_metrics.map, o.final_metrics.rank1()});
    }
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "pipeline,seed,map,rank1\n";
  for (const auto& r : rows) os << r.pipeline << ',' << r.seed << ',' << format_real(r.map) << ',' << format_real(r.rank1) << '\n';
}

struct AblateOptions {
  std::optional<fs::path> data;
  fs::path out;
  std::vector<std::uint64_t> seeds;
  RunConfig config;
};

/// With a dataset directory every seed reuses it; without one each seed gets
/// its own synthetic dataset (synth.seed = run seed).
inline std::vector<AblationRow> cmd_ablate(const AblateOptions& opt) {
  require(!opt.seeds.empty(), "ablate: at least one seed is required");
  std::vector<AblationRow> rows;
  for (auto s : opt.seeds) {
    SynthConfig synth = opt.config.synth;
    synth.seed = s;
    auto [source, target] = load_or_generate(opt.data, synth);
    auto part = ablate_seed(source, target, opt.config, s);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const fs::path out = resolve_output(opt.out);
  fs::create_directories(out);
  {
    auto os = open_for_write((out / "ablation.csv").string());
    write_ablation_csv(os, rows);
  }
  write_json(out / "manifest.json", {{"config", config_snapshot(opt.config)},
                                     {"seeds", opt.seeds},
                                     {"metrics", {{"ablation", "ablation.csv"}}},
                                     {"complete", true}});
  return rows;
}

struct EvalOptions {
  std::optional<fs::path> data;
  fs::path checkpoint;
  RunConfig config;
};

/// Scores a saved encoder on the target query/gallery split.
inline RetrievalResult cmd_eval(const EvalOptions& opt) {
  const auto [source, target] = load_or_generate(opt.data, opt.config.synth);
  const EncoderParams model = load_checkpoint(opt.checkpoint.string());
  if (model.input_dim() != target.dim())
    throw ConfigError("eval: checkpoint expects " + std::to_string(model.input_dim()) + " features, dataset has " +
                      std::to_string(target.dim()));
  const TargetEvaluator evaluator(target, split_query_gallery(target, opt.config.queries_per_identity, opt.config.split_seed));
  return evaluator.retrieval(forward(model, target.features));
}

}  // namespace act
