#pragma once

// End-to-end runs: configuration (INI file plus overrides), the six pipeline
// variants, and the artefacts each run leaves on disk.

#include "act/adapt.hpp"
#include "act/cluster.hpp"
#include "act/coteach.hpp"
#include "act/datasynth.hpp"
#include "act/encoder.hpp"
#include "act/eval.hpp"
#include "act/io.hpp"

#include "json.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace act {

struct RunConfig {
  SynthConfig synth;
  AdaptConfig adapt;
  int queries_per_identity = 2;
  std::uint64_t split_seed = 7;
  std::uint64_t seed = 1;

  void validate() const {
    synth.validate();
    adapt.validate();
    require(queries_per_identity >= 1, "split: queries_per_identity must be >= 1");
  }
};

namespace detail {

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    T v{};
    if constexpr (std::is_same_v<T, int>) v = std::stoi(text, &used);
    else if constexpr (std::is_same_v<T, std::uint64_t>) v = std::stoull(text, &used);
    else if constexpr (std::is_same_v<T, double>) v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: cannot parse '" + text + "' for " + key);
  }
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config: expected a boolean for " + key + ", got '" + text + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <class T, class Access>
Field numeric(const std::string& key, Access access) {
  return {[key, access](RunConfig& c, const std::string& v) { access(c) = parse_value<T>(key, v); },
          [access](const RunConfig& c) {
            RunConfig copy = c;
            return nlohmann::json(access(copy));
          }};
}

inline void add_train_fields(std::map<std::string, Field>& f, const std::string& section,
                             TrainConfig AdaptConfig::*stage) {
  auto at = [stage](RunConfig& c) -> TrainConfig& { return c.adapt.*stage; };
  f[section + ".margin"] = numeric<double>(section + ".margin", [at](RunConfig& c) -> double& { return at(c).margin; });
  f[section + ".P"] = numeric<int>(section + ".P", [at](RunConfig& c) -> int& { return at(c).P; });
  f[section + ".K_inst"] = numeric<int>(section + ".K_inst", [at](RunConfig& c) -> int& { return at(c).K_inst; });
  f[section + ".lr"] = numeric<double>(section + ".lr", [at](RunConfig& c) -> double& { return at(c).lr; });
  f[section + ".epochs"] = numeric<int>(section + ".epochs", [at](RunConfig& c) -> int& { return at(c).epochs; });
}

/// Every configurable key as "section.name".
inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
#define ACT_FIELD(T, key, expr) f[key] = numeric<T>(key, [](RunConfig& c) -> T& { return expr; })
    ACT_FIELD(int, "synth.n_identities_source", c.synth.n_identities_source);
    ACT_FIELD(int, "synth.n_identities_target", c.synth.n_identities_target);
    ACT_FIELD(int, "synth.samples_per_identity", c.synth.samples_per_identity);
    ACT_FIELD(int, "synth.dim", c.synth.dim);
    ACT_FIELD(int, "synth.n_cameras", c.synth.n_cameras);
    ACT_FIELD(double, "synth.shift_scale", c.synth.shift_scale);
    ACT_FIELD(double, "synth.corrupt_frac", c.synth.corrupt_frac);
    ACT_FIELD(double, "synth.noise_sigma", c.synth.noise_sigma);
    ACT_FIELD(double, "synth.radius", c.synth.radius);
    ACT_FIELD(double, "synth.corrupt_sigma", c.synth.corrupt_sigma);
    ACT_FIELD(int, "synth.corrupt_rank", c.synth.corrupt_rank);
    ACT_FIELD(std::uint64_t, "synth.seed", c.synth.seed);
    ACT_FIELD(int, "split.queries_per_identity", c.queries_per_identity);
    ACT_FIELD(std::uint64_t, "split.seed", c.split_seed);
    ACT_FIELD(int, "encoder.hidden", c.adapt.encoder.hidden);
    ACT_FIELD(int, "encoder.embedding", c.adapt.encoder.embedding);
    ACT_FIELD(int, "metric.k", c.adapt.metric.k);
    ACT_FIELD(double, "metric.lambda", c.adapt.metric.lambda);
    ACT_FIELD(int, "cluster.min_pts", c.adapt.cluster.min_pts);
    ACT_FIELD(double, "cluster.rho", c.adapt.cluster.rho);
    ACT_FIELD(int, "cluster.kmeans_k", c.adapt.cluster.kmeans_k);
    ACT_FIELD(double, "cluster.outlier_frac", c.adapt.cluster.outlier_frac);
    ACT_FIELD(int, "adapt.r2", c.adapt.r2);
    ACT_FIELD(int, "adapt.r3", c.adapt.r3);
    ACT_FIELD(std::uint64_t, "run.seed", c.seed);
#undef ACT_FIELD
    add_train_fields(f, "stage1", &AdaptConfig::stage1);
    add_train_fields(f, "stage2", &AdaptConfig::stage2);
    add_train_fields(f, "stage3", &AdaptConfig::stage3);
    f["encoder.normalize"] = {
        [](RunConfig& c, const std::string& v) { c.adapt.encoder.normalize = parse_bool("encoder.normalize", v); },
        [](const RunConfig& c) { return nlohmann::json(c.adapt.encoder.normalize); }};
    f["cluster.backend"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "dbscan") c.adapt.cluster.backend = ClusterBackend::dbscan;
          else if (v == "kmeans") c.adapt.cluster.backend = ClusterBackend::kmeans;
          else throw ConfigError("config: cluster.backend must be dbscan or kmeans, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return nlohmann::json(c.adapt.cluster.backend == ClusterBackend::kmeans ? "kmeans" : "dbscan");
        }};
    f["cluster.eps"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "auto" || v.empty()) c.adapt.cluster.eps_override.reset();
          else c.adapt.cluster.eps_override = parse_value<double>("cluster.eps", v);
        },
        [](const RunConfig& c) {
          return c.adapt.cluster.eps_override ? nlohmann::json(*c.adapt.cluster.eps_override) : nlohmann::json("auto");
        }};
    f["stage3.fixed_ratio"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "schedule" || v.empty()) c.adapt.fixed_ratio.reset();
          else c.adapt.fixed_ratio = parse_value<double>("stage3.fixed_ratio", v);
        },
        [](const RunConfig& c) {
          return c.adapt.fixed_ratio ? nlohmann::json(*c.adapt.fixed_ratio) : nlohmann::json("schedule");
        }};
    return f;
  }();
  return table;
}

}  // namespace detail

/// Sets one "section.key" value. Unknown keys are configuration errors.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::fields();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second.set(cfg, value);
}

/// Reads an INI file ([section] / key = value) on top of `cfg`.
inline void apply_ini_file(RunConfig& cfg, const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section in " + path);
    for (const auto& [key, value] : body) apply_setting(cfg, section + "." + key, value.data());
  }
}

/// Flat snapshot of every setting, as embedded in run manifests.
inline nlohmann::json config_snapshot(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, f] : detail::fields()) j[key] = f.get(cfg);
  return j;
}

enum class Pipeline { direct, theory, theory_plus_to, ct, ct_plus_to, act };

inline const char* to_string(Pipeline p) {
  switch (p) {
    case Pipeline::direct: return "direct";
    case Pipeline::theory: return "theory";
    case Pipeline::theory_plus_to: return "theory_plus_to";
    case Pipeline::ct: return "ct";
    case Pipeline::ct_plus_to: return "ct_plus_to";
    case Pipeline::act: return "act";
  }
  return "?";
}

inline Pipeline parse_pipeline(const std::string& name) {
  for (auto p : {Pipeline::direct, Pipeline::theory, Pipeline::theory_plus_to, Pipeline::ct, Pipeline::ct_plus_to,
                 Pipeline::act})
    if (name == to_string(p)) return p;
  throw ConfigError("unknown pipeline '" + name + "' (direct, theory, theory_plus_to, ct, ct_plus_to, act)");
}

struct PipelineOutcome {
  Pipeline pipeline = Pipeline::direct;
  RetrievalResult final_metrics;
  std::vector<RoundRecord> stage2_records;
  std::vector<ModelRoundRecord> stage3_records;
  std::vector<SelectionEvent> trace;
  EncoderParams m_src;
  EncoderParams m_ada;
  EncoderParams final_model;
  std::map<std::string, double> timings;
};

/// One dataset, one configuration, one seed. Stage 1 and stage 2 are computed
/// once and shared by every pipeline run through the same experiment.
class Experiment {
 public:
  Experiment(FeatureSet source, FeatureSet target, RunConfig cfg)
      : source_(std::move(source)), target_(std::move(target)), cfg_(std::move(cfg)) {
    source_.validate();
    target_.validate();
    cfg_.adapt.seed_stages(cfg_.seed);
    if (cfg_.adapt.cluster.backend == ClusterBackend::kmeans && cfg_.adapt.cluster.kmeans_k == 0)
      cfg_.adapt.cluster.kmeans_k = static_cast<int>(target_.n_identities());
    cfg_.adapt.validate();
    evaluator_.emplace(target_, split_query_gallery(target_, cfg_.queries_per_identity, cfg_.split_seed));
    unlabeled_ = strip_labels(target_);
    monitor_ = make_monitor(*evaluator_, target_.features);
  }

  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const RunConfig& config() const { return cfg_; }
  const TargetEvaluator& evaluator() const { return *evaluator_; }
  const FeatureSet& target() const { return target_; }
  const FeatureSet& source() const { return source_; }

  const EncoderParams& source_model() {
    if (!m_src_) {
      const auto t0 = std::chrono::steady_clock::now();
      m_src_ = train_source(source_, initial_encoder(source_, cfg_.adapt.encoder, derive_seed(cfg_.seed, 0)),
                            cfg_.adapt.stage1);
      stage_seconds_["stage1"] = seconds_since(t0);
    }
    return *m_src_;
  }

  const StageResult& adapted() {
    if (!stage2_) {
      const EncoderParams& m_src = source_model();
      const auto t0 = std::chrono::steady_clock::now();
      stage2_ = adapt_stage2(m_src, unlabeled_, source_.features, cfg_.adapt, monitor_);
      stage_seconds_["stage2"] = seconds_since(t0);
    }
    return *stage2_;
  }

  PipelineOutcome run(Pipeline pipeline) {
    PipelineOutcome out;
    out.pipeline = pipeline;
    out.m_src = source_model();
    if (pipeline == Pipeline::direct) {
      out.m_ada = out.m_src;
      out.final_model = out.m_src;
    } else {
      const StageResult& s2 = adapted();
      out.m_ada = s2.model;
      out.stage2_records = s2.records;
      const auto t0 = std::chrono::steady_clock::now();
      switch (pipeline) {
        case Pipeline::theory:
          out.final_model = s2.model;
          break;
        case Pipeline::theory_plus_to: {
          auto r = adapt_with_outliers(s2.model, unlabeled_, source_.features, cfg_.adapt, monitor_);
          out.final_model = std::move(r.model);
          out.stage3_records = std::move(r.records);
          break;
        }
        case Pipeline::ct:
        case Pipeline::ct_plus_to: {
          const CtOptions opt{.include_outliers = pipeline == Pipeline::ct_plus_to};
          auto r = run_ct(s2.model, unlabeled_, source_.features, cfg_.adapt, opt, monitor_);
          out.final_model = std::move(r.model);
          out.stage3_records = std::move(r.records);
          out.trace = std::move(r.trace);
          break;
        }
        case Pipeline::act: {
          auto r = run_act(s2.model, unlabeled_, source_.features, cfg_.adapt, monitor_);
          out.final_model = std::move(r.model);
          out.stage3_records = std::move(r.records);
          out.trace = std::move(r.trace);
          break;
        }
        case Pipeline::direct:
          break;
      }
      out.timings["stage3"] = seconds_since(t0);
    }
    for (const auto& [k, v] : stage_seconds_) out.timings[k] = v;
    out.final_metrics = evaluator_->retrieval(forward(out.final_model, target_.features));
    return out;
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  FeatureSet source_;
  FeatureSet target_;
  RunConfig cfg_;
  std::optional<TargetEvaluator> evaluator_;
  UnlabeledSet unlabeled_;
  Monitor monitor_;
  std::optional<EncoderParams> m_src_;
  std::optional<StageResult> stage2_;
  std::map<std::string, double> stage_seconds_;
};

inline nlohmann::json metrics_json(const PipelineOutcome& o) {
  return {{"pipeline", to_string(o.pipeline)},
          {"map", o.final_metrics.map},
          {"rank1", o.final_metrics.rank1()},
          {"cmc", o.final_metrics.cmc},
          {"n_queries", o.final_metrics.n_queries},
          {"n_skipped", o.final_metrics.n_skipped}};
}

/// Writes round_records.csv, act_records.csv, selection_trace.csv, metrics.json and
/// the three checkpoints into `dir`. Returns the file names written.
inline std::vector<std::string> write_run_artifacts(const std::filesystem::path& dir, const PipelineOutcome& o) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_for_write((dir / "round_records.csv").string());
    write_round_records_csv(os, o.stage2_records);
  }
  {
    auto os = open_for_write((dir / "act_records.csv").string());
    write_act_records_csv(os, o.stage3_records);
  }
  {
    auto os = open_for_write((dir / "selection_trace.csv").string());
    write_selection_trace_csv(os, o.trace);
  }
  {
    auto os = open_for_write((dir / "metrics.json").string());
    os << metrics_json(o).dump(2) << '\n';
  }
  save_checkpoint((dir / "m_src.json").string(), o.m_src);
  save_checkpoint((dir / "m_ada.json").string(), o.m_ada);
  save_checkpoint((dir / "final_model.json").string(), o.final_model);
  return {"round_records.csv", "act_records.csv", "selection_trace.csv", "metrics.json",
          "m_src.json",        "m_ada.json",      "final_model.json"};
}

/// Dataset directory layout written by `synth`.
inline constexpr const char* kDatasetFile = "dataset.csv";
inline constexpr const char* kSynthSidecar = "synth_config.json";

inline void write_dataset_dir(const std::filesystem::path& dir, const DomainPair& pair, const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_for_write((dir / kDatasetFile).string());
    write_dataset_csv(os, pair.source, pair.target);
  }
  auto os = open_for_write((dir / kSynthSidecar).string());
  os << to_json(cfg).dump(2) << '\n';
}

inline std::pair<FeatureSet, FeatureSet> read_dataset_dir(const std::filesystem::path& dir) {
  std::ifstream is(dir / kDatasetFile, std::ios::binary);
  if (!is) throw ConfigError("dataset not found: " + (dir / kDatasetFile).string());
  return read_dataset_csv(is);
}

}  // namespace act
