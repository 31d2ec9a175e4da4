#pragma once

// Source training and clustering-based adaptation:
//   stage 1: triplet + cross-entropy on labelled source data -> M_src
//   stage 2: r2 rounds of {embed target, cluster, fine-tune on pseudo-labelled inliers} -> M_ada

#include "act/cluster.hpp"
#include "act/common.hpp"
#include "act/datasynth.hpp"
#include "act/encoder.hpp"
#include "act/eval.hpp"
#include "act/metric.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace act {

struct AdaptConfig {
  TrainConfig stage1{.margin = 0.3, .P = 16, .K_inst = 4, .lr = 3e-4, .epochs = 30, .seed = 0};
  TrainConfig stage2{.margin = 0.3, .P = 16, .K_inst = 4, .lr = 6e-5, .epochs = 5, .seed = 0};
  TrainConfig stage3{.margin = 0.3, .P = 16, .K_inst = 4, .lr = 6e-5, .epochs = 10, .seed = 0};
  int r2 = 8;
  int r3 = 5;
  MetricConfig metric;
  ClusterConfig cluster;
  EncoderSpec encoder;
  /// Replaces the small-loss ratio schedule with a constant when set.
  std::optional<double> fixed_ratio;

  void validate() const {
    stage1.validate();
    stage2.validate();
    stage3.validate();
    require(r2 >= 0 && r3 >= 0, "adapt: round counts must be >= 0");
    metric.validate();
    cluster.validate();
    require(!fixed_ratio || (*fixed_ratio > 0.0 && *fixed_ratio <= 1.0), "adapt: fixed ratio must lie in (0,1]");
  }

  /// Gives each stage its own RNG stream derived from one run seed.
  void seed_stages(std::uint64_t seed) {
    stage1.seed = derive_seed(seed, 1);
    stage2.seed = derive_seed(seed, 2);
    stage3.seed = derive_seed(seed, 3);
  }
};

/// Metrics of one clustering round. map/rank1 are NaN when no monitor is attached.
struct RoundRecord {
  int round = 0;
  double f_score = 0.0;
  std::size_t n_outliers = 0;
  int n_clusters = 0;
  double map = 0.0;
  double rank1 = 0.0;
};

/// Per-model metrics of a stage-3 round.
struct ModelRoundRecord {
  int round = 0;
  std::string model;  // "main" or "co"
  double map = 0.0;
  double rank1 = 0.0;
  double f_score = 0.0;
  std::size_t n_outliers = 0;
};

/// Evaluation hooks. Adaptation code never touches target identities; the
/// caller supplies these closures over a TargetEvaluator.
struct Monitor {
  std::function<RetrievalResult(const EncoderParams&)> retrieval;
  std::function<double(std::span<const int>)> f_score;

  RetrievalResult evaluate(const EncoderParams& model) const {
    if (retrieval) return retrieval(model);
    RetrievalResult r;
    r.map = std::numeric_limits<double>::quiet_NaN();
    r.cmc = {std::numeric_limits<double>::quiet_NaN()};
    return r;
  }
  double score(std::span<const int> labels) const {
    return f_score ? f_score(labels) : std::numeric_limits<double>::quiet_NaN();
  }
};

inline Monitor make_monitor(const TargetEvaluator& evaluator, const Matrix& target_features) {
  Monitor m;
  m.retrieval = [&evaluator, &target_features](const EncoderParams& model) {
    return evaluator.retrieval(forward(model, target_features));
  };
  m.f_score = [&evaluator](std::span<const int> labels) { return evaluator.clustering_f_score(labels); };
  return m;
}

/// Element-wise a += b for congruent parameter sets.
inline void accumulate(EncoderParams& a, const EncoderParams& b) {
  zip_tensors([](auto& x, const auto& y) { x += y; }, a, b);
}

inline std::size_t iterations_per_epoch(std::size_t pool_size, int batch_size) {
  return std::max<std::size_t>(1, (pool_size + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

/// Labelled subset of a feature matrix: parallel index and label lists.
struct LabeledPool {
  std::vector<std::size_t> indices;
  std::vector<int> labels;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  std::size_t n_labels() const {
    std::vector<int> l = labels;
    std::sort(l.begin(), l.end());
    return static_cast<std::size_t>(std::unique(l.begin(), l.end()) - l.begin());
  }
  void append(const LabeledPool& other) {
    indices.insert(indices.end(), other.indices.begin(), other.indices.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

/// Keeps only labels with at least `min_count` members.
inline LabeledPool drop_small_labels(const LabeledPool& pool, std::size_t min_count = 2) {
  std::map<int, std::size_t> counts;
  for (int l : pool.labels) ++counts[l];
  LabeledPool out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (counts[pool.labels[i]] >= min_count) {
      out.indices.push_back(pool.indices[i]);
      out.labels.push_back(pool.labels[i]);
    }
  }
  return out;
}

/// PK batch from a pool, as indices into the feature matrix plus labels. P is
/// clamped to the number of labels available.
inline LabeledPool sample_pk_batch(const LabeledPool& pool, const TrainConfig& cfg, Rng& rng) {
  const int P = std::min<int>(cfg.P, static_cast<int>(pool.n_labels()));
  const auto picks = pk_sample(pool.labels, P, cfg.K_inst, rng);
  LabeledPool batch;
  for (auto p : picks) {
    batch.indices.push_back(pool.indices[p]);
    batch.labels.push_back(pool.labels[p]);
  }
  return batch;
}

/// One Adam step on the triplet loss of `batch`. Returns false (and leaves
/// the model alone) when no anchor in the batch has both a positive and a negative.
inline bool triplet_step(EncoderParams& model, AdamState& opt, const Matrix& features, const LabeledPool& batch,
                         const TrainConfig& cfg) {
  const Matrix x = gather_rows(features, batch.indices);
  auto g = triplet_grad(model, x, batch.labels, cfg.margin, /*strict=*/false);
  if (g.valid_anchors == 0) return false;
  std::tie(opt, model) = opt_step(std::move(opt), std::move(model), g.grads, cfg.lr);
  return true;
}

inline void train_triplet_epochs(EncoderParams& model, AdamState& opt, const Matrix& features, const LabeledPool& pool,
                                 const TrainConfig& cfg, int epochs, Rng& rng) {
  if (pool.n_labels() < 2) throw StageError("fine-tuning needs at least two pseudo identities with two samples each");
  const std::size_t iters = iterations_per_epoch(pool.size(), cfg.batch_size());
  for (int e = 0; e < epochs; ++e)
    for (std::size_t it = 0; it < iters; ++it) triplet_step(model, opt, features, sample_pk_batch(pool, cfg, rng), cfg);
}

inline EncoderParams initial_encoder(const FeatureSet& source, const EncoderSpec& spec, std::uint64_t seed) {
  return init_encoder(source.dim(), spec, static_cast<int>(source.n_identities()), seed);
}

/// Stage 1: e1 epochs of PK batches minimising triplet + cross-entropy.
inline EncoderParams train_source(const FeatureSet& source, EncoderParams model, const TrainConfig& cfg) {
  cfg.validate();
  source.validate();
  require(source.domain == Domain::source, "train_source: expects the labelled source domain");
  require(model.head.has_value(), "train_source: encoder needs a classifier head");

  std::map<int, int> class_of;
  for (int id : source.identities) class_of.emplace(id, 0);
  int next = 0;
  for (auto& kv : class_of) kv.second = next++;
  require(static_cast<Eigen::Index>(class_of.size()) == model.head->weight.rows(),
          "train_source: head size does not match the number of source identities");
  std::vector<int> classes;
  for (int id : source.identities) classes.push_back(class_of[id]);

  Rng rng(cfg.seed);
  AdamState opt = adam_init(model);
  const std::size_t iters = iterations_per_epoch(source.size(), cfg.batch_size());
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = pk_sample(classes, cfg.P, cfg.K_inst, rng);
      const Matrix x = gather_rows(source.features, batch);
      const std::vector<int> y = gather<int>(classes, batch);
      auto tri = triplet_grad(model, x, y, cfg.margin);
      const auto ce = ce_loss_and_grad(model, x, y);
      accumulate(tri.grads, ce.grads);
      std::tie(opt, model) = opt_step(std::move(opt), std::move(model), tri.grads, cfg.lr);
    }
  }
  return model;
}

struct ClusterResult {
  ClusterAssignment assignment;
  /// Label for every target sample: cluster id for inliers, nearest-inlier cluster for outliers.
  std::vector<int> pseudo_labels;
  double eps = 0.0;
  bool eps_degenerate = false;

  LabeledPool inlier_pool() const {
    LabeledPool p;
    for (auto i : assignment.inliers()) {
      p.indices.push_back(i);
      p.labels.push_back(pseudo_labels[i]);
    }
    return p;
  }
  LabeledPool outlier_pool() const {
    LabeledPool p;
    for (auto i : assignment.outliers()) {
      p.indices.push_back(i);
      p.labels.push_back(pseudo_labels[i]);
    }
    return p;
  }
};

/// Embeds the target (and source, for the proximity term), builds the blended
/// clustering distance, runs the configured backend and labels the outliers.
inline ClusterResult cluster_target(const EncoderParams& model, const Matrix& target_features,
                                    const Matrix& source_features, const MetricConfig& metric_cfg,
                                    const ClusterConfig& cluster_cfg, std::uint64_t kmeans_seed = 0) {
  metric_cfg.validate();
  cluster_cfg.validate();
  const Matrix emb = forward(model, target_features);
  const DistanceMatrix sq = pairwise_sq_euclidean(emb);
  ClusterResult out;

  if (cluster_cfg.backend == ClusterBackend::kmeans) {
    const int k = cluster_cfg.kmeans_k;
    require(k >= 1, "cluster_target: kmeans_k must be resolved to a positive count");
    out.assignment = kmeans_with_outliers(emb, k, cluster_cfg.outlier_frac, kmeans_seed);
    out.pseudo_labels = assign_outlier_labels(sq, out.assignment);
    return out;
  }

  DistanceMatrix d;
  if (sq.values.isZero(0.0)) {
    // Every embedding coincides; neighbour ranks are pure ties, so the whole set is one dense blob.
    d.values = Matrix::Zero(sq.values.rows(), sq.values.cols());
  } else {
    const int k = metric_cfg.effective_k(sq.n());
    const DistanceMatrix jaccard = jaccard_distance(similarity_matrix(sq, k));
    const Vector proximity = source_proximity(emb, forward(model, source_features));
    d = clustering_distance(jaccard, proximity, metric_cfg.lambda);
  }
  if (cluster_cfg.eps_override) {
    out.eps = *cluster_cfg.eps_override;
  } else {
    const auto est = compute_eps(d, cluster_cfg.rho);
    out.eps = est.eps;
    out.eps_degenerate = est.degenerate;
  }
  out.assignment = dbscan(d, out.eps, cluster_cfg.min_pts);
  if (out.assignment.n_clusters == 0) {
    throw StageError("cluster_target: DBSCAN found no clusters (eps=" + std::to_string(out.eps) +
                     "); increase rho or min_pts tolerance");
  }
  out.pseudo_labels = assign_outlier_labels(d, out.assignment);
  return out;
}

struct StageResult {
  EncoderParams model;
  std::vector<RoundRecord> records;
};

/// Stage 2. Outliers are discarded; pseudo identities with fewer than two
/// inliers are dropped from sampling for that round.
inline StageResult adapt_stage2(const EncoderParams& m_src, const UnlabeledSet& target, const Matrix& source_features,
                                const AdaptConfig& cfg, const Monitor& monitor = {}) {
  cfg.validate();
  StageResult out{m_src, {}};
  Rng rng(cfg.stage2.seed);
  AdamState opt = adam_init(out.model);
  for (int round = 0; round < cfg.r2; ++round) {
    const ClusterResult cr = cluster_target(out.model, target.features, source_features, cfg.metric, cfg.cluster,
                                            derive_seed(cfg.stage2.seed, 1000 + static_cast<std::uint64_t>(round)));
    const LabeledPool pool = drop_small_labels(cr.inlier_pool());
    if (pool.empty()) {
      throw StageError("adapt_stage2: round " + std::to_string(round) + " produced no usable inliers (" +
                       std::to_string(cr.assignment.n_outliers()) + " outliers, eps=" + std::to_string(cr.eps) + ")");
    }
    train_triplet_epochs(out.model, opt, target.features, pool, cfg.stage2, cfg.stage2.epochs, rng);
    const auto r = monitor.evaluate(out.model);
    out.records.push_back({round, monitor.score(cr.pseudo_labels), cr.assignment.n_outliers(),
                           cr.assignment.n_clusters, r.map, r.rank1()});
  }
  return out;
}

struct Stage3Result {
  EncoderParams model;
  std::vector<ModelRoundRecord> records;
};

/// Stage-3 ablation without co-teaching: outliers take their nearest-inlier
/// labels and are merged into the training pool of a single model.
inline Stage3Result adapt_with_outliers(const EncoderParams& m_ada, const UnlabeledSet& target,
                                        const Matrix& source_features, const AdaptConfig& cfg,
                                        const Monitor& monitor = {}) {
  cfg.validate();
  Stage3Result out{m_ada, {}};
  Rng rng(cfg.stage3.seed);
  AdamState opt = adam_init(out.model);
  for (int round = 0; round < cfg.r3; ++round) {
    const ClusterResult cr = cluster_target(out.model, target.features, source_features, cfg.metric, cfg.cluster,
                                            derive_seed(cfg.stage3.seed, 1000 + static_cast<std::uint64_t>(round)));
    LabeledPool pool = cr.inlier_pool();
    pool.append(cr.outlier_pool());
    pool = drop_small_labels(pool);
    train_triplet_epochs(out.model, opt, target.features, pool, cfg.stage3, cfg.stage3.epochs, rng);
    const auto r = monitor.evaluate(out.model);
    out.records.push_back(
        {round, "main", r.map, r.rank1(), monitor.score(cr.pseudo_labels), cr.assignment.n_outliers()});
  }
  return out;
}

}  // namespace act
