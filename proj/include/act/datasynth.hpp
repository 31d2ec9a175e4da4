#pragma once

// Synthetic two-domain identity data and query/gallery splits.
//
// Identity means sit on a sphere of radius `radius`. Samples are mean plus
// isotropic Gaussian noise. Target samples are drawn the same way from their
// own identities and then pushed through a fixed affine map (rotation, per-axis
// scaling, translation) whose magnitude is `shift_scale`. A `corrupt_frac`
// share of target samples additionally receives large-variance noise confined
// to a random low-rank subspace; these are the hard samples that density
// clustering tends to leave out.

#include "act/common.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace act {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

struct Sample {
  Vector feature;
  int identity = 0;
  int camera = 0;
  Domain domain = Domain::source;
};

/// Features of one domain, one row per sample. Identities are ground truth:
/// adaptation code only ever sees an UnlabeledSet.
struct FeatureSet {
  Domain domain = Domain::source;
  Matrix features;
  std::vector<int> identities;
  std::vector<int> cameras;

  std::size_t size() const { return identities.size(); }
  int dim() const { return static_cast<int>(features.cols()); }

  Sample sample(std::size_t i) const {
    return {features.row(static_cast<Eigen::Index>(i)).transpose(), identities[i], cameras[i], domain};
  }

  std::size_t n_identities() const {
    std::vector<int> ids = identities;
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }

  void validate() const {
    require(static_cast<std::size_t>(features.rows()) == identities.size() &&
                identities.size() == cameras.size(),
            "feature set: row count, identities and cameras disagree");
    require(features.allFinite(), "feature set: non-finite feature entry");
    for (std::size_t i = 0; i < size(); ++i) {
      require(identities[i] >= 0, "feature set: negative identity at row " + std::to_string(i));
      require(cameras[i] >= 0, "feature set: negative camera at row " + std::to_string(i));
    }
  }

  friend bool operator==(const FeatureSet& a, const FeatureSet& b) {
    return a.domain == b.domain && a.identities == b.identities && a.cameras == b.cameras &&
           a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
           a.features == b.features;
  }
};

/// Target data as the adaptation stages see it: no identities.
struct UnlabeledSet {
  Matrix features;
  std::vector<int> cameras;

  std::size_t size() const { return cameras.size(); }
};

inline UnlabeledSet strip_labels(const FeatureSet& set) { return {set.features, set.cameras}; }

struct SynthConfig {
  int n_identities_source = 50;
  int n_identities_target = 50;
  int samples_per_identity = 10;
  int dim = 16;
  int n_cameras = 6;
  double shift_scale = 0.5;
  double corrupt_frac = 0.15;
  double noise_sigma = 0.125;
  double radius = 1.0;
  double corrupt_sigma = 1.0;
  int corrupt_rank = 2;
  std::uint64_t seed = 1;

  void validate() const {
    require(n_identities_source >= 1, "synth: n_identities_source must be >= 1");
    require(n_identities_target >= 1, "synth: n_identities_target must be >= 1");
    require(samples_per_identity >= 1, "synth: samples_per_identity must be >= 1");
    require(dim >= 1, "synth: dim must be >= 1");
    require(n_cameras >= 1, "synth: n_cameras must be >= 1");
    require(std::isfinite(shift_scale) && shift_scale >= 0, "synth: shift_scale must be a finite nonnegative number");
    require(corrupt_frac >= 0 && corrupt_frac <= 1, "synth: corrupt_frac must lie in [0,1]");
    require(std::isfinite(noise_sigma) && noise_sigma >= 0, "synth: noise_sigma must be a finite nonnegative number");
    require(std::isfinite(radius) && radius > 0, "synth: radius must be positive");
    require(std::isfinite(corrupt_sigma) && corrupt_sigma >= 0, "synth: corrupt_sigma must be nonnegative");
    require(corrupt_rank >= 1 && corrupt_rank <= dim, "synth: corrupt_rank must lie in [1, dim]");
  }
};

struct DomainPair {
  FeatureSet source;
  FeatureSet target;
  /// Which target rows received the hard-sample corruption. Evaluation only.
  std::vector<bool> target_corrupted;
};

namespace detail {

inline Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

inline Matrix sphere_points(Rng& rng, int count, int dim, double radius) {
  Matrix means = gaussian_matrix(rng, count, dim);
  for (Eigen::Index r = 0; r < means.rows(); ++r) {
    double norm = means.row(r).norm();
    while (norm == 0.0) {
      means.row(r) = gaussian_matrix(rng, 1, dim);
      norm = means.row(r).norm();
    }
    means.row(r) *= radius / norm;
  }
  return means;
}

inline FeatureSet draw_domain(Rng& rng, const Matrix& means, int first_identity, const SynthConfig& cfg,
                              Domain domain) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> camera(0, cfg.n_cameras - 1);
  const auto n = static_cast<Eigen::Index>(means.rows()) * cfg.samples_per_identity;
  FeatureSet set;
  set.domain = domain;
  set.features.resize(n, cfg.dim);
  set.identities.reserve(static_cast<std::size_t>(n));
  set.cameras.reserve(static_cast<std::size_t>(n));
  Eigen::Index row = 0;
  for (Eigen::Index id = 0; id < means.rows(); ++id) {
    for (int s = 0; s < cfg.samples_per_identity; ++s, ++row) {
      for (int c = 0; c < cfg.dim; ++c) set.features(row, c) = means(id, c) + cfg.noise_sigma * normal(rng);
      set.identities.push_back(first_identity + static_cast<int>(id));
      set.cameras.push_back(camera(rng));
    }
  }
  return set;
}

}  // namespace detail

/// Rotation (Cayley transform of a random skew matrix), per-axis log-normal
/// scaling and a translation; all three vanish at shift_scale = 0.
struct AffineShift {
  Matrix linear;
  Vector translation;
};

inline AffineShift draw_affine_shift(Rng& rng, int dim, double shift_scale, double radius) {
  const Matrix g = detail::gaussian_matrix(rng, dim, dim) / std::sqrt(static_cast<double>(dim));
  const Matrix skew = 0.5 * shift_scale * (g - g.transpose());
  const Matrix eye = Matrix::Identity(dim, dim);
  const Matrix rotation = (eye - skew).partialPivLu().solve(eye + skew);
  const Matrix log_scales = detail::gaussian_matrix(rng, 1, dim);
  Vector scales(dim);
  for (int c = 0; c < dim; ++c) scales(c) = std::exp(shift_scale * log_scales(0, c));
  const Matrix offset = detail::gaussian_matrix(rng, 1, dim);
  AffineShift shift;
  shift.linear = rotation * scales.asDiagonal();
  shift.translation = shift_scale * radius / std::sqrt(static_cast<double>(dim)) * offset.row(0).transpose();
  return shift;
}

inline DomainPair generate_domain_pair(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  const Matrix source_means = detail::sphere_points(rng, cfg.n_identities_source, cfg.dim, cfg.radius);
  const Matrix target_means = detail::sphere_points(rng, cfg.n_identities_target, cfg.dim, cfg.radius);
  const AffineShift shift = draw_affine_shift(rng, cfg.dim, cfg.shift_scale, cfg.radius);
  const Matrix corruption_basis =
      detail::gaussian_matrix(rng, cfg.dim, cfg.corrupt_rank).householderQr().householderQ() *
      Matrix::Identity(cfg.dim, cfg.corrupt_rank);

  DomainPair pair;
  pair.source = detail::draw_domain(rng, source_means, 0, cfg, Domain::source);
  pair.target = detail::draw_domain(rng, target_means, cfg.n_identities_source, cfg, Domain::target);

  if (cfg.shift_scale != 0.0) {
    Matrix mapped = pair.target.features * shift.linear.transpose();
    mapped.rowwise() += shift.translation.transpose();
    pair.target.features = std::move(mapped);
  }

  const std::size_t n_target = pair.target.size();
  const auto n_corrupt = static_cast<std::size_t>(std::llround(cfg.corrupt_frac * static_cast<double>(n_target)));
  std::vector<std::size_t> order(n_target);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  pair.target_corrupted.assign(n_target, false);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t c = 0; c < n_corrupt; ++c) {
    const auto row = static_cast<Eigen::Index>(order[c]);
    Vector z(cfg.corrupt_rank);
    for (int r = 0; r < cfg.corrupt_rank; ++r) z(r) = normal(rng);
    pair.target.features.row(row) += cfg.corrupt_sigma * (corruption_basis * z).transpose();
    pair.target_corrupted[order[c]] = true;
  }
  return pair;
}

struct EvalSplit {
  std::vector<std::size_t> query_indices;
  std::vector<std::size_t> gallery_indices;
  /// Camera ids used by the evaluation protocol, one per sample of the split set.
  /// Equal to the set's cameras except where a query had to be moved to a
  /// different camera to guarantee a cross-camera gallery match.
  std::vector<int> cameras;
};

inline EvalSplit split_query_gallery(const FeatureSet& set, int queries_per_identity, std::uint64_t seed) {
  require(queries_per_identity >= 1, "split: queries_per_identity must be >= 1");
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < set.size(); ++i) by_identity[set.identities[i]].push_back(i);

  int n_cameras = 2;
  for (int c : set.cameras) n_cameras = std::max(n_cameras, c + 1);

  Rng rng(seed);
  EvalSplit split;
  split.cameras = set.cameras;
  for (auto& [identity, members] : by_identity) {
    if (members.size() <= static_cast<std::size_t>(queries_per_identity)) {
      throw ConfigError("split: identity " + std::to_string(identity) + " has " + std::to_string(members.size()) +
                        " samples, needs more than " + std::to_string(queries_per_identity));
    }
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<std::size_t> queries(members.begin(), members.begin() + queries_per_identity);
    std::vector<std::size_t> gallery(members.begin() + queries_per_identity, members.end());
    std::sort(queries.begin(), queries.end());
    std::sort(gallery.begin(), gallery.end());
    for (auto q : queries) {
      const bool has_cross = std::any_of(gallery.begin(), gallery.end(),
                                         [&](std::size_t g) { return split.cameras[g] != split.cameras[q]; });
      if (!has_cross) split.cameras[q] = (split.cameras[gallery.front()] + 1) % n_cameras;
    }
    split.query_indices.insert(split.query_indices.end(), queries.begin(), queries.end());
    split.gallery_indices.insert(split.gallery_indices.end(), gallery.begin(), gallery.end());
  }
  std::sort(split.query_indices.begin(), split.query_indices.end());
  std::sort(split.gallery_indices.begin(), split.gallery_indices.end());
  return split;
}

}  // namespace act
