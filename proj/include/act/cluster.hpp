#pragma once

#include "act/common.hpp"
#include "act/metric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

namespace act {

inline constexpr int kOutlier = -1;

/// Cluster id per sample, or kOutlier. Ids are contiguous 0..n_clusters-1.
struct ClusterAssignment {
  std::vector<int> labels;
  int n_clusters = 0;

  bool is_outlier(std::size_t i) const { return labels[i] == kOutlier; }
  std::size_t n_outliers() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kOutlier));
  }
  std::vector<std::size_t> inliers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != kOutlier) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> outliers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == kOutlier) out.push_back(i);
    return out;
  }
};

enum class ClusterBackend { dbscan, kmeans };

struct ClusterConfig {
  int min_pts = 4;
  /// Fraction of the smallest pairwise distances averaged into eps.
  double rho = 1.6e-3;
  /// Absolute eps; replaces the rho rule when set.
  std::optional<double> eps_override;
  ClusterBackend backend = ClusterBackend::dbscan;
  /// 0 means "number of target identities", resolved by the caller.
  int kmeans_k = 0;
  /// Share u of samples farthest from their k-means centroid that become outliers.
  double outlier_frac = 0.2;

  void validate() const {
    require(min_pts >= 1, "cluster: min_pts must be >= 1");
    require(rho > 0.0 && rho < 1.0, "cluster: rho must lie in (0,1)");
    require(!eps_override || (std::isfinite(*eps_override) && *eps_override >= 0.0), "cluster: eps must be >= 0");
    require(kmeans_k >= 0, "cluster: kmeans_k must be >= 0");
    require(outlier_frac >= 0.0 && outlier_frac < 1.0, "cluster: outlier_frac must lie in [0,1)");
  }
};

struct EpsEstimate {
  double eps = 0.0;
  /// Set when eps came out as zero (duplicate points dominate).
  bool degenerate = false;
};

/// Mean of the ceil(rho * n * (n-1)) smallest off-diagonal entries of `d`.
inline EpsEstimate compute_eps(const DistanceMatrix& d, double rho) {
  require(d.n() >= 2, "compute_eps: need at least two samples");
  require(rho > 0.0 && rho < 1.0, "compute_eps: rho must lie in (0,1)");
  const std::size_t n = d.n();
  std::vector<double> entries;
  entries.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) entries.push_back(d(i, j));
  auto count = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(entries.size())));
  count = std::clamp<std::size_t>(count, 1, entries.size());
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(count - 1), entries.end());
  std::sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(count));
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) sum += entries[i];
  EpsEstimate out;
  out.eps = sum / static_cast<double>(count);
  out.degenerate = out.eps == 0.0;
  return out;
}

/// DBSCAN on a precomputed distance matrix. A point is core when at least
/// `min_pts` samples (itself included) lie within `eps`. Clusters are numbered
/// in order of their lowest-index core point; a border point reachable from
/// several clusters joins the cluster of its lowest-index core neighbour.
inline ClusterAssignment dbscan(const DistanceMatrix& d, double eps, int min_pts) {
  require(eps >= 0.0 && std::isfinite(eps), "dbscan: eps must be finite and >= 0");
  require(min_pts >= 1, "dbscan: min_pts must be >= 1");
  const std::size_t n = d.n();
  std::vector<std::vector<std::size_t>> neighbors(n);
  std::vector<bool> core(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      if (d(i, j) <= eps) neighbors[i].push_back(j);
    core[i] = neighbors[i].size() >= static_cast<std::size_t>(min_pts);
  }

  ClusterAssignment out;
  out.labels.assign(n, kOutlier);
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!core[seed] || out.labels[seed] != kOutlier) continue;
    const int id = out.n_clusters++;
    std::queue<std::size_t> frontier;
    out.labels[seed] = id;
    frontier.push(seed);
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop();
      for (auto q : neighbors[p]) {
        if (core[q] && out.labels[q] == kOutlier) {
          out.labels[q] = id;
          frontier.push(q);
        }
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (auto j : neighbors[i]) {  // ascending index
      if (core[j]) {
        out.labels[i] = out.labels[j];
        break;
      }
    }
  }
  return out;
}

/// Full label vector: inliers keep their cluster, each outlier takes the
/// cluster of its nearest inlier (ties to the lowest inlier index).
inline std::vector<int> assign_outlier_labels(const DistanceMatrix& d, const ClusterAssignment& assignment) {
  require(assignment.labels.size() == d.n(), "assign_outlier_labels: size mismatch");
  const auto inliers = assignment.inliers();
  if (inliers.empty()) {
    throw StageError("assign_outlier_labels: no inliers; re-cluster with a larger eps (raise rho)");
  }
  std::vector<int> labels = assignment.labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (assignment.labels[i] != kOutlier) continue;
    std::size_t best = inliers.front();
    for (auto j : inliers)
      if (d(i, j) < d(i, best)) best = j;
    labels[i] = assignment.labels[best];
  }
  return labels;
}

/// Lloyd's k-means with farthest-point seeding (first centre drawn from `seed`),
/// then the ceil(u*n) samples farthest from their centroid become outliers.
/// Distance ties among outlier candidates go to the lowest index.
inline ClusterAssignment kmeans_with_outliers(const Matrix& x, int k, double u, std::uint64_t seed,
                                              int max_iterations = 100) {
  const auto n = static_cast<std::size_t>(x.rows());
  require(k >= 1 && static_cast<std::size_t>(k) <= n, "kmeans: k must satisfy 1 <= k <= n");
  require(u >= 0.0 && u < 1.0, "kmeans: outlier fraction must lie in [0,1)");
  require(x.allFinite(), "kmeans: non-finite input");

  auto sq = [&](std::size_t i, const Matrix& c, Eigen::Index r) {
    return (x.row(static_cast<Eigen::Index>(i)) - c.row(r)).squaredNorm();
  };

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> chosen{pick(rng)};
  std::vector<bool> is_centre(n, false);
  is_centre[chosen.front()] = true;
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  Matrix centres(k, x.cols());
  centres.row(0) = x.row(static_cast<Eigen::Index>(chosen.front()));
  for (int c = 1; c < k; ++c) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], sq(i, centres, c - 1));
      if (is_centre[i]) continue;
      if (best == n || min_dist[i] > min_dist[best]) best = i;
    }
    is_centre[best] = true;
    centres.row(c) = x.row(static_cast<Eigen::Index>(best));
  }

  std::vector<int> assign(n, -1);
  std::vector<double> dist(n, 0.0);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq(i, centres, 0);
      for (int c = 1; c < k; ++c) {
        const double dc = sq(i, centres, c);
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      changed |= assign[i] != best;
      assign[i] = best;
      dist[i] = best_d;
    }
    if (!changed && iter > 0) break;

    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centres.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: reseed at the sample farthest from its centroid.
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      centres.row(c) = x.row(static_cast<Eigen::Index>(far));
      dist[far] = 0.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) dist[i] = sq(i, centres, assign[i]);

  const auto n_out = static_cast<std::size_t>(std::ceil(u * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  std::vector<int> raw = assign;
  for (std::size_t r = 0; r < n_out; ++r) raw[order[r]] = kOutlier;

  // Renumber surviving clusters by first appearance so ids stay contiguous.
  ClusterAssignment out;
  out.labels.assign(n, kOutlier);
  std::vector<int> remap(static_cast<std::size_t>(k), -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] == kOutlier) continue;
    auto& id = remap[static_cast<std::size_t>(raw[i])];
    if (id < 0) id = out.n_clusters++;
    out.labels[i] = id;
  }
  return out;
}

/// `sample_index,cluster_or_-1` rows with a header.
inline void write_assignment_csv(std::ostream& os, const ClusterAssignment& a) {
  os << "sample_index,cluster\n";
  for (std::size_t i = 0; i < a.labels.size(); ++i) os << i << ',' << a.labels[i] << '\n';
}

}  // namespace act
