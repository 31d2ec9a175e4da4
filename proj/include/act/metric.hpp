#pragma once

// Clustering distance over target embeddings:
//
//   M[i][j] = exp(-|x_i - x_j|^2)  if j is in the refined k-reciprocal set R*(i,k), else 0
//   d_J(i,j) = 1 - sum_k min(M[i][k], M[j][k]) / sum_k max(M[i][k], M[j][k])
//   d_W(i)   = 1 - exp(-|x_i - nearest source embedding|^2)
//   d(i,j)   = lambda * (d_W(i) + d_W(j)) + (1 - lambda) * d_J(i,j)

#include "act/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <vector>

namespace act {

/// Symmetric, nonnegative, zero diagonal.
struct DistanceMatrix {
  Matrix values;

  std::size_t n() const { return static_cast<std::size_t>(values.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
};

/// Entries in [0,1], unit diagonal, not necessarily symmetric.
struct SimilarityMatrix {
  Matrix values;

  std::size_t n() const { return static_cast<std::size_t>(values.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
};

struct MetricConfig {
  int k = 20;
  double lambda = 0.1;

  void validate() const {
    require(k >= 1, "metric: k must be >= 1");
    require(lambda >= 0.0 && lambda <= 1.0, "metric: lambda must lie in [0,1]");
  }
  /// k clamped to n-1 for tiny sets.
  int effective_k(std::size_t n) const {
    return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), n > 0 ? n - 1 : 0));
  }
};

inline DistanceMatrix pairwise_sq_euclidean(const Matrix& x) {
  require(x.rows() >= 2, "pairwise distance needs at least two rows");
  require(x.allFinite(), "pairwise distance: non-finite input");
  const Eigen::Index n = x.rows();
  DistanceMatrix d{Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(j, c);
        s += diff * diff;
      }
      d.values(i, j) = s;
      d.values(j, i) = s;
    }
  }
  return d;
}

namespace detail {

/// The k nearest neighbours of i, excluding i, ordered by (distance, index).
inline std::vector<std::size_t> nearest(const DistanceMatrix& d, std::size_t i, std::size_t k) {
  std::vector<std::size_t> others;
  others.reserve(d.n() - 1);
  for (std::size_t j = 0; j < d.n(); ++j)
    if (j != i) others.push_back(j);
  k = std::min(k, others.size());
  auto closer = [&](std::size_t a, std::size_t b) {
    const double da = d(i, a), db = d(i, b);
    return da < db || (da == db && a < b);
  };
  std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k), others.end(), closer);
  others.resize(k);
  return others;
}

/// Neighbour lists for every sample at one neighbourhood size, kept sorted by index
/// for membership tests.
class NeighborTable {
 public:
  NeighborTable(const DistanceMatrix& d, std::size_t k) : sorted_(d.n()) {
    if (k == 0) return;
    for (std::size_t i = 0; i < d.n(); ++i) {
      sorted_[i] = nearest(d, i, k);
      std::sort(sorted_[i].begin(), sorted_[i].end());
    }
  }

  bool contains(std::size_t i, std::size_t j) const {
    return std::binary_search(sorted_[i].begin(), sorted_[i].end(), j);
  }

  /// R(i,k): neighbours j of i such that i is also a neighbour of j. Sorted.
  std::vector<std::size_t> reciprocal(std::size_t i) const {
    std::vector<std::size_t> out;
    for (auto j : sorted_[i])
      if (contains(j, i)) out.push_back(j);
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> sorted_;
};

inline std::vector<std::size_t> refine(std::size_t i, const NeighborTable& full, const NeighborTable& half) {
  const std::vector<std::size_t> base = full.reciprocal(i);
  std::vector<std::size_t> out = base;
  out.push_back(i);
  for (auto q : base) {
    const std::vector<std::size_t> candidate = half.reciprocal(q);
    std::vector<std::size_t> common;
    std::set_intersection(base.begin(), base.end(), candidate.begin(), candidate.end(), std::back_inserter(common));
    if (3 * common.size() >= 2 * candidate.size()) out.insert(out.end(), candidate.begin(), candidate.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline void check_k(const DistanceMatrix& d, int k) {
  require(k >= 1 && static_cast<std::size_t>(k) < d.n(),
          "k-reciprocal set: k must satisfy 1 <= k < n (k=" + std::to_string(k) + ", n=" + std::to_string(d.n()) + ")");
}

}  // namespace detail

/// Refined k-reciprocal set R*(i,k), sorted, always containing i.
/// Each q in R(i,k) contributes R(q, k/2) when at least two thirds of it lies in R(i,k).
inline std::vector<std::size_t> k_reciprocal_set(const DistanceMatrix& d, std::size_t i, int k) {
  detail::check_k(d, k);
  require(i < d.n(), "k-reciprocal set: index out of range");
  const auto ku = static_cast<std::size_t>(k);
  return detail::refine(i, detail::NeighborTable(d, ku), detail::NeighborTable(d, ku / 2));
}

inline std::vector<std::vector<std::size_t>> k_reciprocal_sets(const DistanceMatrix& d, int k) {
  detail::check_k(d, k);
  const auto ku = static_cast<std::size_t>(k);
  const detail::NeighborTable full(d, ku), half(d, ku / 2);
  std::vector<std::vector<std::size_t>> sets(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) sets[i] = detail::refine(i, full, half);
  return sets;
}

inline SimilarityMatrix similarity_matrix(const DistanceMatrix& sq_dist, int k) {
  const auto sets = k_reciprocal_sets(sq_dist, k);
  const auto n = static_cast<Eigen::Index>(sq_dist.n());
  SimilarityMatrix m{Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (auto j : sets[static_cast<std::size_t>(i)]) {
      const auto jj = static_cast<Eigen::Index>(j);
      m.values(i, jj) = std::exp(-sq_dist.values(i, jj));
    }
    m.values(i, i) = 1.0;
  }
  return m;
}

inline SimilarityMatrix similarity_matrix(const Matrix& x, int k) { return similarity_matrix(pairwise_sq_euclidean(x), k); }

inline DistanceMatrix jaccard_distance(const SimilarityMatrix& m) {
  const auto n = static_cast<Eigen::Index>(m.n());
  require(m.values.cols() == n, "jaccard: similarity matrix must be square");
  std::vector<std::vector<Eigen::Index>> support(static_cast<std::size_t>(n));
  Vector row_sum = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < n; ++k) {
      const double v = m.values(i, k);
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "jaccard: similarity entries must lie in [0,1]");
      if (v > 0.0) {
        support[static_cast<std::size_t>(i)].push_back(k);
        row_sum(i) += v;
      }
    }
  }
  DistanceMatrix d{Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& sup = support[static_cast<std::size_t>(i)];
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double min_sum = 0.0;
      for (auto k : sup) min_sum += std::min(m.values(i, k), m.values(j, k));
      // sum of max = sum_i + sum_j - sum of min
      const double max_sum = row_sum(i) + row_sum(j) - min_sum;
      if (!(max_sum > 0.0)) throw std::logic_error("jaccard: all-zero row pair; unit diagonal violated");
      const double dj = std::clamp(1.0 - min_sum / max_sum, 0.0, 1.0);
      d.values(i, j) = dj;
      d.values(j, i) = dj;
    }
  }
  return d;
}

/// d_W per target row: 1 - exp(-squared distance to the nearest source row). In [0,1).
inline Vector source_proximity(const Matrix& target, const Matrix& source) {
  require(source.rows() >= 1, "source proximity: empty source set");
  require(target.rows() >= 1, "source proximity: empty target set");
  require(target.cols() == source.cols(), "source proximity: dimension mismatch");
  require(target.allFinite() && source.allFinite(), "source proximity: non-finite input");
  Vector out(target.rows());
  for (Eigen::Index i = 0; i < target.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index s = 0; s < source.rows(); ++s) best = std::min(best, (target.row(i) - source.row(s)).squaredNorm());
    out(i) = -std::expm1(-best);
  }
  return out;
}

inline DistanceMatrix clustering_distance(const DistanceMatrix& jaccard, const Vector& proximity, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "clustering distance: lambda must lie in [0,1]");
  const auto n = static_cast<Eigen::Index>(jaccard.n());
  require(proximity.size() == n, "clustering distance: proximity length does not match matrix size");
  DistanceMatrix d{Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = lambda * (proximity(i) + proximity(j)) + (1.0 - lambda) * jaccard.values(i, j);
      d.values(i, j) = v;
      d.values(j, i) = v;
    }
  }
  return d;
}

/// Plain CSV dump, for debugging.
inline void write_matrix_csv(std::ostream& os, const Matrix& m) {
  os.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
}

}  // namespace act
