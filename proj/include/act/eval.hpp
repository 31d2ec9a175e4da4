#pragma once

#include "act/common.hpp"
#include "act/datasynth.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

namespace act {

/// AP over a ranked relevance list; nullopt when nothing is relevant.
inline std::optional<double> average_precision(std::span<const bool> ranked_relevance) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < ranked_relevance.size(); ++k) {
    if (!ranked_relevance[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

struct RetrievalResult {
  double map = 0.0;
  std::vector<double> cmc;  // cmc[r]: share of queries with a match in the top r+1
  std::size_t n_queries = 0;
  std::size_t n_skipped = 0;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

/// Standard cross-camera protocol: gallery entries sharing identity and camera
/// with the query are dropped from that query's ranking. Ranking is by
/// ascending Euclidean distance, ties by gallery position. Queries without any
/// valid match are skipped and tallied.
inline RetrievalResult map_and_cmc(const Matrix& query, const Matrix& gallery, std::span<const int> query_ids,
                                   std::span<const int> gallery_ids, std::span<const int> query_cams,
                                   std::span<const int> gallery_cams, std::size_t max_rank = 20) {
  require(query.cols() == gallery.cols(), "map_and_cmc: embedding width mismatch");
  require(static_cast<std::size_t>(query.rows()) == query_ids.size() && query_ids.size() == query_cams.size(),
          "map_and_cmc: query metadata mismatch");
  require(static_cast<std::size_t>(gallery.rows()) == gallery_ids.size() && gallery_ids.size() == gallery_cams.size(),
          "map_and_cmc: gallery metadata mismatch");
  const std::size_t n_gallery = gallery_ids.size();
  RetrievalResult out;
  out.n_queries = query_ids.size();
  out.cmc.assign(std::min(max_rank, n_gallery), 0.0);

  std::vector<double> dist(n_gallery);
  std::vector<std::size_t> order(n_gallery);
  // std::vector<bool> cannot back a span<const bool>
  const auto relevance = std::make_unique<bool[]>(n_gallery);
  double ap_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    for (std::size_t g = 0; g < n_gallery; ++g)
      dist[g] = (query.row(static_cast<Eigen::Index>(q)) - gallery.row(static_cast<Eigen::Index>(g))).squaredNorm();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::size_t n_ranked = 0;
    for (auto g : order) {
      const bool same_id = gallery_ids[g] == query_ids[q];
      if (same_id && gallery_cams[g] == query_cams[q]) continue;
      relevance[n_ranked++] = same_id;
    }
    const std::span<const bool> ranked(relevance.get(), n_ranked);
    const auto ap = average_precision(ranked);
    if (!ap) {
      ++out.n_skipped;
      continue;
    }
    ++used;
    ap_sum += *ap;
    const auto first = static_cast<std::size_t>(std::find(ranked.begin(), ranked.end(), true) - ranked.begin());
    for (std::size_t r = first; r < out.cmc.size(); ++r) out.cmc[r] += 1.0;
  }
  if (used > 0) {
    out.map = ap_sum / static_cast<double>(used);
    for (auto& c : out.cmc) c /= static_cast<double>(used);
  }
  return out;
}

/// Pair-counting F1 between a predicted partition and the truth. F is 0 when
/// either side has no co-labelled pair or precision + recall is 0.
inline double pairwise_f_score(std::span<const int> pred, std::span<const int> truth) {
  require(pred.size() == truth.size(), "pairwise_f_score: length mismatch");
  auto pairs = [](std::size_t c) { return static_cast<double>(c) * static_cast<double>(c - (c > 0 ? 1 : 0)) / 2.0; };
  std::map<int, std::size_t> pred_counts, truth_counts;
  std::map<std::pair<int, int>, std::size_t> joint;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++pred_counts[pred[i]];
    ++truth_counts[truth[i]];
    ++joint[{pred[i], truth[i]}];
  }
  double same_pred = 0.0, same_truth = 0.0, both = 0.0;
  for (auto [k, c] : pred_counts) same_pred += pairs(c);
  for (auto [k, c] : truth_counts) same_truth += pairs(c);
  for (auto [k, c] : joint) both += pairs(c);
  if (same_pred == 0.0 || same_truth == 0.0) return 0.0;
  const double precision = both / same_pred;
  const double recall = both / same_truth;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// Holds target ground truth and the query/gallery split. This is the only
/// place target identities are read once adaptation starts.
class TargetEvaluator {
 public:
  TargetEvaluator(const FeatureSet& target, EvalSplit split)
      : identities_(target.identities), split_(std::move(split)) {
    for (auto q : split_.query_indices) {
      query_ids_.push_back(identities_[q]);
      query_cams_.push_back(split_.cameras[q]);
    }
    for (auto g : split_.gallery_indices) {
      gallery_ids_.push_back(identities_[g]);
      gallery_cams_.push_back(split_.cameras[g]);
    }
  }

  /// `embeddings` has one row per target sample.
  RetrievalResult retrieval(const Matrix& embeddings) const {
    return map_and_cmc(gather_rows(embeddings, split_.query_indices), gather_rows(embeddings, split_.gallery_indices),
                       query_ids_, gallery_ids_, query_cams_, gallery_cams_);
  }

  /// Quality of a full pseudo labelling (outliers already merged).
  double clustering_f_score(std::span<const int> pseudo_labels) const {
    return pairwise_f_score(pseudo_labels, identities_);
  }

  const EvalSplit& split() const { return split_; }

 private:
  std::vector<int> identities_;
  EvalSplit split_;
  std::vector<int> query_ids_, gallery_ids_, query_cams_, gallery_cams_;
};

}  // namespace act
