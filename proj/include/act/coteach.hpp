#pragma once

// Stage 3: asymmetric co-teaching between a main model and a collaborator.
//
// Even iterations update the main model: the collaborator scores a batch of
// outliers t_o, the K% smallest-loss anchors are kept and concatenated with an
// inlier batch t_i. Odd iterations update the collaborator on the K% of an
// inlier batch that the main model scores lowest. The model that scores a
// batch is never the one stepped on it.
//
// Symmetric co-teaching (run_ct) is the ablation baseline: each model draws
// its own batch and trains on the anchors its peer scores lowest.

#include "act/adapt.hpp"
#include "act/common.hpp"
#include "act/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

namespace act {

/// Small-loss ratio K for an epoch: 20% rising linearly to 100% at the last epoch.
inline double ratio_at(int epoch, int e3) {
  require(e3 >= 1, "ratio_at: e3 must be >= 1");
  require(epoch >= 0 && epoch < e3, "ratio_at: epoch " + std::to_string(epoch) + " outside [0," + std::to_string(e3) + ")");
  if (e3 == 1) return 1.0;
  return 0.20 + 0.80 * static_cast<double>(epoch) / static_cast<double>(e3 - 1);
}

/// Number of anchors kept at `ratio` out of `batch`: ceil(ratio * batch), at least 1.
/// A 1e-9 slack absorbs rounding in schedule values such as 0.6 * 10.
inline std::size_t selection_count(double ratio, std::size_t batch) {
  const auto c = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(batch) - 1e-9));
  return std::clamp<std::size_t>(c, 1, batch);
}

struct SelectionReport {
  std::vector<std::size_t> selected_indices;  // ascending
  std::vector<std::size_t> rejected_indices;  // ascending
  double threshold_loss = 0.0;                // largest selected loss
};

/// Keeps the ceil(ratio * B) smallest losses; equal losses go to the lower index.
inline SelectionReport select_small_loss(std::span<const double> losses, double ratio) {
  require(!losses.empty(), "select_small_loss: empty batch");
  require(ratio > 0.0 && ratio <= 1.0, "select_small_loss: ratio must lie in (0,1]");
  std::vector<std::size_t> order(losses.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
  const std::size_t keep = selection_count(ratio, losses.size());
  SelectionReport r;
  r.selected_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  r.rejected_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(keep), order.end());
  r.threshold_loss = losses[order[keep - 1]];
  std::sort(r.selected_indices.begin(), r.selected_indices.end());
  std::sort(r.rejected_indices.begin(), r.rejected_indices.end());
  return r;
}

struct CoteachState {
  EncoderParams main;
  EncoderParams collaborator;
  AdamState main_opt;
  AdamState co_opt;
  int round = 0;

  static CoteachState from(const EncoderParams& init) {
    return {init, init, adam_init(init), adam_init(init), 0};
  }
};

/// One line of selection_trace.csv, plus which model scored and which was updated.
struct SelectionEvent {
  int round = 0;
  int epoch = 0;
  int iter = 0;
  int parity = 0;
  std::string selector;
  std::string updated;
  std::size_t n_candidates = 0;
  std::size_t n_selected = 0;
  double threshold_loss = 0.0;
  bool stepped = false;
};

namespace detail {

inline LabeledPool subset(const LabeledPool& batch, std::span<const std::size_t> positions) {
  LabeledPool out;
  for (auto p : positions) {
    out.indices.push_back(batch.indices[p]);
    out.labels.push_back(batch.labels[p]);
  }
  return out;
}

/// Per-anchor batch-hard losses of `scorer` for the anchors at positions
/// [first, batch.size()) with mining over the whole batch.
inline std::vector<double> anchor_losses(const EncoderParams& scorer, const Matrix& features, const LabeledPool& batch,
                                         double margin, std::size_t first = 0) {
  const Matrix emb = forward(scorer, gather_rows(features, batch.indices));
  const MinedTriplets m = mine_batch_hard(emb, batch.labels, margin);
  return {m.loss.begin() + static_cast<std::ptrdiff_t>(first), m.loss.end()};
}

}  // namespace detail

/// Even iteration. The collaborator scores t_o (mined against t_o and t_i
/// together); the selected outliers join t_i for one main-model step.
inline SelectionEvent main_update_step(CoteachState& state, const Matrix& features, const LabeledPool& t_i,
                                       const LabeledPool& t_o, double ratio, const TrainConfig& cfg) {
  SelectionEvent ev;
  ev.parity = 0;
  ev.selector = "co";
  ev.updated = "main";
  LabeledPool batch = t_i;
  ev.n_candidates = t_o.size();
  if (!t_o.empty()) {
    LabeledPool scored = t_i;
    scored.append(t_o);
    const auto losses = detail::anchor_losses(state.collaborator, features, scored, cfg.margin, t_i.size());
    const SelectionReport sel = select_small_loss(losses, ratio);
    batch.append(detail::subset(t_o, sel.selected_indices));
    ev.n_selected = sel.selected_indices.size();
    ev.threshold_loss = sel.threshold_loss;
  }
  ev.stepped = triplet_step(state.main, state.main_opt, features, batch, cfg);
  return ev;
}

/// Odd iteration. The main model scores t_i; the collaborator steps on the selected subset.
inline SelectionEvent collaborator_update_step(CoteachState& state, const Matrix& features, const LabeledPool& t_i,
                                               double ratio, const TrainConfig& cfg) {
  SelectionEvent ev;
  ev.parity = 1;
  ev.selector = "main";
  ev.updated = "co";
  ev.n_candidates = t_i.size();
  const auto losses = detail::anchor_losses(state.main, features, t_i, cfg.margin);
  const SelectionReport sel = select_small_loss(losses, ratio);
  ev.n_selected = sel.selected_indices.size();
  ev.threshold_loss = sel.threshold_loss;
  ev.stepped = triplet_step(state.collaborator, state.co_opt, features, detail::subset(t_i, sel.selected_indices), cfg);
  return ev;
}

/// Up to batch_size outliers whose pseudo label occurs in t_i, so every selected
/// outlier anchor has positives in the main model's batch.
inline LabeledPool sample_outlier_batch(const LabeledPool& outliers, const LabeledPool& t_i, int batch_size, Rng& rng) {
  const std::set<int> present(t_i.labels.begin(), t_i.labels.end());
  std::vector<std::size_t> eligible;
  for (std::size_t p = 0; p < outliers.size(); ++p)
    if (present.count(outliers.labels[p])) eligible.push_back(p);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  if (eligible.size() > static_cast<std::size_t>(batch_size)) eligible.resize(static_cast<std::size_t>(batch_size));
  std::sort(eligible.begin(), eligible.end());
  return detail::subset(outliers, eligible);
}

inline double stage3_ratio(const AdaptConfig& cfg, int epoch) {
  return cfg.fixed_ratio ? *cfg.fixed_ratio : ratio_at(epoch, cfg.stage3.epochs);
}

/// One pass over the inliers: ceil(|T_i| / B_s) iterations alternating by parity.
inline CoteachState act_epoch(CoteachState state, const Matrix& features, const LabeledPool& inliers,
                              const LabeledPool& outliers, int epoch, const AdaptConfig& cfg, Rng& rng,
                              std::vector<SelectionEvent>* trace = nullptr) {
  require(!inliers.empty(), "act_epoch: no inliers");
  const double ratio = stage3_ratio(cfg, epoch);
  const std::size_t iters = iterations_per_epoch(inliers.size(), cfg.stage3.batch_size());
  for (std::size_t it = 0; it < iters; ++it) {
    const LabeledPool t_i = sample_pk_batch(inliers, cfg.stage3, rng);
    SelectionEvent ev;
    if (it % 2 == 0) {
      const LabeledPool t_o = sample_outlier_batch(outliers, t_i, cfg.stage3.batch_size(), rng);
      ev = main_update_step(state, features, t_i, t_o, ratio, cfg.stage3);
    } else {
      ev = collaborator_update_step(state, features, t_i, ratio, cfg.stage3);
    }
    ev.round = state.round;
    ev.epoch = epoch;
    ev.iter = static_cast<int>(it);
    if (trace) trace->push_back(std::move(ev));
  }
  return state;
}

struct CoteachResult {
  EncoderParams model;  // the main model (model A for symmetric co-teaching)
  EncoderParams collaborator;
  std::vector<ModelRoundRecord> records;
  std::vector<SelectionEvent> trace;
};

namespace detail {

inline void record_round(CoteachResult& out, int round, const CoteachState& state, const ClusterResult& cr,
                         const Monitor& monitor) {
  const double f = monitor.score(cr.pseudo_labels);
  const auto main = monitor.evaluate(state.main);
  const auto co = monitor.evaluate(state.collaborator);
  out.records.push_back({round, "main", main.map, main.rank1(), f, cr.assignment.n_outliers()});
  out.records.push_back({round, "co", co.map, co.rank1(), f, cr.assignment.n_outliers()});
}

}  // namespace detail

/// Full asymmetric co-teaching: r3 rounds of {re-cluster with the main model,
/// e3 epochs of act_epoch}; the ratio schedule restarts every round.
inline CoteachResult run_act(const EncoderParams& m_ada, const UnlabeledSet& target, const Matrix& source_features,
                             const AdaptConfig& cfg, const Monitor& monitor = {}) {
  cfg.validate();
  CoteachState state = CoteachState::from(m_ada);
  CoteachResult out;
  Rng rng(cfg.stage3.seed);
  for (int round = 0; round < cfg.r3; ++round) {
    state.round = round;
    const ClusterResult cr = cluster_target(state.main, target.features, source_features, cfg.metric, cfg.cluster,
                                            derive_seed(cfg.stage3.seed, 1000 + static_cast<std::uint64_t>(round)));
    const LabeledPool inliers = drop_small_labels(cr.inlier_pool());
    if (inliers.n_labels() < 2) throw StageError("run_act: round " + std::to_string(round) + " has too few inlier clusters");
    const LabeledPool outliers = cr.outlier_pool();
    for (int epoch = 0; epoch < cfg.stage3.epochs; ++epoch)
      state = act_epoch(std::move(state), target.features, inliers, outliers, epoch, cfg, rng, &out.trace);
    detail::record_round(out, round, state, cr, monitor);
  }
  out.model = state.main;
  out.collaborator = state.collaborator;
  return out;
}

/// One symmetric co-teaching iteration. Each model brings its own batch; the
/// peer scores it with pre-update parameters and the model steps on the
/// peer's small-loss selection.
inline std::pair<SelectionEvent, SelectionEvent> ct_step(CoteachState& state, const Matrix& features,
                                                         const LabeledPool& main_batch, const LabeledPool& co_batch,
                                                         double ratio, const TrainConfig& cfg) {
  const SelectionReport by_co = select_small_loss(detail::anchor_losses(state.collaborator, features, main_batch, cfg.margin), ratio);
  const SelectionReport by_main = select_small_loss(detail::anchor_losses(state.main, features, co_batch, cfg.margin), ratio);
  SelectionEvent to_main{0, 0, 0, 0, "co", "main", main_batch.size(), by_co.selected_indices.size(), by_co.threshold_loss, false};
  SelectionEvent to_co{0, 0, 0, 1, "main", "co", co_batch.size(), by_main.selected_indices.size(), by_main.threshold_loss, false};
  to_main.stepped = triplet_step(state.main, state.main_opt, features, detail::subset(main_batch, by_co.selected_indices), cfg);
  to_co.stepped = triplet_step(state.collaborator, state.co_opt, features, detail::subset(co_batch, by_main.selected_indices), cfg);
  return {to_main, to_co};
}

struct CtOptions {
  bool include_outliers = false;  // train on T_i plus pseudo-labelled T_o
  bool shared_batches = false;    // both models draw from one sampling stream
};

/// Symmetric co-teaching over T_i (or T_i plus pseudo-labelled T_o), with the
/// same round structure and schedule as run_act. Both models start from m_ada,
/// so they only diverge through their separate batch streams.
inline CoteachResult run_ct(const EncoderParams& m_ada, const UnlabeledSet& target, const Matrix& source_features,
                            const AdaptConfig& cfg, CtOptions opt, const Monitor& monitor = {}) {
  cfg.validate();
  CoteachState state = CoteachState::from(m_ada);
  CoteachResult out;
  Rng main_rng(cfg.stage3.seed);
  Rng co_rng(derive_seed(cfg.stage3.seed, 2));
  Rng& co_stream = opt.shared_batches ? main_rng : co_rng;
  for (int round = 0; round < cfg.r3; ++round) {
    state.round = round;
    const ClusterResult cr = cluster_target(state.main, target.features, source_features, cfg.metric, cfg.cluster,
                                            derive_seed(cfg.stage3.seed, 1000 + static_cast<std::uint64_t>(round)));
    LabeledPool pool = cr.inlier_pool();
    if (opt.include_outliers) pool.append(cr.outlier_pool());
    pool = drop_small_labels(pool);
    if (pool.n_labels() < 2) throw StageError("run_ct: round " + std::to_string(round) + " has too few clusters");
    const std::size_t iters = iterations_per_epoch(pool.size(), cfg.stage3.batch_size());
    for (int epoch = 0; epoch < cfg.stage3.epochs; ++epoch) {
      const double ratio = stage3_ratio(cfg, epoch);
      for (std::size_t it = 0; it < iters; ++it) {
        const LabeledPool main_batch = sample_pk_batch(pool, cfg.stage3, main_rng);
        const LabeledPool co_batch = opt.shared_batches ? main_batch : sample_pk_batch(pool, cfg.stage3, co_stream);
        auto [a, b] = ct_step(state, target.features, main_batch, co_batch, ratio, cfg.stage3);
        for (auto* ev : {&a, &b}) {
          ev->round = round;
          ev->epoch = epoch;
          ev->iter = static_cast<int>(it);
          out.trace.push_back(*ev);
        }
      }
    }
    detail::record_round(out, round, state, cr, monitor);
  }
  out.model = state.main;
  out.collaborator = state.collaborator;
  return out;
}

}  // namespace act
