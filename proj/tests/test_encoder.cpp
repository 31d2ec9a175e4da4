#include "act/encoder.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using act::EncoderParams;
using act::Matrix;

namespace {

std::vector<int> pk_labels(int p, int k) {
  std::vector<int> labels;
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < k; ++j) labels.push_back(i);
  return labels;
}

/// Scalar-loop forward pass.
Matrix forward_oracle(const EncoderParams& p, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& w = p.layers[l].weight;
    Matrix out(h.rows(), w.rows());
    for (Eigen::Index i = 0; i < h.rows(); ++i)
      for (Eigen::Index o = 0; o < w.rows(); ++o) {
        double s = p.layers[l].bias(o);
        for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(o, c) * h(i, c);
        out(i, o) = p.activations[l] == act::Activation::relu ? std::max(0.0, s) : s;
      }
    h = out;
  }
  if (p.normalize)
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < h.cols(); ++c) s += h(i, c) * h(i, c);
      for (Eigen::Index c = 0; c < h.cols(); ++c) h(i, c) /= std::sqrt(s);
    }
  return h;
}

}  // namespace

TEST(Forward, IdentityAndZero) {
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(rng, 5, 4);
  EXPECT_EQ(act::forward(act::identity_encoder(4), x), x);
  auto zero = act::identity_encoder(4);
  zero.layers[0].weight.setZero();
  EXPECT_TRUE(act::forward(zero, x).isZero(0.0));
}

TEST(Forward, MatchesScalarOracle) {
  std::mt19937_64 rng(2);
  for (bool normalize : {false, true})
    for (int hidden : {0, 7}) {
      auto p = act::init_encoder(5, {hidden, 6, normalize}, 0, 3);
      for (auto& l : p.layers) l.bias = oracle::random_matrix(rng, 1, l.bias.size()).row(0).transpose();
      const Matrix x = oracle::random_matrix(rng, 9, 5);
      EXPECT_LT((act::forward(p, x) - forward_oracle(p, x)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Forward, RejectsShapeMismatch) {
  EXPECT_THROW(act::forward(act::identity_encoder(3), Matrix::Zero(2, 4)), act::ConfigError);
}

TEST(TripletLoss, HingeArithmetic) {
  // anchor 0 with its positive 1 and negative 2 on a line
  Matrix emb(4, 1);
  emb << 0.0, 0.2, 0.8, 1.6;
  const std::vector<int> labels{0, 0, 1, 1};
  const auto m = act::mine_batch_hard(emb, labels, 0.3);
  EXPECT_DOUBLE_EQ(m.loss[0], 0.0);  // d_ap 0.2, d_an 0.8
  Matrix emb2(4, 1);
  emb2 << 0.0, 1.0, 0.5, 3.0;
  const auto m2 = act::mine_batch_hard(emb2, labels, 0.3);
  EXPECT_NEAR(m2.loss[0], 0.8, 1e-15);  // d_ap 1.0, d_an 0.5
}

TEST(TripletLoss, MatchesAllTripletEnumeration) {
  std::mt19937_64 rng(4);
  const auto labels = pk_labels(4, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix emb = oracle::random_matrix(rng, 16, 3);
    const auto report = act::triplet_loss_batch(emb, labels, 0.3);
    const auto want = oracle::batch_hard_losses(oracle::to_table(emb), labels, 0.3);
    double total = 0.0;
    for (std::size_t a = 0; a < 16; ++a) {
      EXPECT_NEAR(report.per_anchor_losses[a], want[a], 1e-12);
      EXPECT_GE(report.per_anchor_losses[a], 0.0);
      total += report.per_anchor_losses[a];
    }
    EXPECT_NEAR(report.total_loss, total, 1e-12);
  }
}

TEST(TripletLoss, RejectsBrokenPkStructure) {
  const Matrix emb = Matrix::Zero(3, 2);
  EXPECT_THROW(act::triplet_loss_batch(emb, std::vector<int>{0, 0, 1}, 0.3), act::ConfigError);
  EXPECT_THROW(act::triplet_loss_batch(emb, std::vector<int>{0, 0, 0}, 0.3), act::ConfigError);
}

TEST(TripletLoss, PermutationEquivariantAndRigidInvariant) {
  std::mt19937_64 rng(5);
  const auto labels = pk_labels(3, 4);
  const Matrix emb = oracle::random_matrix(rng, 12, 4);
  const auto base = act::triplet_loss_batch(emb, labels, 0.3);

  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto shuffled = act::triplet_loss_batch(act::gather_rows(emb, perm), act::gather<int>(labels, perm), 0.3);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(shuffled.per_anchor_losses[i], base.per_anchor_losses[perm[i]], 1e-12);

  const Matrix q = oracle::random_matrix(rng, 4, 4).householderQr().householderQ();
  Matrix moved = emb * q.transpose();
  moved.rowwise() += oracle::random_matrix(rng, 1, 4, 5.0).row(0);
  EXPECT_NEAR(act::triplet_loss_batch(moved, labels, 0.3).total_loss, base.total_loss, 1e-9);
}

TEST(TripletGrad, ZeroWhenNoHingeIsActive) {
  Matrix x(4, 2);
  x << 0, 0, 0.01, 0, 10, 0, 10.01, 0;
  const auto g = act::triplet_grad(act::identity_encoder(2), x, std::vector<int>{0, 0, 1, 1}, 0.3);
  EXPECT_EQ(g.report.total_loss, 0.0);
  act::zip_tensors([](const auto& t) { EXPECT_TRUE(t.isZero(0.0)); }, g.grads);
}

TEST(TripletGrad, SingleActiveTripletClosedForm) {
  // Two identities in 2-d through an identity layer, margin 0.1. Only anchor 0
  // has an active hinge: d_ap = |x0-x1| = 1, d_an = |x0-x2| = 0.5.
  Matrix x(4, 2);
  x << 0, 0, 1, 0, 0, 0.5, 0, 0.8;
  const std::vector<int> labels{0, 0, 1, 1};
  const auto g = act::triplet_grad(act::identity_encoder(2), x, labels, 0.1);
  const auto& losses = g.report.per_anchor_losses;
  ASSERT_NEAR(losses[0], 0.6, 1e-15);
  for (std::size_t a = 1; a < 4; ++a) ASSERT_EQ(losses[a], 0.0);
  // dL/de0 = (e0-e1)/|e0-e1| - (e0-e2)/|e0-e2| = (-1,0) - (0,-1) = (-1,1)
  // dL/de1 = (1,0), dL/de2 = (0,-1); dL/dW = sum_i g_i x_i^T, dL/db = sum_i g_i
  Matrix grad_emb = Matrix::Zero(4, 2);
  grad_emb.row(0) << -1, 1;
  grad_emb.row(1) << 1, 0;
  grad_emb.row(2) << 0, -1;
  const Matrix expected_w = grad_emb.transpose() * x;
  EXPECT_LT((g.grads.layers[0].weight - expected_w).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((g.grads.layers[0].bias - grad_emb.colwise().sum().transpose()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(TripletGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const bool normalize = trial % 2 == 0;
    const int hidden = (trial / 2) % 2 == 0 ? 0 : 6;
    auto p = act::init_encoder(4, {hidden, 5, normalize}, 0, static_cast<std::uint64_t>(trial));
    for (auto& l : p.layers) l.bias = oracle::random_matrix(rng, 1, l.bias.size(), 0.5).row(0).transpose();
    const Matrix x = oracle::random_matrix(rng, 12, 4);
    const auto labels = pk_labels(3, 4);
    const auto res = gradcheck::triplet(p, x, labels, 0.3);
    EXPECT_LT(res.worst_relative_error, 1e-4) << "trial " << trial;
    checked += static_cast<int>(res.n_checked);
  }
  EXPECT_GT(checked, 1000);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  auto p = act::init_encoder(3, {0, 4, false}, 7, 1);
  p.head->weight.setZero();
  p.head->bias.setZero();
  std::mt19937_64 rng(7);
  const auto ce = act::ce_loss_and_grad(p, oracle::random_matrix(rng, 5, 3), std::vector<int>{0, 1, 2, 3, 4});
  EXPECT_NEAR(ce.loss, std::log(7.0), 1e-12);
}

TEST(CrossEntropy, LargeCorrectMarginDrivesLossToZero) {
  auto p = act::identity_encoder(2);
  p.head = act::Dense{Matrix::Identity(2, 2), act::Vector::Zero(2)};
  Matrix x(1, 2);
  double previous = 1.0;
  for (double margin : {1.0, 10.0, 40.0}) {
    x << margin, 0;
    const double loss = act::ce_loss_and_grad(p, x, std::vector<int>{0}).loss;
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(CrossEntropy, RequiresHead) {
  EXPECT_THROW(act::ce_loss_and_grad(act::identity_encoder(2), Matrix::Zero(1, 2), std::vector<int>{0}),
               act::ConfigError);
}

TEST(CrossEntropy, MatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const bool normalize = trial % 2 == 1;
    const int hidden = (trial / 2) % 2 == 0 ? 0 : 6;
    auto p = act::init_encoder(4, {hidden, 5, normalize}, 6, static_cast<std::uint64_t>(100 + trial));
    p.head->weight = oracle::random_matrix(rng, 6, 5);
    const Matrix x = oracle::random_matrix(rng, 8, 4);
    std::vector<int> labels;
    std::uniform_int_distribution<int> cls(0, 5);
    for (int i = 0; i < 8; ++i) labels.push_back(cls(rng));
    EXPECT_LT(gradcheck::cross_entropy(p, x, labels).worst_relative_error, 1e-4) << "trial " << trial;
  }
}

TEST(PkSample, ShapeAndDeterminism) {
  std::vector<int> labels;
  for (int id = 0; id < 20; ++id)
    for (int s = 0; s < (id % 3 == 0 ? 2 : 6); ++s) labels.push_back(id);
  act::Rng a(5), b(5);
  const auto batch = act::pk_sample(labels, 16, 4, a);
  EXPECT_EQ(batch.size(), 64u);
  EXPECT_EQ(batch, act::pk_sample(labels, 16, 4, b));
  std::map<int, int> counts;
  for (auto i : batch) ++counts[labels[i]];
  EXPECT_EQ(counts.size(), 16u);
  for (auto [id, c] : counts) EXPECT_EQ(c, 4);
  act::Rng c(1);
  EXPECT_THROW(act::pk_sample(labels, 21, 4, c), act::ConfigError);
}

TEST(TrainConfig, RejectsSingleIdentityBatches) {
  act::TrainConfig cfg;
  cfg.P = 1;
  EXPECT_THROW(cfg.validate(), act::ConfigError);
  EXPECT_EQ(act::TrainConfig{}.batch_size(), 64);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  auto p = act::identity_encoder(2);
  auto state = act::adam_init(p);
  state.first_moment.layers[0].weight.setConstant(1.0);
  state.second_moment.layers[0].weight.setConstant(1.0);
  const auto [next, q] = act::opt_step(state, p, act::zeros_like(p), 0.1);
  EXPECT_EQ(next.first_moment.layers[0].weight(0, 0), 0.9);
  EXPECT_EQ(next.second_moment.layers[0].weight(0, 0), 0.999);
  // moments are nonzero so params move; with true zero moments they would not
  const auto [fresh_state, fresh] = act::opt_step(act::adam_init(p), p, act::zeros_like(p), 0.1);
  EXPECT_EQ(fresh, p);
  EXPECT_EQ(fresh_state.step, 1);
}

TEST(Adam, FirstStepMovesByLrAgainstGradientSign) {
  auto p = act::identity_encoder(2);
  auto g = act::zeros_like(p);
  g.layers[0].weight << 3.0, -0.5, 0.0, 2.0;
  const auto [state, q] = act::opt_step(act::adam_init(p), p, g, 0.01);
  const Matrix delta = q.layers[0].weight - p.layers[0].weight;
  EXPECT_NEAR(delta(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(delta(0, 1), 0.01, 1e-9);
  EXPECT_EQ(delta(1, 0), 0.0);
  EXPECT_NEAR(delta(1, 1), -0.01, 1e-9);
}

TEST(Adam, QuadraticTrajectoryMatchesScalarReference) {
  // minimise 0.5 * a * w^2 per coordinate; gradient a * w
  auto p = act::identity_encoder(2);
  p.layers[0].weight << 1.0, -2.0, 0.5, 3.0;
  p.layers[0].bias << 0.25, -1.0;
  const double a = 1.7, lr = 0.05;
  std::vector<double> w{1.0, -2.0, 0.5, 3.0, 0.25, -1.0}, m(6, 0.0), v(6, 0.0);
  auto state = act::adam_init(p);
  for (int t = 1; t <= 10; ++t) {
    auto g = p;
    act::zip_tensors([&](auto& gt) { gt *= a; }, g);
    std::tie(state, p) = act::opt_step(std::move(state), std::move(p), g, lr);
    for (std::size_t i = 0; i < 6; ++i) {
      const double gi = a * w[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(p.layers[0].weight(0, 0), w[0], 1e-10);
  EXPECT_NEAR(p.layers[0].weight(0, 1), w[1], 1e-10);
  EXPECT_NEAR(p.layers[0].weight(1, 0), w[2], 1e-10);
  EXPECT_NEAR(p.layers[0].weight(1, 1), w[3], 1e-10);
  EXPECT_NEAR(p.layers[0].bias(0), w[4], 1e-10);
  EXPECT_NEAR(p.layers[0].bias(1), w[5], 1e-10);
}

TEST(Training, FiftyStepsReduceTripletLoss) {
  std::mt19937_64 rng(9);
  auto p = act::init_encoder(6, {0, 8, true}, 0, 2);
  const Matrix x = oracle::random_matrix(rng, 16, 6);
  const auto labels = pk_labels(4, 4);
  const double initial = act::triplet_grad(p, x, labels, 0.3).report.total_loss;
  auto state = act::adam_init(p);
  for (int s = 0; s < 50; ++s) {
    const auto g = act::triplet_grad(p, x, labels, 0.3);
    std::tie(state, p) = act::opt_step(std::move(state), std::move(p), g.grads, 0.01);
  }
  EXPECT_LT(act::triplet_grad(p, x, labels, 0.3).report.total_loss, initial);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(10);
  auto p = act::init_encoder(5, {7, 4, true}, 3, 11);
  for (auto& l : p.layers) l.bias = oracle::random_matrix(rng, 1, l.bias.size()).row(0).transpose();
  const auto path = std::filesystem::temp_directory_path() / "act_checkpoint_roundtrip.json";
  act::save_checkpoint(path.string(), p);
  EXPECT_EQ(act::load_checkpoint(path.string()), p);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsWrongFormat) {
  nlohmann::json j = act::to_json(act::identity_encoder(2));
  j["version"] = 99;
  EXPECT_THROW(act::encoder_from_json(j), act::ConfigError);
}
