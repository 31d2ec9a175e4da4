#include "act/eval.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using act::Matrix;

namespace {

double ap(std::initializer_list<bool> rel) { return act::average_precision(std::span<const bool>(rel.begin(), rel.size())).value(); }

struct RandomRetrieval {
  Matrix query, gallery;
  std::vector<int> qid, gid, qcam, gcam;
};

RandomRetrieval random_retrieval(std::mt19937_64& rng, int n_query, int n_gallery, int n_ids, int n_cams) {
  std::uniform_int_distribution<int> id(0, n_ids - 1), cam(0, n_cams - 1);
  RandomRetrieval r;
  r.query = oracle::random_matrix(rng, n_query, 3);
  r.gallery = oracle::random_matrix(rng, n_gallery, 3);
  for (int i = 0; i < n_query; ++i) r.qid.push_back(id(rng)), r.qcam.push_back(cam(rng));
  for (int i = 0; i < n_gallery; ++i) r.gid.push_back(id(rng)), r.gcam.push_back(cam(rng));
  return r;
}

act::RetrievalResult run(const RandomRetrieval& r, std::size_t max_rank = 20) {
  return act::map_and_cmc(r.query, r.gallery, r.qid, r.gid, r.qcam, r.gcam, max_rank);
}

}  // namespace

TEST(AveragePrecision, HandExamples) {
  EXPECT_DOUBLE_EQ(ap({true, false, true}), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(ap({true, true, true, true}), 1.0);
  for (int r = 1; r <= 8; ++r) {
    bool buf[8] = {};
    buf[r - 1] = true;
    EXPECT_DOUBLE_EQ(act::average_precision(buf).value(), 1.0 / r);
  }
}

TEST(AveragePrecision, NothingRelevantIsNullopt) {
  const bool none[3] = {false, false, false};
  EXPECT_FALSE(act::average_precision(none).has_value());
  EXPECT_FALSE(act::average_precision({}).has_value());
}

TEST(AveragePrecision, ExhaustiveAgainstDefinitionUpToLength12) {
  for (std::size_t len = 1; len <= 12; ++len) {
    for (std::uint32_t mask = 1; mask < (1u << len); ++mask) {
      bool buf[12];
      std::vector<bool> rel(len);
      for (std::size_t k = 0; k < len; ++k) buf[k] = rel[k] = (mask >> k) & 1u;
      ASSERT_NEAR(act::average_precision(std::span<const bool>(buf, len)).value(), oracle::average_precision(rel), 1e-15)
          << len << ' ' << mask;
    }
  }
}

TEST(MapAndCmc, CopiesAtOtherCamerasArePerfect) {
  std::mt19937_64 rng(1);
  const Matrix q = oracle::random_matrix(rng, 10, 4, 10.0);
  const std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, qcam(10, 0), gcam(10, 1);
  const auto r = act::map_and_cmc(q, q, ids, ids, qcam, gcam);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_DOUBLE_EQ(r.rank1(), 1.0);
  EXPECT_EQ(r.n_skipped, 0u);
}

TEST(MapAndCmc, MatchesEnumerationOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = random_retrieval(rng, 12, 40, 6, 3);
    const auto got = run(r);
    const auto want = oracle::retrieval(oracle::to_table(r.query), oracle::to_table(r.gallery), r.qid, r.gid, r.qcam, r.gcam);
    EXPECT_NEAR(got.map, want.map, 1e-12) << trial;
    EXPECT_NEAR(got.rank1(), want.rank1, 1e-12) << trial;
    EXPECT_EQ(got.n_skipped, want.skipped) << trial;
  }
}

TEST(MapAndCmc, SameCameraOnlyMatchIsSkipped) {
  Matrix q(2, 1), g(3, 1);
  q << 0, 5;
  g << 0.1, 5.1, 9;
  const std::vector<int> qid{0, 1}, gid{0, 1, 2}, qcam{0, 0}, gcam{0, 1, 1};
  const auto r = act::map_and_cmc(q, g, qid, gid, qcam, gcam);
  EXPECT_EQ(r.n_skipped, 1u);
  EXPECT_EQ(r.n_queries, 2u);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
}

TEST(MapAndCmc, TiesResolveByGalleryPosition) {
  Matrix q(1, 1), g(2, 1);
  q << 0;
  g << 1, -1;
  const std::vector<int> qid{0}, qcam{0}, gcam{1, 1};
  EXPECT_DOUBLE_EQ(act::map_and_cmc(q, g, qid, std::vector<int>{0, 1}, qcam, gcam).map, 1.0);
  EXPECT_DOUBLE_EQ(act::map_and_cmc(q, g, qid, std::vector<int>{1, 0}, qcam, gcam).map, 0.5);
}

TEST(MapAndCmc, CmcIsNondecreasingAndEndsAtOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_retrieval(rng, 10, 30, 4, 2);
    const auto res = run(r, 30);
    ASSERT_EQ(res.cmc.size(), 30u);
    EXPECT_TRUE(std::is_sorted(res.cmc.begin(), res.cmc.end()));
    if (res.n_skipped < res.n_queries) {
      EXPECT_DOUBLE_EQ(res.cmc.back(), 1.0);
    }
    for (double c : res.cmc) EXPECT_LE(c, 1.0);
  }
}

TEST(MapAndCmc, InvariantUnderRelabelAndRigidMotion) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = random_retrieval(rng, 10, 30, 5, 3);
    const auto base = run(r);
    auto moved = r;
    const Matrix rot = oracle::random_matrix(rng, 3, 3).householderQr().householderQ();
    const Eigen::RowVectorXd shift = oracle::random_matrix(rng, 1, 3, 5.0);
    moved.query = (r.query * rot.transpose()).rowwise() + shift;
    moved.gallery = (r.gallery * rot.transpose()).rowwise() + shift;
    for (auto& id : moved.qid) id = 100 - 7 * id;
    for (auto& id : moved.gid) id = 100 - 7 * id;
    const auto after = run(moved);
    EXPECT_NEAR(after.map, base.map, 1e-12);
    for (std::size_t k = 0; k < base.cmc.size(); ++k) EXPECT_NEAR(after.cmc[k], base.cmc[k], 1e-12);
  }
}

TEST(PairwiseFScore, HandExample) {
  const std::vector<int> pred{0, 0, 1, 1}, truth{0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(act::pairwise_f_score(pred, truth), 0.4);
}

TEST(PairwiseFScore, DegenerateCases) {
  const std::vector<int> truth{3, 3, 1, 1, 1, 2};
  EXPECT_DOUBLE_EQ(act::pairwise_f_score(truth, truth), 1.0);
  const std::vector<int> singletons{0, 1, 2, 3, 4, 5};
  EXPECT_EQ(act::pairwise_f_score(singletons, truth), 0.0);
  EXPECT_THROW(act::pairwise_f_score(std::vector<int>{0, 1}, truth), act::ConfigError);
}

TEST(PairwiseFScore, MatchesPairEnumerationAndIgnoresIdNames) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> label(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> pred(30), truth(30);
    for (auto& v : pred) v = label(rng);
    for (auto& v : truth) v = label(rng);
    const double f = act::pairwise_f_score(pred, truth);
    EXPECT_NEAR(f, oracle::pairwise_f(pred, truth), 1e-12);
    std::vector<int> renamed = pred;
    for (auto& v : renamed) v = (v * 3 + 2) % 5 - 1;  // bijection on 0..4 onto {-1..3}
    EXPECT_DOUBLE_EQ(act::pairwise_f_score(renamed, truth), f);
  }
}
