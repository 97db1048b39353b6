#include <gtest/gtest.h>

#include <cmath>

#include "dnpg/eval.hpp"
#include "fixture.hpp"

using namespace dnpg;
using namespace dnpg::testing;

namespace {

double brute_auroc(const std::vector<double>& known, const std::vector<double>& unknown) {
  double wins = 0;
  for (double u : unknown)
    for (double k : known) wins += u > k ? 1.0 : (u == k ? 0.5 : 0.0);
  return wins / (known.size() * unknown.size());
}

}  // namespace

TEST(Auroc, MatchesPairCountingOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> k(1 + rng.index(30)), u(1 + rng.index(30));
    // Coarse values so ties occur.
    for (auto& v : k) v = std::round(rng.normal() * 3) / 3;
    for (auto& v : u) v = std::round((rng.normal() + 0.5) * 3) / 3;
    EXPECT_NEAR(auroc(k, u), brute_auroc(k, u), 1e-12);
  }
}

TEST(Auroc, EdgeCases) {
  std::vector<double> a{0.1, 0.2}, b{0.3, 0.4}, c{0.5, 0.5};
  EXPECT_EQ(auroc(a, b), 1.0);
  EXPECT_EQ(auroc(b, a), 0.0);
  EXPECT_EQ(auroc(c, c), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{}, a), ContractError);
}

TEST(Accuracy, ArgmaxOverKnownScores) {
  Matrix s(3, 2);
  s << 1, 0, 0, 1, 2, 3;
  EXPECT_NEAR(closed_set_accuracy(s, std::vector<int>{0, 1, 0}), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(closed_set_accuracy(s, std::vector<int>{0}), ShapeError);
}

TEST(UnknownProbability, MatchesSoftmaxSlot) {
  Rng rng(2);
  const Matrix k = random_matrix(4, 3, rng, 5.0);
  const Eigen::VectorXd u = random_matrix(4, 1, rng, 5.0);
  const Eigen::VectorXd p = unknown_probability(k, u);
  for (int i = 0; i < 4; ++i) {
    double z = std::exp(u(i));
    for (int j = 0; j < 3; ++j) z += std::exp(k(i, j));
    EXPECT_NEAR(p(i), std::exp(u(i)) / z, 1e-12);
  }
}

TEST(Aggregate, MeanHalfwidthAndUtilization) {
  std::vector<EpisodeRecord> recs{{0, 0.5, 0.6, 0.7, 2, {3, 0, 1}}, {1, 0.7, 0.8, 0.9, 1, {1, 0, 0}}};
  std::vector<double> cos{0.1, 0.2};
  const MetricsReport r = aggregate(recs, cos);
  EXPECT_NEAR(r.acc_mean, 60.0, 1e-12);
  EXPECT_NEAR(r.auroc_mean, 70.0, 1e-12);
  EXPECT_NEAR(r.softmax_auroc_mean, 80.0, 1e-12);
  EXPECT_NEAR(*r.acc_halfwidth, 100 * 1.96 * std::sqrt(0.02) / std::sqrt(2.0), 1e-12);
  EXPECT_EQ(r.np_utilization, (std::vector<long long>{4, 0, 1}));
  EXPECT_EQ(r.utilized_nps, 2);
  EXPECT_FALSE(aggregate(std::span(recs).first(1), cos).acc_halfwidth.has_value());
}

TEST(Evaluate, ResultDoesNotDependOnWorkerCount) {
  Tiny t;
  const DnpgModel m = t.model(all_on());
  EvalConfig cfg{40, t.ways, t.shots, t.queries, 1};
  const Evaluation a = evaluate(m, t.data, t.split, cfg, Rng(3));
  cfg.workers = 3;
  const Evaluation b = evaluate(m, t.data, t.split, cfg, Rng(3));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].auroc, b.records[i].auroc);
    EXPECT_EQ(a.records[i].acc, b.records[i].acc);
    EXPECT_EQ(a.records[i].np_counts, b.records[i].np_counts);
  }
  EXPECT_EQ(a.report.auroc_mean, b.report.auroc_mean);
  EXPECT_EQ(a.unknown_max_cosines, b.unknown_max_cosines);
}

TEST(Evaluate, RecordsAreConsistent) {
  Tiny t;
  const DnpgModel m = t.model(all_on(), 4);
  const Evaluation ev = evaluate(m, t.data, t.split, {25, t.ways, t.shots, t.queries, 1}, Rng(4));
  EXPECT_EQ(ev.report.episodes, 25);
  long long total = 0;
  for (const auto& r : ev.records) {
    EXPECT_GE(r.auroc, 0.0);
    EXPECT_LE(r.auroc, 1.0);
    EXPECT_GE(r.effective_nps, 1);
    EXPECT_LE(r.effective_nps, 4);
    for (long long c : r.np_counts) total += c;
  }
  // Every query (known and unknown) picks exactly one NP.
  EXPECT_EQ(total, 25LL * 2 * t.ways * t.queries);
  EXPECT_EQ(ev.report.unknown_np_similarity.count, static_cast<std::size_t>(25 * t.ways * t.queries));
}

TEST(Evaluate, RejectsTooSmallPools) {
  Tiny t;
  EXPECT_THROW(evaluate(t.model(all_on()), t.data, t.split, {5, 6, 1, 2, 1}, Rng(5)), SamplingError);
  EXPECT_THROW(evaluate(t.model(all_on()), t.data, t.split, {0, 3, 1, 2, 1}, Rng(5)), ParameterError);
}
