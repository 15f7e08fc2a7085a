#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dbs/metrics.hpp"
#include "test_util.hpp"

using namespace dbs;
using dbs::testing::random_tensor;

namespace {

struct LoopRef {
  double epe, d1, d3;
};

LoopRef loop_metrics(const Tensor<double>& p, const Tensor<double>& g, const Tensor<std::uint8_t>& m) {
  double s = 0.0;
  int n = 0, b1 = 0, b3 = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    if (!m[i]) continue;
    const double e = std::fabs(p[i] - g[i]);
    s += e;
    b1 += e > 1.0;
    b3 += e > 3.0;
    ++n;
  }
  return {s / n, 100.0 * b1 / n, 100.0 * b3 / n};
}

Tensor<double> row(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor<double>({1, n}, std::move(v));
}

Tensor<std::uint8_t> all_valid(int n) { return Tensor<std::uint8_t>({1, n}, 1); }

}  // namespace

TEST(Epe, HandExamples) {
  EXPECT_EQ(*epe(row({1.0, 2.0}), row({1.0, 2.0}), all_valid(2)), 0.0);
  EXPECT_EQ(*epe(row({2.0, 4.0}), row({1.0, 2.0}), all_valid(2)), 1.5);
  EXPECT_FALSE(epe(row({1.0}), row({2.0}), Tensor<std::uint8_t>({1, 1}, 0)).has_value());
  EXPECT_THROW(epe(row({1.0}), row({1.0, 2.0}), all_valid(2)), std::invalid_argument);
}

TEST(OutlierRate, CountingExamples) {
  const Tensor<double> gt = row({0.0, 0.0, 0.0}), pred = row({0.5, -1.5, 3.5});
  EXPECT_EQ(*outlier_rate(gt, gt, all_valid(3), 1.0), 0.0);
  EXPECT_NEAR(*outlier_rate(pred, gt, all_valid(3), 1.0), 200.0 / 3.0, 1e-12);
  EXPECT_NEAR(*outlier_rate(pred, gt, all_valid(3), 3.0), 100.0 / 3.0, 1e-12);
  EXPECT_EQ(*outlier_rate(row({1.0}), row({0.0}), all_valid(1), 1.0), 0.0);  // strict inequality
  EXPECT_THROW(outlier_rate(pred, gt, all_valid(3), 0.0), std::invalid_argument);
}

TEST(Metrics, MatchLoopReferenceOnRandomMaps) {
  std::mt19937_64 rng(81);
  std::bernoulli_distribution keep(0.7);
  for (int k = 0; k < 20; ++k) {
    const Tensor<double> p = random_tensor({12, 17}, rng, 0.0, 40.0), g = random_tensor({12, 17}, rng, 0.0, 40.0);
    Tensor<std::uint8_t> m({12, 17});
    for (auto& v : m.data()) v = keep(rng);
    const LoopRef ref = loop_metrics(p, g, m);
    EXPECT_NEAR(*epe(p, g, m), ref.epe, 1e-6);
    EXPECT_NEAR(*outlier_rate(p, g, m, 1.0), ref.d1, 1e-6);
    EXPECT_NEAR(*outlier_rate(p, g, m, 3.0), ref.d3, 1e-6);
  }
}

TEST(Metrics, PermutationInvariantAndMonotoneInThreshold) {
  std::mt19937_64 rng(82);
  const Tensor<double> p = random_tensor({1, 200}, rng, 0.0, 10.0), g = random_tensor({1, 200}, rng, 0.0, 10.0);
  Tensor<std::uint8_t> m({1, 200});
  for (int i = 0; i < 200; ++i) m[i] = i % 3 != 0;
  std::vector<int> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> p2({1, 200}), g2({1, 200});
  Tensor<std::uint8_t> m2({1, 200});
  for (int i = 0; i < 200; ++i) {
    p2[i] = p[perm[i]];
    g2[i] = g[perm[i]];
    m2[i] = m[perm[i]];
  }
  EXPECT_NEAR(*epe(p, g, m), *epe(p2, g2, m2), 1e-12);
  EXPECT_EQ(*outlier_rate(p, g, m, 2.0), *outlier_rate(p2, g2, m2, 2.0));
  double prev = 101.0;
  for (double t = 0.1; t < 12.0; t += 0.1) {
    const double r = *outlier_rate(p, g, m, t);
    EXPECT_LE(r, prev);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 100.0);
    prev = r;
  }
}

TEST(Metrics, KittiCompoundRuleIsStricter) {
  const Tensor<double> gt = row({100.0, 10.0}), pred = row({104.0, 14.0});  // 4px: 4% and 40%
  EXPECT_EQ(*outlier_rate(pred, gt, all_valid(2), 3.0), 100.0);
  EXPECT_EQ(*outlier_rate(pred, gt, all_valid(2), 3.0, true), 50.0);
}

TEST(Diagnostics, HandExamples) {
  Tensor<double> onehot({3, 1, 1}, 0.0);
  onehot[1] = 1.0;
  const auto a = distribution_diagnostics(onehot);
  EXPECT_EQ(a.entropy[0], 0.0);
  EXPECT_EQ(a.peak_ratio[0], kPeakRatioCap);
  const auto u = distribution_diagnostics(Tensor<double>({16, 1, 1}, 1.0 / 16.0));
  EXPECT_NEAR(u.entropy[0], std::log(16.0), 1e-12);
  EXPECT_NEAR(u.entropy[0], 2.7726, 5e-5);
  EXPECT_EQ(u.peak_ratio[0], 1.0);
  const auto h = distribution_diagnostics(Tensor<double>({3, 1, 1}, {0.5, 0.25, 0.25}));
  EXPECT_NEAR(h.entropy[0], 1.5 * std::log(2.0), 1e-12);
  EXPECT_NEAR(h.entropy[0], 1.0397, 5e-5);
  EXPECT_EQ(h.peak_ratio[0], 2.0);
}

TEST(Diagnostics, EntropyBoundsAndNormalizationCheck) {
  std::mt19937_64 rng(83);
  Tensor<double> p = random_tensor({8, 4, 5}, rng, 0.0, 1.0);
  for (int px = 0; px < 20; ++px) {
    double z = 0.0;
    for (int d = 0; d < 8; ++d) z += p[d * 20 + px];
    for (int d = 0; d < 8; ++d) p[d * 20 + px] /= z;
  }
  const auto r = distribution_diagnostics(p);
  ASSERT_EQ(r.entropy.shape(), (Shape{4, 5}));
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(r.entropy[i], 0.0);
    EXPECT_LE(r.entropy[i], std::log(8.0) + 1e-12);
    EXPECT_GE(r.peak_ratio[i], 1.0);
  }
  p[0] += 1e-3;
  EXPECT_THROW(distribution_diagnostics(p), std::invalid_argument);
}

TEST(EvalReport, EmptyImagesExcludedAndSerialized) {
  std::vector<ImageMetrics> per;
  per.push_back(evaluate_image("a", row({1.0, 5.0}), row({0.0, 0.0}), all_valid(2)));
  per.push_back(evaluate_image("b", row({1.0}), row({0.0}), Tensor<std::uint8_t>({1, 1}, 0)));
  const EvalReport r = summarize(per);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.valid_count, 2u);
  EXPECT_EQ(r.epe, 3.0);
  EXPECT_EQ(r.d1_3px, 50.0);
  const std::string lines = to_json_lines(r);
  std::istringstream in(lines);
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(in, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_TRUE(recs[1]["epe"].is_null());
  EXPECT_EQ(recs[2]["kind"], "summary");
  EXPECT_EQ(recs[2]["epe"].get<double>(), 3.0);
  const std::string table = to_table(r);
  EXPECT_NE(table.find("n/a"), std::string::npos);
  EXPECT_NE(table.find("3.0000"), std::string::npos);
}
