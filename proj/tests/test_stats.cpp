#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace instxai;

TEST(UDistribution, MatchesEnumeration) {
  for (int n = 1; n <= 11; ++n)
    for (int m = 1; n + m <= 12; ++m) EXPECT_EQ(u_distribution(n, m), testsupport::brute_force_u(n, m)) << n << "," << m;
}

// Two-sided exact p by enumerating every split of the pooled values.
static double exact_p_oracle(const std::vector<double>& xs, const std::vector<double>& ys, double u) {
  std::vector<double> pool = xs;
  pool.insert(pool.end(), ys.begin(), ys.end());
  const int N = int(pool.size()), n = int(xs.size());
  double lo = 0, hi = 0, total = 0;
  for (unsigned mask = 0; mask < (1u << N); ++mask) {
    if (__builtin_popcount(mask) != n) continue;
    double v = 0;
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        if ((mask >> i & 1) && !(mask >> j & 1)) v += pool[std::size_t(i)] > pool[std::size_t(j)];
    total += 1;
    lo += v <= u;
    hi += v >= u;
  }
  return std::min(1.0, 2 * std::min(lo, hi) / total);
}

TEST(MannWhitney, SmallSampleExample) {
  const UTest t = mann_whitney_u({1, 2}, {3, 4});
  EXPECT_EQ(t.u, 0.0);
  EXPECT_TRUE(t.exact);
  EXPECT_NEAR(t.p, 1.0 / 3.0, 1e-12);
}

TEST(MannWhitney, ExactAgainstEnumeration) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + int(rng() % 6), m = 1 + int(rng() % std::uint64_t(12 - n));
    std::vector<double> xs(static_cast<std::size_t>(n)), ys(static_cast<std::size_t>(m));
    for (double& v : xs) v = nd(rng);
    for (double& v : ys) v = nd(rng) + 0.7;
    const UTest t = mann_whitney_u(xs, ys);
    ASSERT_TRUE(t.exact);
    double u = 0;
    for (double a : xs)
      for (double b : ys) u += a > b;
    EXPECT_EQ(t.u, u);
    EXPECT_NEAR(t.p, exact_p_oracle(xs, ys, u), 1e-12);
  }
}

// Reference p values from scipy.stats.mannwhitneyu(method="asymptotic").
TEST(MannWhitney, TiesUseNormalApproximation) {
  const UTest t = mann_whitney_u({1, 1, 2}, {1, 3, 4});
  EXPECT_FALSE(t.exact);
  EXPECT_EQ(t.u, 2.0);
  EXPECT_NEAR(t.p, 0.3536785173184648, 1e-12);
}

TEST(MannWhitney, LargeSamplesUseNormalApproximation) {
  const std::vector<double> a{0.12573,   -0.132105, 0.640423,  0.1049,    -0.535669,
                              0.361595,  1.304,     0.947081,  -0.703735, -1.265421,
                              -0.623274, 0.041326,  -2.325031, -0.218792, -1.245911,
                              -0.732267, -0.544259, -0.3163,   0.411631,  1.042513};
  const std::vector<double> b{0.371465,  1.866463,  -0.165195, 0.85151,  1.40347,
                              0.594012,  -0.243499, -0.421725, 0.042274, 0.720195,
                              -0.509618, 0.290824,  0.340775,  1.040846, 0.714659};
  const UTest t = mann_whitney_u(a, b);
  EXPECT_FALSE(t.exact);
  EXPECT_EQ(t.u, 85.0);
  EXPECT_NEAR(t.p, 0.031555214782181, 1e-10);
  const UTest r = mann_whitney_u(b, a);
  EXPECT_EQ(r.u, 20.0 * 15.0 - 85.0);
  EXPECT_NEAR(r.p, t.p, 1e-12);
}

TEST(MannWhitney, DegenerateSamples) {
  const UTest t = mann_whitney_u({2, 2, 2}, {2, 2});
  EXPECT_EQ(t.p, 1.0);
  EXPECT_THROW(mann_whitney_u({}, {1}), error);
}

TEST(Quantile, TypeSeven) {
  const std::vector<double> s{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.025), 1.075);
  EXPECT_DOUBLE_EQ(sample_median({5, 1, 3}), 3.0);
  EXPECT_DOUBLE_EQ(sample_median({4, 1, 3, 2}), 2.5);
}

TEST(Bootstrap, DeterministicAndOrdered) {
  std::mt19937_64 rng(3);
  std::vector<double> v(31);
  for (double& x : v) x = std::normal_distribution<double>(2.0, 1.0)(rng);
  const MedianCI a = bootstrap_median_ci(v, 1000, 5), b = bootstrap_median_ci(v, 1000, 5);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_LE(a.lo, a.median);
  EXPECT_LE(a.median, a.hi);
  EXPECT_LT(a.lo, a.hi);
  const MedianCI one = bootstrap_median_ci({7.0}, 100, 1);
  EXPECT_EQ(one.lo, 7.0);
  EXPECT_EQ(one.hi, 7.0);
  EXPECT_THROW(bootstrap_median_ci({}, 10, 1), error);
}
