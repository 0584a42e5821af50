#pragma once

// Two-sided Mann-Whitney U test and percentile bootstrap of the median.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "instxai/tensor.hpp"

namespace instxai {

struct UTest {
  double u = 0.0;  // statistic of the first sample: #(x > y) + 0.5 #(x == y)
  double p = 1.0;  // two-sided
  bool exact = false;
};

inline constexpr int kExactLimit = 12;  // n + m at or below: exact p if tie-free

// Number of arrangements of n x's and m y's giving each value of U, by the
// recurrence c(n, m, u) = c(n - 1, m, u - m) + c(n, m - 1, u).
inline std::vector<double> u_distribution(int n, int m) {
  // table[j][u] for the current n, all m' <= m
  std::vector<std::vector<double>> prev(std::size_t(m) + 1);
  for (int j = 0; j <= m; ++j) prev[std::size_t(j)] = {1.0};  // n = 0: U = 0
  for (int i = 1; i <= n; ++i) {
    std::vector<std::vector<double>> cur(std::size_t(m) + 1);
    cur[0] = {1.0};  // m = 0
    for (int j = 1; j <= m; ++j) {
      std::vector<double> c(std::size_t(i * j) + 1, 0.0);
      // largest element is an x: it beats all j y's
      const auto& a = prev[std::size_t(j)];
      for (std::size_t u = 0; u < a.size(); ++u) c[u + std::size_t(j)] += a[u];
      // largest element is a y
      const auto& b = cur[std::size_t(j - 1)];
      for (std::size_t u = 0; u < b.size(); ++u) c[u] += b[u];
      cur[std::size_t(j)] = std::move(c);
    }
    prev = std::move(cur);
  }
  return prev[std::size_t(m)];
}

inline UTest mann_whitney_u(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.empty() || ys.empty()) throw error("mann_whitney_u: empty sample");
  const std::size_t n = xs.size(), m = ys.size(), N = n + m;
  std::vector<std::pair<double, int>> all;
  all.reserve(N);
  for (double v : xs) all.push_back({v, 0});
  for (double v : ys) all.push_back({v, 1});
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_x = 0, tie_term = 0;
  bool ties = false;
  for (std::size_t i = 0; i < N;) {
    std::size_t j = i;
    while (j < N && all[j].first == all[i].first) ++j;
    const double t = double(j - i);
    const double mid = (double(i) + double(j) + 1.0) / 2.0;  // 1-based midrank
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_x += mid;
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j;
  }
  UTest r;
  r.u = rank_x - double(n) * double(n + 1) / 2.0;
  const double nm = double(n) * double(m);
  if (!ties && int(N) <= kExactLimit) {
    const auto dist = u_distribution(int(n), int(m));
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    const auto u = std::size_t(std::llround(r.u));
    double lo = 0, hi = 0;
    for (std::size_t k = 0; k < dist.size(); ++k) {
      if (k <= u) lo += dist[k];
      if (k >= u) hi += dist[k];
    }
    r.p = std::min(1.0, 2.0 * std::min(lo, hi) / total);
    r.exact = true;
    return r;
  }
  const double mu = nm / 2.0;
  const double var = nm / 12.0 * ((double(N) + 1.0) - tie_term / (double(N) * (double(N) - 1.0)));
  if (!(var > 0)) {
    r.p = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(r.u - mu) - 0.5) / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

struct MedianCI {
  double median = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

inline double sample_median(std::vector<double> v) {
  if (v.empty()) throw error("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// Type-7 quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& s, double q) {
  const double pos = q * double(s.size() - 1);
  const auto i = std::size_t(std::floor(pos));
  const std::size_t j = std::min(i + 1, s.size() - 1);
  return s[i] + (pos - double(i)) * (s[j] - s[i]);
}

// Percentile bootstrap confidence interval of the median.
inline MedianCI bootstrap_median_ci(const std::vector<double>& values, int resamples = 1000,
                                    std::uint64_t seed = 1, double level = 0.95) {
  if (values.empty()) throw error("bootstrap of an empty sample");
  MedianCI ci;
  ci.median = sample_median(values);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> meds(static_cast<std::size_t>(resamples)), draw(values.size());
  for (auto& md : meds) {
    for (double& d : draw) d = values[pick(rng)];
    md = sample_median(draw);
  }
  std::sort(meds.begin(), meds.end());
  ci.lo = quantile_sorted(meds, (1.0 - level) / 2.0);
  ci.hi = quantile_sorted(meds, 1.0 - (1.0 - level) / 2.0);
  return ci;
}

}  // namespace instxai
