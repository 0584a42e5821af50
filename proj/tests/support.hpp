#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <queue>
#include <random>
#include <set>
#include <vector>

#include "instxai/instxai.hpp"

namespace testsupport {

using namespace instxai;

// Random graph with at most `max_layers` parameterized / nonlinear layers.
// Output stays at input resolution; extents must be even.
inline Graph<double> random_graph(std::mt19937_64& rng, int max_layers, int in_channels) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  Graph<double> g;
  int cur = g.add_input(in_channels);
  int skip = cur;
  const int layers = pick(1, max_layers);
  for (int l = 0; l < layers; ++l) {
    const int ch = pick(1, 3);
    switch (pick(0, 4)) {
      case 0:
      case 1:
        cur = g.add_conv3d(cur, ch, {3, 3, 3});
        break;
      case 2:
        cur = g.add_conv3d(cur, ch, {1, 3, 3});
        cur = g.add_relu(cur);
        break;
      case 3:
        cur = g.add_max_pool(cur, {2, 2, 2});
        cur = g.add_conv_transpose3d(cur, ch, {2, 2, 2});
        break;
      default:
        if (g.channels_of(skip) == g.channels_of(cur) && skip != cur)
          cur = g.add_add(cur, skip);
        else
          cur = g.add_concat({cur, skip});
        break;
    }
    if (pick(0, 2) == 0) skip = cur;
  }
  cur = g.add_conv3d(cur, pick(1, 2), {1, 1, 1});
  g.set_output(cur);
  g.init_parameters(rng());
  // nonzero biases so relus are not all centred on the same point
  for (auto& p : g.parameters())
    if (p.dims.size() == 1)
      for (double& v : p.values) v = std::normal_distribution<double>(0.0, 0.1)(rng);
  return g;
}

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng) {
  Tensor<double> t(s);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// logits = input channel 0 (1x1x1 conv with weight 1 on channel 0, 0 elsewhere).
template <class T = double>
Graph<T> identity_model(int modalities) {
  Graph<T> g;
  const int in = g.add_input(modalities);
  const int out = g.add_conv3d(in, 1, {1, 1, 1}, "logits");
  g.set_output(out);
  auto& w = g.parameters()[std::size_t(g.node(out).weight)];
  std::fill(w.values.begin(), w.values.end(), T(0));
  w.values[0] = T(1);
  return g;
}

// Independent labeling: breadth-first flood fill over explicit offsets.
inline std::vector<std::set<std::array<int, 3>>> flood_fill(const Mask& m, int conn) {
  const Shape& s = m.shape();
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nz = (dz != 0) + (dy != 0) + (dx != 0);
        if (nz == 0) continue;
        if (conn == 6 && nz > 1) continue;
        if (conn == 18 && nz > 2) continue;
        offs.push_back({dz, dy, dx});
      }
  std::vector<int> seen(s.spatial_size(), 0);
  std::vector<std::set<std::array<int, 3>>> comps;
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        const std::size_t i = (std::size_t(z) * s.y + y) * s.x + x;
        if (!m(0, z, y, x) || seen[i]) continue;
        std::set<std::array<int, 3>> comp;
        std::queue<std::array<int, 3>> q;
        q.push({z, y, x});
        seen[i] = 1;
        while (!q.empty()) {
          const auto v = q.front();
          q.pop();
          comp.insert(v);
          for (const auto& o : offs) {
            const int a = v[0] + o[0], b = v[1] + o[1], c = v[2] + o[2];
            if (a < 0 || b < 0 || c < 0 || a >= s.z || b >= s.y || c >= s.x) continue;
            const std::size_t j = (std::size_t(a) * s.y + b) * s.x + c;
            if (!m(0, a, b, c) || seen[j]) continue;
            seen[j] = 1;
            q.push({a, b, c});
          }
        }
        comps.push_back(std::move(comp));
      }
  return comps;
}

inline std::set<std::set<std::array<int, 3>>> as_sets(const std::vector<LesionInstance>& v) {
  std::set<std::set<std::array<int, 3>>> out;
  for (const auto& i : v) {
    std::set<std::array<int, 3>> s;
    for (const Index3& p : i.voxels) s.insert({p[0], p[1], p[2]});
    out.insert(std::move(s));
  }
  return out;
}

// Count of U values over every arrangement of n x's among n + m ranks.
inline std::vector<double> brute_force_u(int n, int m) {
  std::vector<double> counts(std::size_t(n * m) + 1, 0.0);
  const int N = n + m;
  for (unsigned mask = 0; mask < (1u << N); ++mask) {
    if (__builtin_popcount(mask) != n) continue;
    int u = 0;
    int ys_below = 0;
    for (int r = 0; r < N; ++r) {
      if (mask & (1u << r))
        u += ys_below;
      else
        ++ys_below;
    }
    counts[std::size_t(u)] += 1;
  }
  return counts;
}

}  // namespace testsupport
