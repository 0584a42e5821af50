#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace instxai;
using testsupport::random_graph;
using testsupport::random_tensor;

namespace {

Graph<double> single_conv(int k) {
  Graph<double> g;
  const int in = g.add_input(1);
  g.set_output(g.add_conv3d(in, 1, {k, k, k}));
  return g;
}

}  // namespace

TEST(Forward, DeltaKernelIsIdentity) {
  Graph<double> g;
  const int in = g.add_input(1);
  const int c = g.add_conv3d(in, 1, {1, 3, 3});
  g.set_output(c);
  auto& w = g.parameters()[std::size_t(g.node(c).weight)].values;
  std::fill(w.begin(), w.end(), 0.0);
  w[4] = 1.0;  // centre of the 1x3x3 kernel
  std::mt19937_64 rng(3);
  const Tensor<double> x = random_tensor(Shape{1, 1, 3, 3}, rng);
  EXPECT_EQ(forward(g, x).output().values(), x.values());
}

TEST(Forward, Relu) {
  Graph<double> g;
  g.set_output(g.add_relu(g.add_input(1)));
  Tensor<double> x(Shape{1, 1, 1, 2});
  x(0, 0, 0, 0) = -2;
  x(0, 0, 0, 1) = 3;
  const Tape<double> t = forward(g, x);
  const auto& y = t.output();
  EXPECT_EQ(y(0, 0, 0, 0), 0.0);
  EXPECT_EQ(y(0, 0, 0, 1), 3.0);
}

TEST(Forward, SoftmaxSymmetric) {
  Graph<double> g;
  g.set_output(g.add_softmax(g.add_input(2)));
  const Tape<double> t = forward(g, Tensor<double>(Shape{2, 1, 1, 1}));
  const auto& y = t.output();
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(1, 0, 0, 0), 0.5);
}

TEST(Forward, SoftmaxSumsToOne) {
  Graph<double> g;
  g.set_output(g.add_softmax(g.add_input(3)));
  std::mt19937_64 rng(5);
  const Tape<double> t = forward(g, random_tensor(Shape{3, 2, 3, 4}, rng));
  const auto& y = t.output();
  for (std::size_t i = 0; i < y.shape().spatial_size(); ++i)
    EXPECT_NEAR(y.channel(0)[i] + y.channel(1)[i] + y.channel(2)[i], 1.0, 1e-12);
}

TEST(Forward, ShapeMismatchThrows) {
  Graph<double> g = single_conv(3);
  EXPECT_THROW(forward(g, Tensor<double>(Shape{2, 4, 4, 4})), shape_error);
}

TEST(Forward, NonFiniteThrows) {
  Graph<double> g = single_conv(1);
  Tensor<double> x(Shape{1, 2, 2, 2});
  x(0, 0, 0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(g, x), numeric_error);
}

TEST(Backward, IdentityGraphSeedsThrough) {
  Graph<double> g = testsupport::identity_model(1);
  const Tape<double> t = forward(g, Tensor<double>(Shape{1, 3, 3, 3}));
  Tensor<double> seed(t.output().shape());
  seed(0, 1, 2, 0) = 1;
  const auto gr = backward(t, seed);
  EXPECT_EQ(gr.wrt(g.inputs()[0]).values(), seed.values());
}

TEST(Backward, ReluBlocksNegative) {
  Graph<double> g;
  g.set_output(g.add_relu(g.add_input(1)));
  Tensor<double> x(Shape{1, 1, 1, 2});
  x(0, 0, 0, 0) = -1;
  x(0, 0, 0, 1) = 2;
  const Tape<double> t = forward(g, x);
  const auto gr = backward(t, Tensor<double>(x.shape(), 1.0));
  EXPECT_EQ(gr.wrt(0)(0, 0, 0, 0), 0.0);
  EXPECT_EQ(gr.wrt(0)(0, 0, 0, 1), 1.0);
}

TEST(Backward, BeforeForwardThrows) {
  Tape<double> t;
  EXPECT_THROW(backward(t, Tensor<double>(Shape{1, 1, 1, 1})), error);
}

TEST(Backward, SeedShapeMismatchThrows) {
  Graph<double> g = single_conv(3);
  const Tape<double> t = forward(g, Tensor<double>(Shape{1, 4, 4, 4}));
  EXPECT_THROW(backward(t, Tensor<double>(Shape{2, 4, 4, 4})), shape_error);
}

TEST(Backward, Linearity) {
  std::mt19937_64 rng(11);
  const Graph<double> g = random_graph(rng, 4, 2);
  const Tensor<double> x = random_tensor(Shape{2, 4, 6, 4}, rng);
  const Tape<double> t = forward(g, x);
  const Tensor<double> s1 = random_tensor(t.output().shape(), rng);
  const Tensor<double> s2 = random_tensor(t.output().shape(), rng);
  Tensor<double> s3(s1.shape());
  for (std::size_t i = 0; i < s3.size(); ++i) s3.data()[i] = 2.0 * s1.data()[i] - 0.5 * s2.data()[i];
  const auto g1 = backward(t, s1).wrt(0);
  const auto g2 = backward(t, s2).wrt(0);
  const auto g3 = backward(t, s3).wrt(0);
  for (std::size_t i = 0; i < g3.size(); ++i)
    EXPECT_NEAR(g3.data()[i], 2.0 * g1.data()[i] - 0.5 * g2.data()[i], 1e-12);
}

TEST(FiniteDifference, LinearConvIsExact) {
  Graph<double> g = single_conv(3);
  g.init_parameters(2);
  std::mt19937_64 rng(2);
  const Tensor<double> x = random_tensor(Shape{1, 4, 4, 4}, rng);
  // probe every output voxel against a neighbouring input voxel
  std::vector<FdProbe> probes;
  for (int i = 0; i < 20; ++i) {
    FdProbe p;
    p.out_voxel = {i % 4, (i / 4) % 4, 1};
    p.in_voxel = {i % 4, (i / 4) % 4, 2};
    probes.push_back(p);
  }
  const FdReport r = finite_difference_check(g, {x}, 1e-5, probes);
  EXPECT_EQ(r.checked, 20);
  EXPECT_LE(r.max_rel_error, 1e-8);
}

TEST(FiniteDifference, TwoLayerReluNet) {
  std::mt19937_64 rng(7);
  Graph<double> g;
  int c = g.add_input(2);
  c = g.add_relu(g.add_conv3d(c, 3, {3, 3, 3}));
  g.set_output(g.add_conv3d(c, 2, {3, 3, 3}));
  g.init_parameters(7);
  const Tensor<double> x = random_tensor(Shape{2, 5, 5, 5}, rng);
  // pairs inside each other's receptive field
  std::vector<FdProbe> probes;
  for (int i = 0; i < 200; ++i) {
    FdProbe p;
    auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
    p.out_channel = pick(2);
    p.in_channel = pick(2);
    p.out_voxel = {pick(5), pick(5), pick(5)};
    for (int a = 0; a < 3; ++a) p.in_voxel[a] = std::clamp(p.out_voxel[a] + pick(5) - 2, 0, 4);
    probes.push_back(p);
  }
  const FdReport r = finite_difference_check(g, {x}, 1e-5, probes);
  EXPECT_GT(r.checked, 150);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(FiniteDifference, MaxPoolTieIsSkipped) {
  Graph<double> g;
  int c = g.add_input(1);
  c = g.add_max_pool(c, {2, 2, 2});
  g.set_output(c);
  Tensor<double> x(Shape{1, 2, 2, 2}, 1.0);  // all tied
  FdProbe p;
  p.in_voxel = {0, 0, 0};
  const FdReport r = finite_difference_check(g, {x}, 1e-5, {p});
  EXPECT_EQ(r.skipped, 1);
  EXPECT_EQ(r.checked, 0);
}

TEST(FiniteDifference, RandomGraphs) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    const Graph<double> g = random_graph(rng, 4, 2);
    const Index3 ext{4, 4, 6};
    const Tensor<double> x = random_tensor(Shape{2, ext[0], ext[1], ext[2]}, rng);
    const auto probes = sample_probes(g, ext, 40, rng);
    const FdReport r = finite_difference_check(g, {x}, 1e-5, probes);
    EXPECT_LE(r.max_rel_error, 1e-4) << "graph " << trial;
  }
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  Graph<double> g;
  int c = g.add_input(1);
  c = g.add_relu(g.add_conv3d(c, 2, {3, 3, 3}));
  g.set_output(g.add_conv3d(c, 1, {1, 1, 1}));
  g.init_parameters(9);
  std::mt19937_64 rng(9);
  const Tensor<double> x = random_tensor(Shape{1, 3, 3, 3}, rng);
  const Tensor<double> seed = random_tensor(Shape{1, 3, 3, 3}, rng);
  const auto objective = [&](const Graph<double>& gg) {
    const Tape<double> t = forward(gg, x);
    double s = 0;
    for (std::size_t i = 0; i < seed.size(); ++i) s += seed.data()[i] * t.output().data()[i];
    return s;
  };
  Gradients<double> gr;
  backward(forward(g, x), seed, gr, BackwardOptions{true});
  for (std::size_t p = 0; p < g.parameters().size(); ++p)
    for (std::size_t j = 0; j < g.parameters()[p].size(); j += 5) {
      Graph<double> a = g, b = g;
      a.parameters()[p].values[j] += 1e-6;
      b.parameters()[p].values[j] -= 1e-6;
      const double fd = (objective(a) - objective(b)) / 2e-6;
      EXPECT_NEAR(gr.param[p][j], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Backward, ParameterGradientsAccumulateUntilZeroed) {
  Graph<double> g = single_conv(3);
  g.init_parameters(4);
  std::mt19937_64 rng(4);
  const Tensor<double> x = random_tensor(Shape{1, 4, 4, 4}, rng);
  const Tape<double> t = forward(g, x);
  const Tensor<double> seed(t.output().shape(), 1.0);
  Gradients<double> gr;
  backward(t, seed, gr, BackwardOptions{true});
  const auto once = gr.param;
  backward(t, seed, gr, BackwardOptions{true});
  for (std::size_t p = 0; p < once.size(); ++p)
    for (std::size_t j = 0; j < once[p].size(); ++j)
      EXPECT_NEAR(gr.param[p][j], 2 * once[p][j], 1e-12);
  gr.zero_parameters();
  for (const auto& p : gr.param)
    for (double v : p) EXPECT_EQ(v, 0.0);
}

TEST(Forward, RestrictedBoxMatchesFullPass) {
  std::mt19937_64 rng(13);
  const Graph<double> g = random_graph(rng, 4, 1);
  const Tensor<double> x = random_tensor(Shape{1, 8, 8, 8}, rng);
  const Tape<double> full = forward(g, x);
  const Box b{{2, 4, 2}, {4, 6, 6}};
  const Tape<double> part = forward(g, x, ForwardOptions{b});
  for (int c = 0; c < full.output().shape().c; ++c)
    for (int z = b.lo[0]; z < b.hi[0]; ++z)
      for (int y = b.lo[1]; y < b.hi[1]; ++y)
        for (int xx = b.lo[2]; xx < b.hi[2]; ++xx)
          EXPECT_EQ(part.output()(c, z, y, xx), full.output()(c, z, y, xx));
}

TEST(Forward, Deterministic) {
  std::mt19937_64 rng(17);
  const Graph<double> g = random_graph(rng, 4, 2);
  const Tensor<double> x = random_tensor(Shape{2, 4, 4, 4}, rng);
  EXPECT_EQ(forward(g, x).output().values(), forward(g, x).output().values());
}

TEST(ReceptiveField, SingleAndStackedConvs) {
  EXPECT_EQ(receptive_field(single_conv(3)), (Index3{1, 1, 1}));
  Graph<double> g;
  int c = g.add_input(1);
  c = g.add_conv3d(c, 1, {3, 3, 3});
  c = g.add_conv3d(c, 1, {3, 3, 3});
  g.set_output(c);
  EXPECT_EQ(receptive_field(g), (Index3{2, 2, 2}));
}

TEST(ReceptiveField, UnsupportedKernelThrows) {
  Graph<double> g;
  int c = g.add_input(1);
  c = g.add_max_pool(c, {2, 2, 2});
  g.set_output(c);  // output below input resolution
  EXPECT_THROW(receptive_field(g), error);
}

// Probe: seed a single output voxel and measure how far the input gradient reaches.
TEST(ReceptiveField, ToyUNetMatchesGradientProbe) {
  UNetConfig cfg;
  cfg.base_channels = 4;
  const Graph<double> g = build_unet<double>(cfg, 3);
  const Index3 rf = receptive_field(g);
  const int E = 48;
  std::mt19937_64 rng(3);
  const Tensor<double> x = random_tensor(Shape{2, E, E, E}, rng);
  const Tape<double> t = forward(g, x);
  Index3 seen{0, 0, 0};
  Gradients<double> gr;
  for (int dz = 0; dz < 4; ++dz)
    for (int dy = 0; dy < 4; ++dy) {
      const Index3 p{20 + dz, 20 + dy, 20 + (dz + dy) % 4};
      Tensor<double> seed(t.output().shape());
      seed.at(1, p) = 1;
      backward(t, seed, gr);
      const Box nz = nonzero_box(gr.wrt(0));
      ASSERT_FALSE(nz.empty());
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(nz.lo[a], p[a] - rf[a]);
        EXPECT_LE(nz.hi[a] - 1, p[a] + rf[a]);
        seen[a] = std::max({seen[a], p[a] - nz.lo[a], nz.hi[a] - 1 - p[a]});
      }
    }
  EXPECT_EQ(seen, rf);
}
