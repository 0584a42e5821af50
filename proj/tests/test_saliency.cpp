#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace instxai;
using testsupport::identity_model;
using testsupport::random_tensor;

namespace {

std::vector<Index3> cube(const Index3& lo, int n) {
  std::vector<Index3> v;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) v.push_back({lo[0] + z, lo[1] + y, lo[2] + x});
  return v;
}

bool in(const std::vector<Index3>& s, const Index3& p) {
  return std::find(s.begin(), s.end(), p) != s.end();
}

Graph<double> small_unet(std::uint64_t seed) {
  UNetConfig c;
  c.base_channels = 3;
  c.patch_extent = 16;
  Graph<double> g = build_unet<double>(c, seed);
  std::mt19937_64 rng(seed);
  for (auto& p : g.parameters())
    if (p.dims.size() == 1)
      for (double& v : p.values) v = std::normal_distribution<double>(0.0, 0.1)(rng);
  return g;
}

// Whole-volume backward of one seed, no windowing.
Tensor<double> full_gradient(const Graph<double>& g, const Tensor<double>& x,
                             const Tensor<double>& seed) {
  const Tape<double> t = forward(g, x);
  return backward(t, seed).wrt(g.inputs()[0]);
}

}  // namespace

TEST(IdentityModel, AverageAndSignedMax) {
  const Graph<double> g = identity_model(2);
  const Tensor<double> x(Shape{2, 8, 8, 8}, 0.5);
  const NoiseSpec none{1, 0.0, 1};
  const std::vector<std::vector<Index3>> omegas{
      {{3, 4, 5}}, {{1, 1, 1}, {1, 1, 2}, {1, 2, 1}, {5, 5, 5}}, cube({2, 2, 2}, 4)};
  for (const auto& omega : omegas) {
    ASSERT_TRUE(omega.size() == 1 || omega.size() == 4 || omega.size() == 64);
    const SaliencyMap avg = smoothgrad_instance_avg(g, x, omega, none);
    const SaliencyMap mx = smoothgrad_instance_max(g, x, omega, none);
    EXPECT_EQ(avg.method, "vanilla");
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          const bool inside = in(omega, {z, y, xx});
          EXPECT_EQ(avg.values(0, z, y, xx), inside ? 1.0 / double(omega.size()) : 0.0);
          EXPECT_EQ(mx.values(0, z, y, xx), inside ? 1.0 : 0.0);
          EXPECT_EQ(avg.values(1, z, y, xx), 0.0);
          EXPECT_EQ(mx.values(1, z, y, xx), 0.0);
        }
  }
}

TEST(SmoothGrad, DegenerateNoiseEqualsVanilla) {
  const Graph<double> g = small_unet(1);
  std::mt19937_64 rng(1);
  const Tensor<double> x = random_tensor(Shape{2, 32, 32, 32}, rng);
  const auto omega = cube({10, 12, 14}, 3);
  const SaliencyMap m = smoothgrad_instance_avg(g, x, omega, NoiseSpec{1, 0.0, 9});
  EXPECT_EQ(m.values.values(), instance_gradients(g, x, omega).values());
}

TEST(SmoothGrad, SingleVoxelAverageEqualsMax) {
  const Graph<double> g = small_unet(2);
  std::mt19937_64 rng(2);
  const Tensor<double> x = random_tensor(Shape{2, 32, 32, 32}, rng);
  const std::vector<Index3> omega{{16, 9, 20}};
  const NoiseSpec ns{3, 0.05, 4};
  EXPECT_EQ(smoothgrad_instance_avg(g, x, omega, ns).values.values(),
            smoothgrad_instance_max(g, x, omega, ns).values.values());
}

TEST(SmoothGrad, LinearModelIgnoresNoise) {
  Graph<double> g;
  int c = g.add_input(2);
  c = g.add_conv3d(c, 2, {3, 3, 3});
  g.set_output(g.add_conv3d(c, 1, {3, 3, 3}));
  g.init_parameters(5);
  std::mt19937_64 rng(5);
  const Tensor<double> x = random_tensor(Shape{2, 12, 12, 12}, rng);
  const auto omega = cube({4, 4, 4}, 2);
  const SaliencyMap a = smoothgrad_instance_avg(g, x, omega, NoiseSpec{1, 0.0, 1});
  const SaliencyMap b = smoothgrad_instance_avg(g, x, omega, NoiseSpec{6, 0.3, 1});
  for (std::size_t i = 0; i < a.values.size(); ++i)
    EXPECT_NEAR(a.values.data()[i], b.values.data()[i], 1e-12);
}

TEST(InstanceGradients, WindowMatchesWholeVolumePass) {
  const Graph<double> g = small_unet(3);
  std::mt19937_64 rng(3);
  const Tensor<double> x = random_tensor(Shape{2, 48, 40, 32}, rng);
  const std::vector<Index3> omega{{5, 6, 7}, {5, 6, 8}, {6, 6, 8}, {30, 20, 25}};
  Tensor<double> seed(Shape{2, 48, 40, 32});
  for (const Index3& v : omega) seed.at(1, v) = 1.0 / 4.0;
  const Tensor<double> want = full_gradient(g, x, seed);
  const Tensor<double> got = instance_gradients(g, x, omega);
  for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(got.data()[i], want.data()[i], 1e-12);
}

TEST(SignedMax, MatchesPerVoxelBruteForce) {
  const Graph<double> g = small_unet(4);
  std::mt19937_64 rng(4);
  const Tensor<double> x = random_tensor(Shape{2, 32, 32, 32}, rng);
  const std::vector<Index3> omega{{10, 10, 10}, {10, 11, 10}, {11, 11, 11}, {12, 10, 11}};
  Tensor<double> best(x.shape());
  for (const Index3& v : omega) {
    Tensor<double> seed(Shape{2, 32, 32, 32});
    seed.at(1, v) = 1;
    const Tensor<double> gr = full_gradient(g, x, seed);
    for (std::size_t i = 0; i < gr.size(); ++i)
      if (std::abs(gr.data()[i]) > std::abs(best.data()[i])) best.data()[i] = gr.data()[i];
  }
  const SaliencyMap m = smoothgrad_instance_max(g, x, omega, NoiseSpec{1, 0.0, 1});
  for (std::size_t i = 0; i < best.size(); ++i) ASSERT_NEAR(m.values.data()[i], best.data()[i], 1e-12);
}

TEST(Saliency, ZeroBeyondReceptiveField) {
  const Graph<double> g = small_unet(5);
  const Index3 rf = receptive_field(g);
  std::mt19937_64 rng(5);
  const Tensor<double> x = random_tensor(Shape{2, 64, 48, 48}, rng);
  const auto omega = cube({30, 20, 22}, 3);
  const Box allowed = dilate(Box{{30, 20, 22}, {33, 23, 25}}, rf);
  const NoiseSpec ns{2, 0.05, 3};
  for (const SaliencyMap& m :
       {smoothgrad_instance_avg(g, x, omega, ns), smoothgrad_instance_max(g, x, omega, ns)}) {
    std::size_t nonzero = 0;
    for (int c = 0; c < 2; ++c)
      for (int z = 0; z < 64; ++z)
        for (int y = 0; y < 48; ++y)
          for (int xx = 0; xx < 48; ++xx) {
            const double v = m.values(c, z, y, xx);
            if (v != 0) ++nonzero;
            if (!allowed.contains(Index3{z, y, xx})) {
              ASSERT_EQ(v, 0.0);
            }
          }
    EXPECT_GT(nonzero, 0u);
  }
}

TEST(Saliency, DeterministicUnderSeed) {
  const Graph<double> g = small_unet(6);
  std::mt19937_64 rng(6);
  const Tensor<double> x = random_tensor(Shape{2, 32, 32, 32}, rng);
  const auto omega = cube({8, 8, 8}, 2);
  const NoiseSpec ns{3, 0.1, 77};
  EXPECT_EQ(smoothgrad_instance_max(g, x, omega, ns).values,
            smoothgrad_instance_max(g, x, omega, ns).values);
  NoiseSpec other = ns;
  other.seed = 78;
  EXPECT_NE(smoothgrad_instance_avg(g, x, omega, ns).values,
            smoothgrad_instance_avg(g, x, omega, other).values);
}

TEST(Saliency, InvalidInputsRejected) {
  const Graph<double> g = identity_model(2);
  const Tensor<double> x(Shape{2, 4, 4, 4});
  EXPECT_THROW(instance_gradients(g, x, {}), error);
  EXPECT_THROW(instance_gradients(g, x, {{4, 0, 0}}), error);
  EXPECT_THROW(smoothgrad_instance_avg(g, x, {{0, 0, 0}}, NoiseSpec{0, 0.1, 1}), error);
  EXPECT_THROW(smoothgrad_instance_avg(g, x, {{0, 0, 0}}, NoiseSpec{1, -0.1, 1}), error);
  EXPECT_THROW(instance_gradients(g, Tensor<double>(Shape{1, 4, 4, 4}), {{0, 0, 0}}), shape_error);
}

TEST(OmegaSubsample, CapAndOrder) {
  const auto all = omega_subsample(10, 0, 1);
  EXPECT_EQ(all.size(), 10u);
  const auto few = omega_subsample(100, 7, 3);
  ASSERT_EQ(few.size(), 7u);
  EXPECT_TRUE(std::is_sorted(few.begin(), few.end()));
  EXPECT_EQ(std::set<std::size_t>(few.begin(), few.end()).size(), 7u);
  EXPECT_EQ(few, omega_subsample(100, 7, 3));
}

TEST(SignedMax, CapRecordedInMetadata) {
  const Graph<double> g = identity_model(1);
  const Tensor<double> x(Shape{1, 8, 8, 8});
  SaliencyOptions so;
  so.omega_cap = 5;
  const SaliencyMap m = smoothgrad_instance_max(g, x, cube({0, 0, 0}, 3), NoiseSpec{1, 0, 1}, so);
  EXPECT_EQ(m.params.at("cap"), "5");
  EXPECT_EQ(m.params.at("omega_used"), "5");
  double ones = 0;
  for (double v : m.values.values()) ones += v;
  EXPECT_EQ(ones, 5.0);  // only the subsampled domain voxels select themselves
}

// ------------------------------------------------------------- Grad-CAM++

namespace {

// Input -> relu "act" -> 1x1 conv with weight 1 (identity head).
Graph<double> single_map_model() {
  Graph<double> g;
  const int in = g.add_input(1);
  const int act = g.add_relu(in, "act");
  const int out = g.add_conv3d(act, 1, {1, 1, 1}, "logits");
  g.set_output(out);
  g.parameters()[std::size_t(g.node(out).weight)].values = {1.0};
  g.parameters()[std::size_t(g.node(out).bias)].values = {0.0};
  return g;
}

// alpha = g^2 / (2 g^2 + g^3 sum A)
double alpha_oracle(double g, double sum_a) {
  const double den = 2 * g * g + g * g * g * sum_a;
  return den == 0 ? 0.0 : g * g / den;
}

}  // namespace

TEST(GradCamPP, HandCase) {
  const Graph<double> g = single_map_model();
  Tensor<double> x(Shape{1, 4, 4, 4});
  const Index3 p{1, 2, 3};
  x.at(0, p) = 2.0;
  GradCamOptions o;
  o.layer = "act";
  // g[p] = 1, sum A = 2: alpha = 1 / (2 + 2) and M[p] = alpha * relu(1) * A[p]
  const double want = alpha_oracle(1.0, 2.0) * 1.0 * 2.0;
  EXPECT_DOUBLE_EQ(want, 0.5);
  for (const SaliencyMap& m : {gradcampp_class(g, x, o), gradcampp_instance(g, x, {p}, o)}) {
    EXPECT_FALSE(m.empty);
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 4; ++y)
        for (int xx = 0; xx < 4; ++xx)
          EXPECT_DOUBLE_EQ(m.values(0, z, y, xx), (Index3{z, y, xx} == p ? want : 0.0));
  }
}

TEST(GradCamPP, NothingAboveThreshold) {
  const Graph<double> g = single_map_model();
  const Tensor<double> x(Shape{1, 4, 4, 4}, -1.0);
  GradCamOptions o;
  o.layer = "act";
  const SaliencyMap m = gradcampp_class(g, x, o);
  EXPECT_TRUE(m.empty);
  for (double v : m.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradCamPP, UnknownLayerAndEmptyDomain) {
  const Graph<double> g = single_map_model();
  const Tensor<double> x(Shape{1, 4, 4, 4});
  GradCamOptions o;
  o.layer = "nope";
  EXPECT_THROW(gradcampp_class(g, x, o), error);
  o.layer = "act";
  EXPECT_THROW(gradcampp_instance(g, x, {}, o), error);
}

TEST(GradCamPP, OtherLesionGetsNoHeat) {
  const Graph<double> g = single_map_model();
  Tensor<double> x(Shape{1, 12, 12, 12});
  const auto a = cube({1, 1, 1}, 2), b = cube({8, 8, 8}, 2);
  for (const Index3& v : a) x.at(0, v) = 3.0;
  for (const Index3& v : b) x.at(0, v) = 3.0;
  GradCamOptions o;
  o.layer = "act";
  const SaliencyMap m = gradcampp_instance(g, x, a, o);
  for (const Index3& v : b) EXPECT_EQ(m.values.at(0, v), 0.0);
  for (const Index3& v : a) EXPECT_GT(m.values.at(0, v), 0.0);
}

TEST(GradCamPP, MatchesIndependentEvaluation) {
  const Graph<double> g = small_unet(7);
  std::mt19937_64 rng(7);
  const Tensor<double> x = random_tensor(Shape{2, 16, 16, 16}, rng);
  const auto omega = cube({5, 6, 7}, 3);
  GradCamOptions o;
  const SaliencyMap inst = gradcampp_instance(g, x, omega, o);
  const SaliencyMap cls = gradcampp_class(g, x, o);

  const Tape<double> t = forward(g, x);
  const int layer = g.find(o.layer);
  const Tensor<double>& A = t.value(layer);
  const std::size_t n = A.shape().spatial_size();
  // instance score
  Tensor<double> seed(t.output().shape());
  for (const Index3& v : omega) seed.at(1, v) = 1;
  const Tensor<double> G = backward(t, seed).wrt(layer);
  // class score: foreground probability above the threshold
  const Tensor<double> prob = foreground_probability(t.output());
  Tensor<double> cseed(t.output().shape());
  for (std::size_t i = 0; i < n; ++i)
    if (prob.data()[i] > o.threshold) cseed.channel(1)[i] = 1;
  const Tensor<double> CG = backward(t, cseed).wrt(layer);
  std::vector<double> hi(n, 0.0), hc(n, 0.0);
  for (int k = 0; k < A.shape().c; ++k) {
    double sa = 0;
    for (std::size_t i = 0; i < n; ++i) sa += A.channel(k)[i];
    double wk = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = G.channel(k)[i], gc = CG.channel(k)[i];
      hi[i] += alpha_oracle(gi, sa) * std::max(0.0, gi) * A.channel(k)[i];
      wk += alpha_oracle(gc, sa) * std::max(0.0, gc);
    }
    for (std::size_t i = 0; i < n; ++i) hc[i] += wk * A.channel(k)[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(inst.values.data()[i], std::max(0.0, hi[i]), 1e-12);
    EXPECT_NEAR(cls.values.data()[i], std::max(0.0, hc[i]), 1e-12);
    EXPECT_GE(inst.values.data()[i], 0.0);
    EXPECT_GE(cls.values.data()[i], 0.0);
  }
}

TEST(GradCamPP, LowResolutionLayerUpsampled) {
  const Graph<double> g = small_unet(8);
  std::mt19937_64 rng(8);
  const Tensor<double> x = random_tensor(Shape{2, 16, 16, 16}, rng);
  GradCamOptions o;
  o.layer = "bottleneck_relu";
  const SaliencyMap m = gradcampp_instance(g, x, cube({4, 4, 4}, 4), o);
  EXPECT_EQ(m.values.shape(), (Shape{1, 16, 16, 16}));
  for (double v : m.values.values()) EXPECT_GE(v, 0.0);
}

TEST(Upsample, TrilinearPreservesConstantsAndInterpolates) {
  Tensor<double> t(Shape{1, 1, 1, 2});
  t(0, 0, 0, 0) = 0;
  t(0, 0, 0, 1) = 4;
  const Tensor<double> u = upsample_trilinear(t, {1, 1, 4});
  // output centres at 0.125, 0.375, 0.625, 0.875 of the input span
  EXPECT_DOUBLE_EQ(u(0, 0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(u(0, 0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(u(0, 0, 0, 2), 3.0);
  EXPECT_DOUBLE_EQ(u(0, 0, 0, 3), 4.0);
  const Tensor<double> c = upsample_trilinear(Tensor<double>(Shape{1, 2, 3, 2}, 1.5), {4, 6, 4});
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 1.5);
}

// ---------------------------------------------------------------- extrema

TEST(Extrema, Example) {
  Tensor<double> m(Shape{1, 1, 1, 3});
  m(0, 0, 0, 0) = -0.5;
  m(0, 0, 0, 1) = 0.05;
  m(0, 0, 0, 2) = 2.0;
  const Extrema e = saliency_extrema(m);
  EXPECT_EQ(e.max, 2.0);
  EXPECT_EQ(e.min, -0.5);
  EXPECT_EQ(e.positive_count, 1u);
  EXPECT_EQ(e.negative_count, 1u);
  EXPECT_EQ(e.positive_median, 2.0);
  EXPECT_EQ(e.negative_median, -0.5);
  EXPECT_FALSE(e.empty);
}

TEST(Extrema, AllZeroIsEmpty) {
  EXPECT_TRUE(saliency_extrema(Tensor<double>(Shape{1, 2, 2, 2})).empty);
}

TEST(Extrema, Antisymmetry) {
  std::mt19937_64 rng(9);
  const Tensor<double> m = random_tensor(Shape{2, 3, 3, 3}, rng);
  Tensor<double> neg = m;
  for (double& v : neg.values()) v = -v;
  for (int c = 0; c < 2; ++c) {
    const Extrema a = saliency_extrema(m, c), b = saliency_extrema(neg, c);
    EXPECT_EQ(a.max, -b.min);
    EXPECT_EQ(a.min, -b.max);
    EXPECT_EQ(a.positive_median, -b.negative_median);
  }
}

TEST(Extrema, GradCamMapRejected) {
  SaliencyMap m;
  m.method = "gradcampp";
  m.values = Tensor<double>(Shape{1, 1, 1, 1});
  EXPECT_THROW(saliency_extrema(m), error);
}

TEST(SaliencyMap, MetadataInMetaVolume) {
  const Graph<double> g = identity_model(2);
  const SaliencyMap m =
      smoothgrad_instance_max(g, Tensor<double>(Shape{2, 4, 4, 4}), {{1, 1, 1}}, NoiseSpec{2, 0.05, 3});
  const MetaVolume mv = m.to_metavolume();
  EXPECT_EQ(mv.meta.at("method"), "smoothgrad");
  EXPECT_EQ(mv.meta.at("aggregation"), "signed-max");
  EXPECT_EQ(mv.shape(), (Shape{2, 4, 4, 4}));
}
