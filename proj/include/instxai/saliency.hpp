#pragma once

// Instance-level explanation maps.
//
// Gradient maps explain the fully convolutional logit map of the target
// class: y[v] is the logit at v when the network is applied to the whole
// volume. Because the network is local, the forward and backward passes only
// run over an analysis window, the bounding box of the domain grown by the
// receptive field and snapped to the pooling grid. Inside that window the
// logits over the domain and their gradients are identical to a whole-volume
// pass; outside it the gradients are exactly zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "instxai/autodiff.hpp"
#include "instxai/graph.hpp"
#include "instxai/instances.hpp"
#include "instxai/tensor.hpp"
#include "instxai/volume.hpp"

namespace instxai {

struct NoiseSpec {
  int n = 50;
  double sigma = 0.05;
  std::uint64_t seed = 1;

  void validate() const {
    if (n < 1) throw error("noise sample count N must be >= 1");
    if (!(sigma >= 0.0)) throw error("noise sigma must be >= 0");
  }
};

inline constexpr int kDefaultOmegaCap = 512;

struct SaliencyOptions {
  int target_channel = -1;  // logit channel; -1 picks the last one
  int omega_cap = kDefaultOmegaCap;  // signed-max subsample cap, 0 = no cap
};

struct SaliencyMap {
  Tensor<double> values;  // [modalities or 1, Z, Y, X]
  std::string method;       // vanilla | smoothgrad | gradcampp
  std::string aggregation;  // average | signed-max | class | instance
  std::string target;       // instance id or "class"
  std::map<std::string, std::string> params;
  bool empty = false;  // Grad-CAM++ with nothing above threshold

  MetaVolume to_metavolume(Spacing sp = {1.0, 1.0, 1.0}) const {
    MetaVolume mv = MetaVolume::from(values, sp, DType::f64);
    mv.meta["method"] = method;
    mv.meta["aggregation"] = aggregation;
    mv.meta["target"] = target;
    for (const auto& [k, v] : params) mv.meta[k] = v;
    if (empty) mv.meta["empty"] = "1";
    return mv;
  }
};

namespace detail {

template <class T>
int target_channel(const Graph<T>& g, int requested) {
  const int c = g.channels_of(g.output());
  const int t = requested < 0 ? c - 1 : requested;
  if (t >= c) throw error("target channel " + std::to_string(t) + " out of range");
  return t;
}

inline Box omega_box(const std::vector<Index3>& omega, const Index3& extents) {
  if (omega.empty()) throw error("empty lesion domain");
  const Box bounds = Box::of(extents);
  Box b;
  for (const Index3& v : omega) {
    if (!bounds.contains(v)) throw error("lesion domain leaves the image");
    b = hull(b, box_around(v));
  }
  return b;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// Window over which a pass restricted to `omega_bbox` is exact.
template <class T>
Box analysis_window(const Graph<T>& g, const Index3& extents, const Box& omega_bbox) {
  const Index3 rf = receptive_field(g);
  const Index3 al = g.alignment();
  Box w = dilate(omega_bbox, rf);
  for (int a = 0; a < 3; ++a) {
    if (extents[a] % al[a] != 0)
      throw shape_error("volume extent " + std::to_string(extents[a]) +
                        " is not a multiple of the network alignment " +
                        std::to_string(al[a]));
    w.lo[a] = std::max(0, w.lo[a] - ((w.lo[a] % al[a]) + al[a]) % al[a]);
    const int rem = ((w.hi[a] % al[a]) + al[a]) % al[a];
    w.hi[a] = std::min(extents[a], rem ? w.hi[a] + al[a] - rem : w.hi[a]);
  }
  return w;
}

namespace detail {

// Shared state for gradient saliency over one domain.
template <class T>
struct GradientProblem {
  const Graph<T>* graph;
  Box window;
  Box omega_local;
  std::vector<Index3> omega_local_voxels;
  int channel;
  Tensor<T> x;  // window crop of the input

  GradientProblem(const Graph<T>& g, const Tensor<T>& input, const std::vector<Index3>& omega,
                  const SaliencyOptions& opts)
      : graph(&g) {
    if (input.shape().c != g.channels_of(g.inputs().front()))
      throw shape_error("saliency: input has " + std::to_string(input.shape().c) +
                        " channels, model expects " +
                        std::to_string(g.channels_of(g.inputs().front())));
    const Index3 ext = input.shape().spatial();
    const Box ob = omega_box(omega, ext);
    window = analysis_window(g, ext, ob);
    omega_local = ob;
    for (int a = 0; a < 3; ++a) {
      omega_local.lo[a] -= window.lo[a];
      omega_local.hi[a] -= window.lo[a];
    }
    for (const Index3& v : omega)
      omega_local_voxels.push_back(
          {v[0] - window.lo[0], v[1] - window.lo[1], v[2] - window.lo[2]});
    channel = target_channel(g, opts.target_channel);
    x = crop(input, window);
  }

  Tape<T> forward_at(const Tensor<T>& xin) const {
    return forward(*graph, xin, ForwardOptions{omega_local});
  }

  // Window-local map -> full-volume map of double values.
  Tensor<double> expand(const Tensor<T>& local, const Shape& full) const {
    Tensor<double> out(Shape{local.shape().c, full.z, full.y, full.x});
    paste(out, local.template cast<double>(), window.lo);
    return out;
  }
};

template <class T, class Rng>
Tensor<T> noisy(const Tensor<T>& x, double sigma, Rng& rng) {
  Tensor<T> out = x;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> nrm(0.0, 1.0);
  for (T& v : out.values()) v += T(sigma * nrm(rng));
  return out;
}

}  // namespace detail

// (1/|omega|) sum over omega of dy[v']/dx: one backward pass with the seed
// indicator(omega)/|omega| on the target logit channel.
template <class T>
Tensor<double> instance_gradients(const Graph<T>& g, const Tensor<T>& input,
                                  const std::vector<Index3>& omega,
                                  const SaliencyOptions& opts = {}) {
  const FlushDenormals ftz;
  const detail::GradientProblem<T> pb(g, input, omega, opts);
  const Tape<T> tape = pb.forward_at(pb.x);
  Tensor<T> seed(tape.output().shape());
  const T w = T(1) / T(omega.size());
  for (const Index3& v : pb.omega_local_voxels) seed.at(pb.channel, v) = w;
  Gradients<T> grads;
  backward(tape, seed, grads);
  return pb.expand(grads.wrt(g.inputs().front()), input.shape());
}

// SmoothGrad, average aggregation: mean over N noisy copies of the instance gradient.
template <class T>
SaliencyMap smoothgrad_instance_avg(const Graph<T>& g, const Tensor<T>& input,
                                    const std::vector<Index3>& omega, const NoiseSpec& noise,
                                    const SaliencyOptions& opts = {}) {
  noise.validate();
  const FlushDenormals ftz;
  const detail::GradientProblem<T> pb(g, input, omega, opts);
  std::mt19937_64 rng(noise.seed);
  Tensor<T> sum(pb.x.shape());
  Gradients<T> grads;
  const T w = T(1) / T(omega.size());
  for (int n = 0; n < noise.n; ++n) {
    const Tensor<T> xn = detail::noisy(pb.x, noise.sigma, rng);
    const Tape<T> tape = pb.forward_at(xn);
    Tensor<T> seed(tape.output().shape());
    for (const Index3& v : pb.omega_local_voxels) seed.at(pb.channel, v) = w;
    backward(tape, seed, grads);
    kernels::accumulate(grads.wrt(g.inputs().front()), grads.support[std::size_t(g.inputs().front())], sum);
  }
  if (noise.n > 1)
    for (T& v : sum.values()) v /= T(noise.n);
  SaliencyMap m;
  m.values = pb.expand(sum, input.shape());
  m.method = noise.n == 1 && noise.sigma == 0 ? "vanilla" : "smoothgrad";
  m.aggregation = "average";
  m.params = {{"N", std::to_string(noise.n)},
              {"sigma", detail::fmt(noise.sigma)},
              {"seed", std::to_string(noise.seed)},
              {"omega_size", std::to_string(omega.size())}};
  return m;
}

// Uniform subsample (without replacement, original order kept) of at most
// cap domain voxels.
inline std::vector<std::size_t> omega_subsample(std::size_t size, int cap, std::uint64_t seed) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cap <= 0 || size <= std::size_t(cap)) return idx;
  std::seed_seq sq{std::uint64_t(seed), std::uint64_t(0x5a11e), std::uint64_t(size)};
  std::mt19937_64 rng(sq);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::size_t(cap));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// SmoothGrad, signed-maximum aggregation: for each noise sample and input voxel keep
// the gradient of largest magnitude over the output voxels of the domain
// (first one wins on ties), then average over samples.
template <class T>
SaliencyMap smoothgrad_instance_max(const Graph<T>& g, const Tensor<T>& input,
                                    const std::vector<Index3>& omega, const NoiseSpec& noise,
                                    const SaliencyOptions& opts = {}) {
  noise.validate();
  const FlushDenormals ftz;
  const detail::GradientProblem<T> pb(g, input, omega, opts);
  const auto picks = omega_subsample(omega.size(), opts.omega_cap, noise.seed);
  std::mt19937_64 rng(noise.seed);
  const int in = g.inputs().front();
  Tensor<T> sum(pb.x.shape());
  Tensor<T> best(pb.x.shape());
  Gradients<T> grads;
  for (int n = 0; n < noise.n; ++n) {
    const Tensor<T> xn = detail::noisy(pb.x, noise.sigma, rng);
    const Tape<T> tape = pb.forward_at(xn);
    Tensor<T> seed(tape.output().shape());
    Box touched;
    for (std::size_t k : picks) {
      const Index3& v = pb.omega_local_voxels[k];
      seed.at(pb.channel, v) = T(1);
      backward(tape, seed, grads);
      seed.at(pb.channel, v) = T(0);
      const Tensor<T>& gin = grads.wrt(in);
      const Box& b = grads.support[std::size_t(in)];
      kernels::for_rows(gin.shape(), b, [&](int, std::size_t off, int len) {
        const T* src = gin.data() + off;
        T* dst = best.data() + off;
        for (int i = 0; i < len; ++i)
          if (std::abs(src[i]) > std::abs(dst[i])) dst[i] = src[i];
      });
      touched = hull(touched, b);
    }
    kernels::accumulate(best, touched, sum);
    best.zero_box(touched);
  }
  if (noise.n > 1)
    for (T& v : sum.values()) v /= T(noise.n);
  SaliencyMap m;
  m.values = pb.expand(sum, input.shape());
  m.method = noise.n == 1 && noise.sigma == 0 ? "vanilla" : "smoothgrad";
  m.aggregation = "signed-max";
  m.params = {{"N", std::to_string(noise.n)},
              {"sigma", detail::fmt(noise.sigma)},
              {"seed", std::to_string(noise.seed)},
              {"omega_size", std::to_string(omega.size())},
              {"cap", std::to_string(opts.omega_cap)},
              {"omega_used", std::to_string(picks.size())}};
  return m;
}

// ------------------------------------------------------------- Grad-CAM++

// Trilinear resampling to `extents`, sampling at voxel centres.
inline Tensor<double> upsample_trilinear(const Tensor<double>& t, const Index3& extents) {
  const Shape& s = t.shape();
  if (s.spatial() == extents) return t;
  Tensor<double> out(Shape{s.c, extents[0], extents[1], extents[2]});
  struct Tap {
    int i0, i1;
    double w1;
  };
  const auto taps = [](int n_in, int n_out) {
    std::vector<Tap> r(static_cast<std::size_t>(n_out));
    const double f = double(n_in) / n_out;
    for (int o = 0; o < n_out; ++o) {
      double p = (o + 0.5) * f - 0.5;
      p = std::clamp(p, 0.0, double(n_in - 1));
      const int i0 = int(std::floor(p));
      const int i1 = std::min(i0 + 1, n_in - 1);
      r[std::size_t(o)] = {i0, i1, p - i0};
    }
    return r;
  };
  const auto tz = taps(s.z, extents[0]), ty = taps(s.y, extents[1]), tx = taps(s.x, extents[2]);
  for (int c = 0; c < s.c; ++c)
    for (int z = 0; z < extents[0]; ++z)
      for (int y = 0; y < extents[1]; ++y)
        for (int x = 0; x < extents[2]; ++x) {
          const Tap& a = tz[std::size_t(z)];
          const Tap& b = ty[std::size_t(y)];
          const Tap& d = tx[std::size_t(x)];
          double v = 0;
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
              for (int k = 0; k < 2; ++k) {
                const double w = (i ? a.w1 : 1 - a.w1) * (j ? b.w1 : 1 - b.w1) *
                                 (k ? d.w1 : 1 - d.w1);
                if (w == 0) continue;
                v += w * t(c, i ? a.i1 : a.i0, j ? b.i1 : b.i0, k ? d.i1 : d.i0);
              }
          out(c, z, y, x) = v;
        }
  return out;
}

struct GradCamOptions {
  std::string layer = "dec0_relu";
  double threshold = 0.3;
  int target_channel = -1;
  // Gate the class score on logits instead of softmax probabilities. Always
  // on for single-channel outputs, where there is no softmax.
  bool gate_on_logits = false;
};

namespace detail {

// Exponential closed form: alpha = g^2 / (2 g^2 + g^3 sum_v A), 0 when the
// denominator vanishes.
inline double gradcampp_alpha(double g, double sum_a) {
  const double g2 = g * g;
  const double den = 2 * g2 + g2 * g * sum_a;
  return den != 0.0 ? g2 / den : 0.0;
}

template <class T>
SaliencyMap gradcampp(const Graph<T>& g, const Tensor<T>& input, const GradCamOptions& opts,
                      const std::vector<Index3>* omega) {
  const FlushDenormals ftz;
  const int layer = g.find(opts.layer);
  if (layer < 0) throw error("Grad-CAM++: no layer named '" + opts.layer + "'");
  const int ch = target_channel(g, opts.target_channel);
  const Tape<T> tape = forward(g, input);
  const Tensor<T>& y = tape.output();
  const Shape& ys = y.shape();
  Tensor<T> seed(ys);
  bool any = false;
  if (omega) {
    detail::omega_box(*omega, input.shape().spatial());
    for (const Index3& v : *omega) seed.at(ch, v) = T(1);
    any = true;
  } else {
    const bool on_logits = opts.gate_on_logits || ys.c == 1;
    const Tensor<T> prob = on_logits ? Tensor<T>() : [&] {
      Tensor<T> p(Shape{1, ys.z, ys.y, ys.x});
      const std::size_t n = ys.spatial_size();
      for (std::size_t i = 0; i < n; ++i) {
        T m = y.data()[i];
        for (int c = 1; c < ys.c; ++c) m = std::max(m, y.data()[c * n + i]);
        T s = 0;
        for (int c = 0; c < ys.c; ++c) s += std::exp(y.data()[c * n + i] - m);
        p.data()[i] = std::exp(y.data()[std::size_t(ch) * n + i] - m) / s;
      }
      return p;
    }();
    const std::size_t n = ys.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
      const double gate = on_logits ? double(y.data()[std::size_t(ch) * n + i]) : double(prob.data()[i]);
      if (gate > opts.threshold) {
        seed.data()[std::size_t(ch) * n + i] = T(1);
        any = true;
      }
    }
  }

  SaliencyMap m;
  m.method = "gradcampp";
  m.aggregation = omega ? "instance" : "class";
  m.target = omega ? "instance" : "class";
  m.params = {{"layer", opts.layer}, {"threshold", fmt(opts.threshold)}};
  const Index3 ext = input.shape().spatial();
  if (!any) {
    m.values = Tensor<double>(Shape{1, ext[0], ext[1], ext[2]});
    m.empty = true;
    return m;
  }
  Gradients<T> grads;
  backward(tape, seed, grads);
  const Tensor<T>& A = tape.value(layer);
  const Tensor<T>& G = grads.wrt(layer);
  const Shape& as = A.shape();
  const std::size_t n = as.spatial_size();
  Tensor<double> heat(Shape{1, as.z, as.y, as.x});
  for (int k = 0; k < as.c; ++k) {
    const T* a = A.channel(k);
    const T* gr = G.channel(k);
    double sum_a = 0;
    for (std::size_t i = 0; i < n; ++i) sum_a += double(a[i]);
    if (omega) {
      for (std::size_t i = 0; i < n; ++i) {
        const double gv = gr[i];
        const double w = gradcampp_alpha(gv, sum_a) * std::max(0.0, gv);
        heat.data()[i] += w * double(a[i]);
      }
    } else {
      double w = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double gv = gr[i];
        w += gradcampp_alpha(gv, sum_a) * std::max(0.0, gv);
      }
      if (w != 0)
        for (std::size_t i = 0; i < n; ++i) heat.data()[i] += w * double(a[i]);
    }
  }
  for (double& v : heat.values()) v = std::max(0.0, v);
  m.values = upsample_trilinear(heat, ext);
  return m;
}

}  // namespace detail

// Class-level map: score = sum of target logits where the gate exceeds t,
// one weight per activation map.
template <class T>
SaliencyMap gradcampp_class(const Graph<T>& g, const Tensor<T>& input,
                            const GradCamOptions& opts = {}) {
  return detail::gradcampp(g, input, opts, nullptr);
}

// Instance-level map: score = sum of target logits over omega, one weight
// per activation element.
template <class T>
SaliencyMap gradcampp_instance(const Graph<T>& g, const Tensor<T>& input,
                               const std::vector<Index3>& omega,
                               const GradCamOptions& opts = {}) {
  if (omega.empty()) throw error("Grad-CAM++: empty lesion domain");
  return detail::gradcampp(g, input, opts, &omega);
}

// ------------------------------------------------------------- extrema

struct Extrema {
  double max = 0.0;
  double min = 0.0;
  double positive_median = 0.0;  // of values above the band
  double negative_median = 0.0;  // of values below the band
  std::size_t positive_count = 0;
  std::size_t negative_count = 0;
  bool empty = true;  // every value inside the band
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(h), v.end());
  const double hi = v[h];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(h));
  return 0.5 * (lo + hi);
}

// Extrema of one channel plus medians of the values outside [lo, hi].
inline Extrema saliency_extrema(const Tensor<double>& map, int channel = 0, double band_lo = -0.1,
                                double band_hi = 0.1) {
  Extrema e;
  const double* p = map.channel(channel);
  const std::size_t n = map.shape().spatial_size();
  if (n == 0) return e;
  std::vector<double> pos, neg;
  e.max = p[0];
  e.min = p[0];
  for (std::size_t i = 0; i < n; ++i) {
    e.max = std::max(e.max, p[i]);
    e.min = std::min(e.min, p[i]);
    if (p[i] > band_hi) pos.push_back(p[i]);
    if (p[i] < band_lo) neg.push_back(p[i]);
  }
  e.positive_count = pos.size();
  e.negative_count = neg.size();
  e.positive_median = median(pos);
  e.negative_median = median(neg);
  e.empty = pos.empty() && neg.empty();
  return e;
}

inline Extrema saliency_extrema(const SaliencyMap& m, int channel = 0, double band_lo = -0.1,
                                double band_hi = 0.1) {
  if (m.method == "gradcampp") throw error("saliency_extrema expects a gradient map");
  return saliency_extrema(m.values, channel, band_lo, band_hi);
}

// Median of one channel over a voxel set.
inline double median_over(const Tensor<double>& map, int channel,
                          const std::vector<Index3>& voxels) {
  std::vector<double> v;
  v.reserve(voxels.size());
  for (const Index3& p : voxels) v.push_back(map.at(channel, p));
  return median(std::move(v));
}

}  // namespace instxai
