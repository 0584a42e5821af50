#pragma once

// Toy 3D U-Net: construction, soft Dice / blob losses, SGD training,
// overlap-averaged sliding-window inference and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "instxai/autodiff.hpp"
#include "instxai/graph.hpp"
#include "instxai/instances.hpp"
#include "instxai/keyvalue.hpp"
#include "instxai/volume.hpp"

namespace instxai {

struct UNetConfig {
  int depth = 2;
  int base_channels = 8;
  int in_modalities = 2;
  int out_classes = 2;
  int patch_extent = 32;

  void validate() const {
    if (depth < 1) throw config_error("unet depth must be >= 1");
    if (base_channels < 1 || in_modalities < 1 || out_classes < 2)
      throw config_error("unet needs positive channels and at least two classes");
    if (patch_extent <= 0 || patch_extent % (1 << depth) != 0)
      throw config_error("patch extent " + std::to_string(patch_extent) +
                  " is not divisible by 2^depth = " + std::to_string(1 << depth));
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("depth", depth);
    kv.set("base_channels", base_channels);
    kv.set("in_modalities", in_modalities);
    kv.set("out_classes", out_classes);
    kv.set("patch_extent", patch_extent);
    return kv;
  }

  static UNetConfig from_kv(const KeyValues& kv) {
    UNetConfig c;
    c.depth = kv.get_int("depth", c.depth);
    c.base_channels = kv.get_int("base_channels", c.base_channels);
    c.in_modalities = kv.get_int("in_modalities", c.in_modalities);
    c.out_classes = kv.get_int("out_classes", c.out_classes);
    c.patch_extent = kv.get_int("patch_extent", c.patch_extent);
    return c;
  }
};

// Name of the last decoder activation, the default Grad-CAM++ layer.
inline constexpr const char* kLastDecoderActivation = "dec0_relu";

// Encoder: conv3-relu then 2x max-pool per level; bottleneck conv3-relu;
// decoder: 2x transposed conv, concat with the skip, conv3-relu; 1x1 head.
template <class T>
Graph<T> build_unet(const UNetConfig& cfg, std::uint64_t seed = 1) {
  cfg.validate();
  Graph<T> g;
  int cur = g.add_input(cfg.in_modalities, "input");
  std::vector<int> skips;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    cur = g.add_conv3d(cur, cfg.base_channels << l, {3, 3, 3}, p + "_conv");
    cur = g.add_relu(cur, p + "_relu");
    skips.push_back(cur);
    cur = g.add_max_pool(cur, {2, 2, 2}, p + "_pool");
  }
  cur = g.add_conv3d(cur, cfg.base_channels << cfg.depth, {3, 3, 3}, "bottleneck_conv");
  cur = g.add_relu(cur, "bottleneck_relu");
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    const int ch = cfg.base_channels << l;
    cur = g.add_conv_transpose3d(cur, ch, {2, 2, 2}, p + "_up");
    cur = g.add_concat({cur, skips[std::size_t(l)]}, p + "_cat");
    cur = g.add_conv3d(cur, ch, {3, 3, 3}, p + "_conv");
    cur = g.add_relu(cur, p + "_relu");
  }
  cur = g.add_conv3d(cur, cfg.out_classes, {1, 1, 1}, "logits");
  g.set_output(cur);
  g.init_parameters(seed);
  g.validate({cfg.patch_extent, cfg.patch_extent, cfg.patch_extent});
  return g;
}

// ------------------------------------------------------------------ losses

struct LossResult {
  double value = 0.0;
  bool empty = false;  // blob loss with no instances
};

inline constexpr double kDiceEps = 1e-5;

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps). Adds dL/dp into *grad.
template <class T>
LossResult dice_loss(const Tensor<T>& prob, const Mask& gt, Tensor<T>* grad = nullptr,
                     double scale = 1.0) {
  if (prob.shape().spatial() != gt.shape().spatial() || prob.shape().c != 1)
    throw shape_error("dice_loss: prob " + prob.shape().str() + " vs gt " + gt.shape().str());
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double p = prob.data()[i];
    const double g = gt.data()[i] ? 1.0 : 0.0;
    inter += p * g;
    ps += p;
    gs += g;
  }
  const double den = ps + gs + kDiceEps;
  const double num = 2 * inter + kDiceEps;
  if (grad) {
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const double g = gt.data()[i] ? 1.0 : 0.0;
      grad->data()[i] += T(scale * -(2 * g * den - num) / (den * den));
    }
  }
  return {1.0 - num / den, false};
}

// Mean over instances of the soft Dice loss restricted to the instance plus
// all voxels not belonging to another instance.
template <class T>
LossResult blob_loss(const Tensor<T>& prob, const std::vector<LesionInstance>& instances,
                     Tensor<T>* grad = nullptr, double scale = 1.0) {
  if (instances.empty()) return {0.0, true};
  const Shape& s = prob.shape();
  // owner[v] = 1 + instance index, 0 for background
  std::vector<std::int32_t> owner(s.spatial_size(), 0);
  const auto idx = [&](const Index3& v) {
    return (std::size_t(v[0]) * s.y + v[1]) * s.x + v[2];
  };
  for (std::size_t k = 0; k < instances.size(); ++k)
    for (const Index3& v : instances[k].voxels) {
      if (owner[idx(v)]) throw error("blob_loss: instances overlap");
      owner[idx(v)] = std::int32_t(k) + 1;
    }
  double total = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) total += prob.data()[i];
  std::vector<double> inst_sum(instances.size(), 0.0);
  for (std::size_t i = 0; i < prob.size(); ++i)
    if (owner[i]) inst_sum[std::size_t(owner[i] - 1)] += prob.data()[i];
  double all_inst = 0;
  for (double v : inst_sum) all_inst += v;

  const double m = double(instances.size());
  double loss = 0;
  std::vector<double> d_in(instances.size()), d_bg(instances.size());
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const double I = inst_sum[k];
    const double P = total - (all_inst - inst_sum[k]);
    const double G = double(instances[k].size());
    const double den = P + G + kDiceEps;
    const double num = 2 * I + kDiceEps;
    loss += 1.0 - num / den;
    d_in[k] = -(2 * den - num) / (den * den) / m;
    d_bg[k] = num / (den * den) / m;
  }
  if (grad) {
    double bg_all = 0;
    for (double v : d_bg) bg_all += v;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const std::int32_t o = owner[i];
      // background voxels are in every instance's region; an instance voxel
      // only belongs to its own region.
      const double d = o ? d_in[std::size_t(o - 1)] : bg_all;
      grad->data()[i] += T(scale * d);
    }
  }
  return {loss / m, false};
}

// Foreground-class softmax probability of a logit map.
template <class T>
Tensor<T> foreground_probability(const Tensor<T>& logits, int channel = 1) {
  const Shape& s = logits.shape();
  Tensor<T> p(Shape{1, s.z, s.y, s.x});
  const std::size_t n = s.spatial_size();
  for (std::size_t i = 0; i < n; ++i) {
    T m = logits.data()[i];
    for (int c = 1; c < s.c; ++c) m = std::max(m, logits.data()[c * n + i]);
    T sum = 0;
    for (int c = 0; c < s.c; ++c) sum += std::exp(logits.data()[c * n + i] - m);
    p.data()[i] = std::exp(logits.data()[std::size_t(channel) * n + i] - m) / sum;
  }
  return p;
}

// ---------------------------------------------------------------- training

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double lambda = 0.5;  // weight of the Dice term; 1 - lambda goes to the blob term
  std::uint64_t seed = 1;
  int patches_per_volume = 2;
  int batch_size = 4;
  double foreground_fraction = 0.5;
  double hard_negative_fraction = 0.25;
  double noise_sigma = 0.0;  // additive Gaussian input noise (augmentation)
  double final_lr_fraction = 0.1;  // learning rate decays linearly to this fraction

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw config_error("lambda must lie in [0, 1]");
    if (epochs < 0 || batch_size < 1 || patches_per_volume < 1)
      throw config_error("invalid training schedule");
    if (!(final_lr_fraction >= 0.0)) throw config_error("final_lr_fraction must be >= 0");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("epochs", epochs);
    kv.set("learning_rate", learning_rate);
    kv.set("momentum", momentum);
    kv.set("lambda", lambda);
    kv.set("seed", double(seed));
    kv.set("patches_per_volume", patches_per_volume);
    kv.set("batch_size", batch_size);
    kv.set("foreground_fraction", foreground_fraction);
    kv.set("hard_negative_fraction", hard_negative_fraction);
    kv.set("noise_sigma", noise_sigma);
    kv.set("final_lr_fraction", final_lr_fraction);
    return kv;
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = kv.get_int("epochs", c.epochs);
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.lambda = kv.get_double("lambda", c.lambda);
    c.seed = std::uint64_t(kv.get_double("seed", double(c.seed)));
    c.patches_per_volume = kv.get_int("patches_per_volume", c.patches_per_volume);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.foreground_fraction = kv.get_double("foreground_fraction", c.foreground_fraction);
    c.hard_negative_fraction =
        kv.get_double("hard_negative_fraction", c.hard_negative_fraction);
    c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
    c.final_lr_fraction = kv.get_double("final_lr_fraction", c.final_lr_fraction);
    return c;
  }
};

template <class T>
struct TrainSample {
  Tensor<T> image;  // [modalities, Z, Y, X], normalized
  Mask gt;
  std::vector<Index3> hard_negatives;  // centres of lesion-like non-lesions
};

struct TrainResult {
  std::vector<double> loss_history;  // mean patch loss per epoch
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
};

namespace detail {

inline Index3 patch_origin(const Index3& centre, const Index3& extents, int patch) {
  Index3 o;
  for (int a = 0; a < 3; ++a)
    o[a] = std::clamp(centre[a] - patch / 2, 0, extents[a] - patch);
  return o;
}

}  // namespace detail

// Loss and seed (dL/dlogits) for one patch.
template <class T>
double patch_loss(const Tensor<T>& logits, const Mask& gt, double lambda, Tensor<T>* seed) {
  const Tensor<T> prob = foreground_probability(logits);
  Tensor<T> dprob(prob.shape());
  double loss = 0;
  if (lambda > 0) loss += lambda * dice_loss(prob, gt, seed ? &dprob : nullptr, lambda).value;
  if (lambda < 1) {
    const auto inst = connected_components(gt, 18);
    loss += (1 - lambda) *
            blob_loss(prob, inst, seed ? &dprob : nullptr, 1 - lambda).value;
  }
  if (seed) {
    *seed = Tensor<T>(logits.shape());
    const Shape& s = logits.shape();
    const std::size_t n = s.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
      const T p1 = prob.data()[i];
      const T d = dprob.data()[i];
      // dp1/dy_c = p1 (delta_c1 - p_c), with p_c from the softmax.
      T m = logits.data()[i];
      for (int c = 1; c < s.c; ++c) m = std::max(m, logits.data()[c * n + i]);
      T sum = 0;
      for (int c = 0; c < s.c; ++c) sum += std::exp(logits.data()[c * n + i] - m);
      for (int c = 0; c < s.c; ++c) {
        const T pc = std::exp(logits.data()[c * n + i] - m) / sum;
        seed->data()[c * n + i] = d * p1 * ((c == 1 ? T(1) : T(0)) - pc);
      }
    }
  }
  return loss;
}

template <class T>
TrainResult train(Graph<T>& g, const std::vector<TrainSample<T>>& data,
                  const UNetConfig& ucfg, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw error("train: empty dataset");
  const FlushDenormals ftz;
  const int P = ucfg.patch_extent;
  for (const auto& s : data) {
    const Index3 e = s.image.shape().spatial();
    if (e[0] < P || e[1] < P || e[2] < P) throw error("train: volume smaller than patch");
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<std::vector<Index3>> fg(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Mask& m = data[i].gt;
    const Shape& s = m.shape();
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x)
          if (m(0, z, y, x)) fg[i].push_back({z, y, x});
  }

  std::vector<std::vector<T>> velocity;
  for (const auto& p : g.parameters()) velocity.emplace_back(p.size(), T(0));
  Gradients<T> grads;
  TrainResult res;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (int k = 0; k < cfg.patches_per_volume; ++k) order.push_back(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int in_batch = 0;
    grads.zero_parameters();
    const double frac = cfg.epochs > 1 ? double(epoch) / (cfg.epochs - 1) : 0.0;
    const double epoch_lr = cfg.learning_rate * (1.0 - frac * (1.0 - cfg.final_lr_fraction));
    const auto step = [&] {
      if (in_batch == 0) return;
      const T lr = T(epoch_lr / in_batch);
      auto& params = g.parameters();
      for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t j = 0; j < params[p].size(); ++j) {
          velocity[p][j] = T(cfg.momentum) * velocity[p][j] - lr * grads.param[p][j];
          params[p].values[j] += velocity[p][j];
        }
      grads.zero_parameters();
      in_batch = 0;
    };
    for (std::size_t n = 0; n < order.size(); ++n) {
      const auto& sample = data[order[n]];
      const Index3 ext = sample.image.shape().spatial();
      Index3 centre;
      const double u = unit(rng);
      if (u < cfg.foreground_fraction && !fg[order[n]].empty()) {
        const auto& f = fg[order[n]];
        centre = f[std::uniform_int_distribution<std::size_t>(0, f.size() - 1)(rng)];
      } else if (u < cfg.foreground_fraction + cfg.hard_negative_fraction &&
                 !sample.hard_negatives.empty()) {
        const auto& h = sample.hard_negatives;
        centre = h[std::uniform_int_distribution<std::size_t>(0, h.size() - 1)(rng)];
      } else {
        for (int a = 0; a < 3; ++a)
          centre[a] = std::uniform_int_distribution<int>(0, ext[a] - 1)(rng);
      }
      // jitter so lesions do not always sit at the patch centre
      for (int a = 0; a < 3; ++a)
        centre[a] += std::uniform_int_distribution<int>(-P / 4, P / 4)(rng);
      const Index3 o = detail::patch_origin(centre, ext, P);
      const Box box{o, {o[0] + P, o[1] + P, o[2] + P}};
      Tensor<T> x = crop(sample.image, box);
      if (cfg.noise_sigma > 0)
        for (T& v : x.values()) v += T(cfg.noise_sigma * noise(rng));
      const Mask gt = crop(sample.gt, box);

      const Tape<T> tape = forward(g, x);
      Tensor<T> seed;
      const double loss = patch_loss(tape.output(), gt, cfg.lambda, &seed);
      if (!std::isfinite(loss))
        throw numeric_error("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch + 1) + ", patch " + std::to_string(n));
      epoch_loss += loss;
      backward(tape, seed, grads, BackwardOptions{true});
      if (++in_batch == cfg.batch_size) step();
    }
    step();
    const double mean = epoch_loss / double(order.size());
    res.loss_history.push_back(mean);
    if (on_epoch) on_epoch({epoch + 1, mean});
  }
  for (const auto& p : g.parameters())
    for (T v : p.values)
      if (!std::isfinite(v)) throw numeric_error("training produced non-finite parameters");
  return res;
}

// --------------------------------------------------------------- inference

// Patch origins along one axis: multiples of the stride plus a final flush
// origin so the last patch ends at the border.
inline std::vector<int> patch_starts(int extent, int patch, int stride) {
  if (extent < patch)
    throw error("volume extent " + std::to_string(extent) + " smaller than patch " +
                std::to_string(patch));
  std::vector<int> s;
  for (int o = 0; o + patch <= extent; o += stride) s.push_back(o);
  if (s.back() + patch < extent) s.push_back(extent - patch);
  return s;
}

// Overlap-averaged sliding-window foreground probability. Only patches
// meeting `roi` are evaluated; the result is exact inside `roi` and zero
// elsewhere. An empty roi means the whole volume.
template <class T>
Tensor<T> infer_volume(const Graph<T>& g, const Tensor<T>& volume, int patch,
                       Box roi = {}) {
  const FlushDenormals ftz;
  const Shape& s = volume.shape();
  if (s.c != g.channels_of(g.inputs().front()))
    throw shape_error("infer_volume: expected " +
                      std::to_string(g.channels_of(g.inputs().front())) + " modalities");
  const Box full = Box::of(s);
  roi = roi.empty() ? full : intersect(roi, full);
  const int stride = std::max(1, patch / 2);
  const auto zs = patch_starts(s.z, patch, stride);
  const auto ys = patch_starts(s.y, patch, stride);
  const auto xs = patch_starts(s.x, patch, stride);
  Tensor<T> sum(Shape{1, s.z, s.y, s.x});
  Tensor<T> hits(Shape{1, s.z, s.y, s.x});
  for (int z0 : zs)
    for (int y0 : ys)
      for (int x0 : xs) {
        const Box pb{{z0, y0, x0}, {z0 + patch, y0 + patch, x0 + patch}};
        const Box want = intersect(pb, roi);
        if (want.empty()) continue;
        const Tensor<T> x = crop(volume, pb);
        Box local = want;
        for (int a = 0; a < 3; ++a) {
          local.lo[a] -= pb.lo[a];
          local.hi[a] -= pb.lo[a];
        }
        const Tape<T> tape = forward(g, x, ForwardOptions{local});
        const Tensor<T> prob = foreground_probability(crop(tape.output(), local));
        for (int z = 0; z < local.extent(0); ++z)
          for (int y = 0; y < local.extent(1); ++y)
            for (int xx = 0; xx < local.extent(2); ++xx) {
              const int gz = want.lo[0] + z, gy = want.lo[1] + y, gx = want.lo[2] + xx;
              sum(0, gz, gy, gx) += prob(0, z, y, xx);
              hits(0, gz, gy, gx) += T(1);
            }
      }
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (hits.data()[i] > 0) sum.data()[i] /= hits.data()[i];
  return sum;
}

// ------------------------------------------------------------- checkpoints

template <class T>
void save_checkpoint(const Graph<T>& g, const UNetConfig& cfg,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw io_error("cannot write checkpoint manifest in " + dir.string());
  m << "# instxai checkpoint v1\n";
  m << cfg.to_kv().str();
  const DType dt = sizeof(T) == 4 ? DType::f32 : DType::f64;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& n = g.node(int(i));
    for (int which : {n.weight, n.bias}) {
      if (which < 0) continue;
      const auto& p = g.parameters()[std::size_t(which)];
      std::ostringstream name;
      name << "param_" << std::setw(3) << std::setfill('0') << which << ".mvh";
      Tensor<T> t(Shape{1, 1, 1, int(p.size())});
      std::copy(p.values.begin(), p.values.end(), t.data());
      MetaVolume mv = MetaVolume::from(t, {1.0, 1.0, 1.0}, dt);
      mv.meta["node"] = std::to_string(i);
      mv.meta["node_name"] = n.name;
      write_metavolume(mv, dir / name.str());
      m << "param." << which << " = node " << i << ' ' << n.name << ' '
        << (which == n.weight ? "weight" : "bias") << " dims";
      for (int d : p.dims) m << ' ' << d;
      m << " file " << name.str() << '\n';
    }
  }
}

template <class T>
Graph<T> load_checkpoint(const std::filesystem::path& dir, UNetConfig* cfg_out = nullptr) {
  const KeyValues kv = KeyValues::load(dir / "manifest.txt");
  const UNetConfig cfg = UNetConfig::from_kv(kv);
  Graph<T> g = build_unet<T>(cfg);
  for (std::size_t k = 0; k < g.parameters().size(); ++k) {
    const std::string key = "param." + std::to_string(k);
    if (!kv.has(key)) throw io_error("checkpoint manifest lacks " + key);
    std::istringstream is(kv.get(key));
    std::string tok, file;
    std::vector<int> dims;
    while (is >> tok) {
      if (tok == "dims") {
        int d;
        while (is >> d) dims.push_back(d);
        is.clear();
      } else if (tok == "file") {
        is >> file;
      }
    }
    auto& p = g.parameters()[k];
    if (dims != p.dims) throw io_error("checkpoint " + key + " has mismatched dims");
    const MetaVolume mv = read_metavolume(dir / file);
    if (mv.data.size() != p.size()) throw io_error("checkpoint " + key + " has wrong size");
    for (std::size_t j = 0; j < p.size(); ++j) p.values[j] = T(mv.data.data()[j]);
  }
  if (cfg_out) *cfg_out = cfg;
  return g;
}

}  // namespace instxai
