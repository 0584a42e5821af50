#pragma once

// Synthetic two-modality head phantoms with known lesion ground truth.
//
// Channel 0 is FLAIR-like (lesions brighter than tissue), channel 1 is
// MPRAGE-like (lesions darker than tissue). The head is an ellipsoidal brain
// surrounded by a CSF gap and a scalp shell. Lesion-like blobs are also
// scattered in the air around the head; they are not lesions and appear in
// no ground truth, so a model has to look at the surrounding context to tell
// them apart.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "instxai/instances.hpp"
#include "instxai/keyvalue.hpp"
#include "instxai/tensor.hpp"
#include "instxai/volume.hpp"

namespace instxai {

struct PhantomConfig {
  Index3 extents{64, 64, 64};
  double spacing_mm = 1.0;
  std::array<double, 3> brain_semi_axes{20.0, 24.0, 22.0};
  double csf_gap = 2.0;
  double scalp_thickness = 3.0;

  // Mean intensities as {FLAIR-like, MPRAGE-like}.
  std::array<double, 2> background{0.0, 0.0};
  std::array<double, 2> csf{0.15, 0.2};
  std::array<double, 2> scalp{0.6, 0.9};
  std::array<double, 2> tissue{0.45, 0.7};
  std::array<double, 2> lesion{0.95, 0.3};
  std::array<double, 2> noise_sigma{0.04, 0.04};
  double tissue_variation = 0.05;  // amplitude of smooth intensity drift

  int lesion_count_min = 3;
  int lesion_count_max = 7;
  double lesion_radius_min = 1.5;  // mm
  double lesion_radius_max = 3.5;
  double lesion_contrast_min = 0.25;  // fraction of the full lesion contrast
  double lesion_contrast_max = 1.0;
  double lesion_volume_max = 200.0;  // mm^3

  int distractor_count_min = 2;
  int distractor_count_max = 4;

  std::uint64_t seed = 1;
  int max_retries = 2000;

  void validate() const {
    for (int e : extents)
      if (e <= 0) throw config_error("phantom extents must be positive");
    if (!(spacing_mm > 0)) throw config_error("phantom spacing must be positive");
    if (!(lesion[0] > tissue[0]) || !(lesion[1] < tissue[1]))
      throw config_error("lesions must be hyperintense in modality 0 and hypointense in modality 1");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
      throw config_error("invalid lesion count range");
    if (!(lesion_radius_min > 0) || lesion_radius_max < lesion_radius_min)
      throw config_error("invalid lesion radius range");
    if (distractor_count_min < 0 || distractor_count_max < distractor_count_min)
      throw config_error("invalid distractor count range");
  }

  KeyValues to_kv() const;
  static PhantomConfig from_kv(const KeyValues& kv);
};

namespace detail {

inline std::string join3(const std::array<double, 3>& a) {
  std::ostringstream os;
  os << std::setprecision(17) << a[0] << ' ' << a[1] << ' ' << a[2];
  return os.str();
}
inline std::string join2(const std::array<double, 2>& a) {
  std::ostringstream os;
  os << std::setprecision(17) << a[0] << ' ' << a[1];
  return os.str();
}
template <std::size_t N>
std::array<double, N> parse_n(const KeyValues& kv, const std::string& k,
                              std::array<double, N> def) {
  if (!kv.has(k)) return def;
  std::istringstream is(kv.get(k));
  std::array<double, N> out{};
  for (auto& v : out)
    if (!(is >> v)) throw config_error("config key '" + k + "' expects " + std::to_string(N) + " numbers");
  return out;
}

}  // namespace detail

inline KeyValues PhantomConfig::to_kv() const {
  KeyValues kv;
  kv.set("extents", detail::join3({double(extents[0]), double(extents[1]), double(extents[2])}));
  kv.set("spacing_mm", spacing_mm);
  kv.set("brain_semi_axes", detail::join3(brain_semi_axes));
  kv.set("csf_gap", csf_gap);
  kv.set("scalp_thickness", scalp_thickness);
  kv.set("background", detail::join2(background));
  kv.set("csf", detail::join2(csf));
  kv.set("scalp", detail::join2(scalp));
  kv.set("tissue", detail::join2(tissue));
  kv.set("lesion", detail::join2(lesion));
  kv.set("noise_sigma", detail::join2(noise_sigma));
  kv.set("tissue_variation", tissue_variation);
  kv.set("lesion_count_min", lesion_count_min);
  kv.set("lesion_count_max", lesion_count_max);
  kv.set("lesion_radius_min", lesion_radius_min);
  kv.set("lesion_radius_max", lesion_radius_max);
  kv.set("lesion_contrast_min", lesion_contrast_min);
  kv.set("lesion_contrast_max", lesion_contrast_max);
  kv.set("lesion_volume_max", lesion_volume_max);
  kv.set("distractor_count_min", distractor_count_min);
  kv.set("distractor_count_max", distractor_count_max);
  kv.set("seed", double(seed));
  return kv;
}

inline PhantomConfig PhantomConfig::from_kv(const KeyValues& kv) {
  PhantomConfig c;
  const auto e = detail::parse_n<3>(kv, "extents",
                                    {double(c.extents[0]), double(c.extents[1]),
                                     double(c.extents[2])});
  c.extents = {int(e[0]), int(e[1]), int(e[2])};
  c.spacing_mm = kv.get_double("spacing_mm", c.spacing_mm);
  c.brain_semi_axes = detail::parse_n<3>(kv, "brain_semi_axes", c.brain_semi_axes);
  c.csf_gap = kv.get_double("csf_gap", c.csf_gap);
  c.scalp_thickness = kv.get_double("scalp_thickness", c.scalp_thickness);
  c.background = detail::parse_n<2>(kv, "background", c.background);
  c.csf = detail::parse_n<2>(kv, "csf", c.csf);
  c.scalp = detail::parse_n<2>(kv, "scalp", c.scalp);
  c.tissue = detail::parse_n<2>(kv, "tissue", c.tissue);
  c.lesion = detail::parse_n<2>(kv, "lesion", c.lesion);
  c.noise_sigma = detail::parse_n<2>(kv, "noise_sigma", c.noise_sigma);
  c.tissue_variation = kv.get_double("tissue_variation", c.tissue_variation);
  c.lesion_count_min = kv.get_int("lesion_count_min", c.lesion_count_min);
  c.lesion_count_max = kv.get_int("lesion_count_max", c.lesion_count_max);
  c.lesion_radius_min = kv.get_double("lesion_radius_min", c.lesion_radius_min);
  c.lesion_radius_max = kv.get_double("lesion_radius_max", c.lesion_radius_max);
  c.lesion_contrast_min = kv.get_double("lesion_contrast_min", c.lesion_contrast_min);
  c.lesion_contrast_max = kv.get_double("lesion_contrast_max", c.lesion_contrast_max);
  c.lesion_volume_max = kv.get_double("lesion_volume_max", c.lesion_volume_max);
  c.distractor_count_min = kv.get_int("distractor_count_min", c.distractor_count_min);
  c.distractor_count_max = kv.get_int("distractor_count_max", c.distractor_count_max);
  c.seed = std::uint64_t(kv.get_double("seed", double(c.seed)));
  return c;
}

struct Phantom {
  MetaVolume image;  // 2 channels, raw intensities
  Mask brain;
  Mask head;  // brain, CSF gap and scalp
  Mask gt;
  std::vector<LesionInstance> instances;
  std::vector<LesionInstance> distractors;
  std::vector<double> contrast;  // per-instance contrast scale

  Index3 extents() const { return image.shape().spatial(); }
};

class placement_error : public error {
 public:
  using error::error;
};

namespace detail {

inline double ellipsoid_radius(const Index3& v, const std::array<double, 3>& centre,
                               const std::array<double, 3>& semi) {
  double s = 0;
  for (int a = 0; a < 3; ++a) {
    const double d = (v[a] - centre[a]) / semi[a];
    s += d * d;
  }
  return std::sqrt(s);
}

// Union of a jittered main ball and up to two satellite balls, reduced to its
// largest 18-connected component.
template <class Rng>
std::vector<Index3> random_blob(const std::array<double, 3>& centre, double radius,
                                Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  struct Ball {
    std::array<double, 3> c;
    double r;
  };
  std::vector<Ball> balls{{centre, radius}};
  const int sats = std::uniform_int_distribution<int>(0, 2)(rng);
  for (int s = 0; s < sats; ++s) {
    std::array<double, 3> dir{nrm(rng), nrm(rng), nrm(rng)};
    const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    const double off = radius * (0.3 + 0.4 * u(rng));
    const double r = radius * (0.5 + 0.3 * u(rng));
    balls.push_back({{centre[0] + dir[0] / len * off, centre[1] + dir[1] / len * off,
                      centre[2] + dir[2] / len * off},
                     r});
  }
  const int R = int(std::ceil(radius * 1.2)) + 1;
  const Index3 c0{int(std::lround(centre[0])), int(std::lround(centre[1])),
                  int(std::lround(centre[2]))};
  std::vector<Index3> vox;
  for (int dz = -R; dz <= R; ++dz)
    for (int dy = -R; dy <= R; ++dy)
      for (int dx = -R; dx <= R; ++dx) {
        const Index3 v{c0[0] + dz, c0[1] + dy, c0[2] + dx};
        for (const Ball& b : balls) {
          double d = 0;
          for (int a = 0; a < 3; ++a) d += (v[a] - b.c[a]) * (v[a] - b.c[a]);
          if (d <= b.r * b.r) {
            vox.push_back(v);
            break;
          }
        }
      }
  if (vox.empty()) return vox;
  // keep the largest 18-connected piece
  Box bb;
  for (const Index3& v : vox) bb = hull(bb, box_around(v));
  const auto e = bb.extents();
  Mask m(Shape{1, e[0], e[1], e[2]});
  for (const Index3& v : vox) m(0, v[0] - bb.lo[0], v[1] - bb.lo[1], v[2] - bb.lo[2]) = 1;
  auto comps = connected_components(m, 18);
  const auto best = std::max_element(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
    return a.size() < b.size();
  });
  std::vector<Index3> out;
  for (const Index3& v : best->voxels)
    out.push_back({v[0] + bb.lo[0], v[1] + bb.lo[1], v[2] + bb.lo[2]});
  return out;
}

}  // namespace detail

inline Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  const Index3 E = cfg.extents;
  const Shape s1{1, E[0], E[1], E[2]};
  const double vox_mm = cfg.spacing_mm;
  const double vox_vol = vox_mm * vox_mm * vox_mm;
  const std::array<double, 3> centre{(E[0] - 1) / 2.0, (E[1] - 1) / 2.0, (E[2] - 1) / 2.0};
  std::array<double, 3> semi = cfg.brain_semi_axes;
  for (double& a : semi) a /= vox_mm;
  const double gap = cfg.csf_gap / vox_mm;
  const double scalp = cfg.scalp_thickness / vox_mm;
  const double min_semi = std::min({semi[0], semi[1], semi[2]});

  Phantom ph;
  ph.brain = Mask(s1);
  ph.head = Mask(s1);
  ph.gt = Mask(s1);
  Tensor<double> img(Shape{2, E[0], E[1], E[2]});

  // Smooth multiplicative drift inside the brain.
  struct Wave {
    std::array<double, 3> k;
    double phase;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    for (double& k : w.k) k = (u(rng) - 0.5) * 0.3;
    w.phase = u(rng) * 2 * std::numbers::pi;
  }

  for (int z = 0; z < E[0]; ++z)
    for (int y = 0; y < E[1]; ++y)
      for (int x = 0; x < E[2]; ++x) {
        const Index3 v{z, y, x};
        const double r = detail::ellipsoid_radius(v, centre, semi);
        // radial distance in voxels beyond the brain surface (approximate)
        const double beyond = (r - 1.0) * min_semi;
        std::array<double, 2> val = cfg.background;
        if (r <= 1.0) {
          ph.brain.at(0, v) = 1;
          ph.head.at(0, v) = 1;
          double drift = 0;
          for (const auto& w : waves)
            drift += std::sin(w.k[0] * z + w.k[1] * y + w.k[2] * x + w.phase);
          drift *= cfg.tissue_variation / 3.0;
          val = {cfg.tissue[0] * (1 + drift), cfg.tissue[1] * (1 + drift)};
        } else if (beyond <= gap) {
          ph.head.at(0, v) = 1;
          val = cfg.csf;
        } else if (beyond <= gap + scalp) {
          ph.head.at(0, v) = 1;
          val = cfg.scalp;
        }
        img(0, z, y, x) = val[0];
        img(1, z, y, x) = val[1];
      }

  // Lesions inside the brain, kept two voxels apart from each other and from
  // the brain border.
  Mask forbidden(s1);  // voxels a new lesion may not touch
  for (std::size_t i = 0; i < ph.brain.size(); ++i) {
    // brain border band: any voxel within 2 of a non-brain voxel
    forbidden.data()[i] = ph.brain.data()[i] ? 0 : 1;
  }
  {
    Mask grown = forbidden;
    for (int it = 0; it < 2; ++it) {
      Mask next = grown;
      for (int z = 0; z < E[0]; ++z)
        for (int y = 0; y < E[1]; ++y)
          for (int x = 0; x < E[2]; ++x) {
            if (grown(0, z, y, x)) continue;
            for (const Index3& o : neighbourhood(26)) {
              const int a = z + o[0], b = y + o[1], c = x + o[2];
              if (a < 0 || b < 0 || c < 0 || a >= E[0] || b >= E[1] || c >= E[2] ||
                  grown(0, a, b, c)) {
                next(0, z, y, x) = 1;
                break;
              }
            }
          }
      grown = std::move(next);
    }
    forbidden = std::move(grown);
  }
  const auto mark_exclusion = [&](const std::vector<Index3>& vox) {
    for (const Index3& v : vox)
      for (int dz = -2; dz <= 2; ++dz)
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const Index3 w{v[0] + dz, v[1] + dy, v[2] + dx};
            if (Box::of(E).contains(w)) forbidden.at(0, w) = 1;
          }
  };

  const int n_les = std::uniform_int_distribution<int>(cfg.lesion_count_min,
                                                       cfg.lesion_count_max)(rng);
  const Box bounds = Box::of(E);
  for (int k = 0; k < n_les; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const double radius =
          (cfg.lesion_radius_min + u(rng) * (cfg.lesion_radius_max - cfg.lesion_radius_min)) /
          vox_mm;
      std::array<double, 3> c;
      for (int a = 0; a < 3; ++a) c[a] = centre[a] + (u(rng) * 2 - 1) * semi[a];
      const Index3 ci{int(std::lround(c[0])), int(std::lround(c[1])), int(std::lround(c[2]))};
      if (!bounds.contains(ci) || !ph.brain.at(0, ci)) continue;
      auto vox = detail::random_blob(c, radius, rng);
      const double vol = double(vox.size()) * vox_vol;
      if (vol < 5.0 || vol > cfg.lesion_volume_max) continue;
      bool ok = true;
      for (const Index3& v : vox)
        if (!bounds.contains(v) || forbidden.at(0, v)) {
          ok = false;
          break;
        }
      if (!ok) continue;
      mark_exclusion(vox);
      ph.instances.push_back(make_instance(int(ph.instances.size()) + 1, std::move(vox), vox_vol));
      placed = true;
    }
    if (!placed)
      throw placement_error("could not place lesion " + std::to_string(k + 1) + " after " +
                            std::to_string(cfg.max_retries) + " attempts");
  }
  for (const auto& inst : ph.instances) {
    const double contrast =
        cfg.lesion_contrast_min + u(rng) * (cfg.lesion_contrast_max - cfg.lesion_contrast_min);
    ph.contrast.push_back(contrast);
    for (const Index3& v : inst.voxels) {
      ph.gt.at(0, v) = 1;
      for (int c = 0; c < 2; ++c) img.at(c, v) += contrast * (cfg.lesion[c] - cfg.tissue[c]);
    }
  }

  // Number lesions in scan order so ids agree with connected_components(gt).
  {
    auto cc = connected_components(ph.gt, 18, vox_vol);
    std::vector<double> contrast(cc.size(), 0.0);
    for (std::size_t i = 0; i < cc.size(); ++i)
      for (std::size_t j = 0; j < ph.instances.size(); ++j) {
        const auto& v = ph.instances[j].voxels;
        if (std::binary_search(v.begin(), v.end(), cc[i].voxels.front())) contrast[i] = ph.contrast[j];
      }
    ph.instances = std::move(cc);
    ph.contrast = std::move(contrast);
  }

  // Lesion-like blobs in the air just outside the scalp.
  const int n_dis = std::uniform_int_distribution<int>(cfg.distractor_count_min,
                                                       cfg.distractor_count_max)(rng);
  for (int k = 0; k < n_dis; ++k) {
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
      const double radius =
          (cfg.lesion_radius_min + u(rng) * (cfg.lesion_radius_max - cfg.lesion_radius_min)) /
          vox_mm;
      std::array<double, 3> dir{nrm(rng), nrm(rng), nrm(rng)};
      const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      // scale to the outer head surface plus a little air
      double q = 0;
      for (int a = 0; a < 3; ++a) q += (dir[a] / len / semi[a]) * (dir[a] / len / semi[a]);
      const double surf = 1.0 / std::sqrt(q) + gap + scalp;
      const double dist = surf + radius + 1.5 + u(rng) * 4.0;
      std::array<double, 3> c;
      for (int a = 0; a < 3; ++a) c[a] = centre[a] + dir[a] / len * dist;
      auto vox = detail::random_blob(c, radius, rng);
      if (vox.size() < 5) continue;
      bool ok = true;
      for (const Index3& v : vox)
        if (!bounds.contains(v) || ph.head.at(0, v)) {
          ok = false;
          break;
        }
      if (!ok) continue;
      for (const Index3& v : vox)
        for (int c2 = 0; c2 < 2; ++c2) img.at(c2, v) = cfg.lesion[c2];
      ph.distractors.push_back(make_instance(int(ph.distractors.size()) + 1, std::move(vox), vox_vol));
      break;
    }
  }

  ph.distractors = connected_components(mask_of(ph.distractors, E), 18, vox_vol);

  for (int c = 0; c < 2; ++c) {
    double* p = img.channel(c);
    for (std::size_t i = 0; i < s1.size(); ++i) p[i] += cfg.noise_sigma[std::size_t(c)] * nrm(rng);
  }

  ph.image = MetaVolume::from(img, {vox_mm, vox_mm, vox_mm}, DType::f32);
  ph.image.meta["kind"] = "phantom";
  ph.image.meta["seed"] = std::to_string(cfg.seed);
  return ph;
}

// Directory layout: image.mvh (raw intensities), gt.mvh, brain.mvh, head.mvh,
// distractors.mvh and phantom.cfg. Instances are recovered from the masks.
inline void save_phantom(const Phantom& ph, const std::filesystem::path& dir,
                         const PhantomConfig* cfg = nullptr) {
  std::filesystem::create_directories(dir);
  const Spacing sp = ph.image.spacing;
  write_metavolume(ph.image, dir / "image.mvh");
  write_metavolume(from_mask(ph.gt, sp), dir / "gt.mvh");
  write_metavolume(from_mask(ph.brain, sp), dir / "brain.mvh");
  write_metavolume(from_mask(ph.head, sp), dir / "head.mvh");
  write_metavolume(from_mask(mask_of(ph.distractors, ph.extents()), sp), dir / "distractors.mvh");
  if (cfg) {
    std::ofstream os(dir / "phantom.cfg");
    os << "# instxai phantom config\n" << cfg->to_kv().str();
    if (!os) throw io_error("cannot write " + (dir / "phantom.cfg").string());
  }
}

inline Phantom load_phantom(const std::filesystem::path& dir) {
  Phantom ph;
  ph.image = read_metavolume(dir / "image.mvh");
  if (ph.image.shape().c != 2) throw io_error("phantom image must have 2 channels");
  ph.gt = to_mask(read_metavolume(dir / "gt.mvh"));
  ph.brain = to_mask(read_metavolume(dir / "brain.mvh"));
  ph.head = to_mask(read_metavolume(dir / "head.mvh"));
  const double vv = ph.image.voxel_volume();
  ph.instances = connected_components(ph.gt, 18, vv);
  if (std::filesystem::exists(dir / "distractors.mvh"))
    ph.distractors = connected_components(to_mask(read_metavolume(dir / "distractors.mvh")), 18, vv);
  for (const Mask* m : {&ph.gt, &ph.brain, &ph.head})
    if (m->shape().spatial() != ph.extents()) throw io_error("phantom masks do not match the image");
  return ph;
}

// Per-channel z-score over the mask; voxels outside the mask become 0.
template <class T>
Tensor<T> zscore_normalize(const Tensor<T>& vol, const Mask& mask) {
  const Shape& s = vol.shape();
  if (mask.shape().spatial() != s.spatial()) throw shape_error("zscore: mask shape mismatch");
  const std::size_t n = s.spatial_size();
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += mask.data()[i] != 0;
  if (count == 0) throw error("zscore_normalize: empty mask");
  Tensor<T> out(s);
  for (int c = 0; c < s.c; ++c) {
    const T* p = vol.channel(c);
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask.data()[i]) mean += double(p[i]);
    mean /= double(count);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask.data()[i]) var += (double(p[i]) - mean) * (double(p[i]) - mean);
    var /= double(count);
    if (!(var > 0.0)) throw error("zscore_normalize: zero variance in channel " + std::to_string(c));
    const double sd = std::sqrt(var);
    T* o = out.channel(c);
    for (std::size_t i = 0; i < n; ++i)
      o[i] = mask.data()[i] ? T((double(p[i]) - mean) / sd) : T(0);
  }
  return out;
}

// Whole-volume z-score, the preprocessing used throughout the pipeline.
inline Tensor<double> preprocess(const MetaVolume& image) {
  const Shape& s = image.shape();
  return zscore_normalize(image.data, Mask(Shape{1, s.z, s.y, s.x}, 1));
}

// ------------------------------------------------------------- relocation

enum class Destination { white_matter, background };

inline const char* to_string(Destination d) {
  return d == Destination::white_matter ? "white-matter" : "background";
}

struct Relocation {
  Tensor<double> image;              // edited copy of the input image
  std::vector<Index3> source_support;  // voxels refilled at the source
  std::vector<Index3> target_support;  // voxels overwritten at the target
  LesionInstance target;             // lesion voxels at the new location
};

// Lesion voxels plus every voxel within margin_mm of them.
inline std::vector<Index3> lesion_support(const LesionInstance& inst, double margin_mm,
                                          const Index3& extents, double vox_mm = 1.0) {
  if (margin_mm <= 0) return inst.voxels;
  Mask m(Shape{1, extents[0], extents[1], extents[2]});
  const auto offs = ball_offsets(margin_mm / vox_mm);
  const Box bounds = Box::of(extents);
  for (const Index3& v : inst.voxels)
    for (const Index3& o : offs) {
      const Index3 w{v[0] + o[0], v[1] + o[1], v[2] + o[2]};
      if (bounds.contains(w)) m.at(0, w) = 1;
    }
  std::vector<Index3> out;
  for (int z = 0; z < extents[0]; ++z)
    for (int y = 0; y < extents[1]; ++y)
      for (int x = 0; x < extents[2]; ++x)
        if (m(0, z, y, x)) out.push_back({z, y, x});
  return out;
}

// Copies a lesion (and optionally a margin of surrounding tissue) so that its
// centre of mass lands on target_centre, in both modalities. The source is
// refilled with the mean and spread of a 2-voxel shell around it.
inline Relocation relocate_lesion(const Phantom& ph, const Tensor<double>& image,
                                  const LesionInstance& inst, const Index3& target_centre,
                                  double margin_mm, Destination dest, std::uint64_t seed) {
  if (margin_mm != 0.0 && margin_mm != 3.0)
    throw error("relocate_lesion: margin must be 0 or 3 mm");
  const Index3 E = image.shape().spatial();
  const Box bounds = Box::of(E);
  const double vox_mm = ph.image.spacing[0];
  const auto support = lesion_support(inst, margin_mm, E, vox_mm);
  const Index3 com = center_of_mass(inst);
  const Index3 shift{target_centre[0] - com[0], target_centre[1] - com[1],
                     target_centre[2] - com[2]};

  Mask src(Shape{1, E[0], E[1], E[2]});
  for (const Index3& v : support) src.at(0, v) = 1;
  Relocation r;
  r.source_support = support;
  for (const Index3& v : support) {
    const Index3 w{v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]};
    if (!bounds.contains(w)) throw placement_error("relocate_lesion: target leaves the volume");
    if (ph.gt.at(0, w)) throw placement_error("relocate_lesion: target overlaps a GT lesion");
    if (src.at(0, w)) throw placement_error("relocate_lesion: target overlaps the source");
    if (dest == Destination::white_matter && !ph.brain.at(0, w))
      throw placement_error("relocate_lesion: white-matter target leaves the brain");
    if (dest == Destination::background && ph.head.at(0, w))
      throw placement_error("relocate_lesion: background target touches the head");
    r.target_support.push_back(w);
  }
  std::vector<Index3> moved;
  for (const Index3& v : inst.voxels) moved.push_back({v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]});
  r.target = make_instance(inst.id, std::move(moved), inst.volume_mm3 / double(inst.size()));

  // Shell statistics around the source support.
  std::array<double, 2> mean{0, 0}, sq{0, 0};
  std::size_t n = 0;
  {
    Mask shell(src.shape());
    for (const Index3& v : support)
      for (int dz = -2; dz <= 2; ++dz)
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const Index3 w{v[0] + dz, v[1] + dy, v[2] + dx};
            if (bounds.contains(w) && !src.at(0, w) && !ph.gt.at(0, w)) shell.at(0, w) = 1;
          }
    for (int z = 0; z < E[0]; ++z)
      for (int y = 0; y < E[1]; ++y)
        for (int x = 0; x < E[2]; ++x)
          if (shell(0, z, y, x)) {
            ++n;
            for (int c = 0; c < 2; ++c) {
              mean[std::size_t(c)] += image(c, z, y, x);
              sq[std::size_t(c)] += image(c, z, y, x) * image(c, z, y, x);
            }
          }
  }
  std::array<double, 2> sd{0, 0};
  if (n > 0)
    for (std::size_t c = 0; c < 2; ++c) {
      mean[c] /= double(n);
      sd[c] = std::sqrt(std::max(0.0, sq[c] / double(n) - mean[c] * mean[c]));
    }

  r.image = image;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nrm(0.0, 1.0);
  for (const Index3& v : support)
    for (int c = 0; c < 2; ++c)
      r.image.at(c, v) = mean[std::size_t(c)] + sd[std::size_t(c)] * nrm(rng);
  for (const Index3& v : support) {
    const Index3 w{v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]};
    for (int c = 0; c < 2; ++c) r.image.at(c, w) = image.at(c, v);
  }
  return r;
}

// Random admissible target centre for relocate_lesion. White-matter targets
// stay at least 3 voxels from any GT lesion; background targets stay at least
// 3 voxels from the head and from distractor blobs.
template <class Rng>
Index3 find_relocation_target(const Phantom& ph, const LesionInstance& inst, double margin_mm,
                              Destination dest, Rng& rng, int max_attempts = 5000) {
  const Index3 E = ph.extents();
  const Box bounds = Box::of(E);
  const double vox_mm = ph.image.spacing[0];
  const auto support = lesion_support(inst, margin_mm, E, vox_mm);
  const Index3 com = center_of_mass(inst);
  Mask keep_out(ph.gt.shape());
  const auto block = [&](const Mask& m) {
    for (int z = 0; z < E[0]; ++z)
      for (int y = 0; y < E[1]; ++y)
        for (int x = 0; x < E[2]; ++x)
          if (m(0, z, y, x))
            for (int dz = -3; dz <= 3; ++dz)
              for (int dy = -3; dy <= 3; ++dy)
                for (int dx = -3; dx <= 3; ++dx) {
                  const Index3 w{z + dz, y + dy, x + dx};
                  if (bounds.contains(w)) keep_out.at(0, w) = 1;
                }
  };
  block(ph.gt);
  if (dest == Destination::background) {
    block(ph.head);
    block(mask_of(ph.distractors, E));
  }
  Mask src(ph.gt.shape());
  for (const Index3& v : support) src.at(0, v) = 1;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const Index3 c{std::uniform_int_distribution<int>(0, E[0] - 1)(rng),
                   std::uniform_int_distribution<int>(0, E[1] - 1)(rng),
                   std::uniform_int_distribution<int>(0, E[2] - 1)(rng)};
    bool ok = true;
    for (const Index3& v : support) {
      const Index3 w{v[0] + c[0] - com[0], v[1] + c[1] - com[1], v[2] + c[2] - com[2]};
      if (!bounds.contains(w) || keep_out.at(0, w) || src.at(0, w) ||
          (dest == Destination::white_matter && !ph.brain.at(0, w))) {
        ok = false;
        break;
      }
    }
    if (ok) return c;
  }
  throw placement_error(std::string("no admissible ") + to_string(dest) + " target found");
}

}  // namespace instxai
