#pragma once

// Phantom-scale versions of the analyses: saliency-extrema distributions per
// prediction category, sanity checks, lesion relocation and the contextual
// information (progressive reveal) experiment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "instxai/instances.hpp"
#include "instxai/keyvalue.hpp"
#include "instxai/phantom.hpp"
#include "instxai/saliency.hpp"
#include "instxai/segmodel.hpp"
#include "instxai/stats.hpp"

namespace instxai {

// Constants shared by every pipeline stage.
struct RunConfig {
  std::uint64_t seed = 1;
  double threshold = 0.3;
  int noise_n = 50;
  double noise_sigma = 0.05;
  int omega_cap = kDefaultOmegaCap;
  double min_volume_mm3 = 5.0;
  int tn_count = 10;
  double tn_volume_mm3 = 93.0;
  int dilation_iterations = 35;
  int dilation_connectivity = 26;  // 26: cube element, 6: cross element
  double band_lo = -0.1;
  double band_hi = 0.1;
  int bootstrap_resamples = 1000;

  NoiseSpec noise() const { return {noise_n, noise_sigma, seed}; }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("seed", double(seed));
    kv.set("threshold", threshold);
    kv.set("noise_n", noise_n);
    kv.set("noise_sigma", noise_sigma);
    kv.set("omega_cap", omega_cap);
    kv.set("min_volume_mm3", min_volume_mm3);
    kv.set("tn_count", tn_count);
    kv.set("tn_volume_mm3", tn_volume_mm3);
    kv.set("dilation_iterations", dilation_iterations);
    kv.set("dilation_connectivity", dilation_connectivity);
    kv.set("band_lo", band_lo);
    kv.set("band_hi", band_hi);
    kv.set("bootstrap_resamples", bootstrap_resamples);
    return kv;
  }

  static RunConfig from_kv(const KeyValues& kv) {
    RunConfig c;
    c.seed = std::uint64_t(kv.get_double("seed", double(c.seed)));
    c.threshold = kv.get_double("threshold", c.threshold);
    c.noise_n = kv.get_int("noise_n", c.noise_n);
    c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
    c.omega_cap = kv.get_int("omega_cap", c.omega_cap);
    c.min_volume_mm3 = kv.get_double("min_volume_mm3", c.min_volume_mm3);
    c.tn_count = kv.get_int("tn_count", c.tn_count);
    c.tn_volume_mm3 = kv.get_double("tn_volume_mm3", c.tn_volume_mm3);
    c.dilation_iterations = kv.get_int("dilation_iterations", c.dilation_iterations);
    c.dilation_connectivity = kv.get_int("dilation_connectivity", c.dilation_connectivity);
    if (c.dilation_connectivity != 6 && c.dilation_connectivity != 26)
      throw config_error("dilation_connectivity must be 6 or 26");
    c.band_lo = kv.get_double("band_lo", c.band_lo);
    c.band_hi = kv.get_double("band_hi", c.band_hi);
    c.bootstrap_resamples = kv.get_int("bootstrap_resamples", c.bootstrap_resamples);
    return c;
  }
};

// Independent, reproducible stream seed for one work item.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::seed_seq sq{base & 0xffffffffu, base >> 32, a, b, c};
  std::uint32_t w[2];
  sq.generate(w, w + 2);
  return (std::uint64_t(w[0]) << 32) | w[1];
}

// ------------------------------------------------------------- prediction

template <class T>
struct Prediction {
  Tensor<T> prob;
  Mask mask;  // prob > t, before the volume filter
  std::vector<LesionInstance> instances;
};

template <class T>
Prediction<T> predict(const Graph<T>& g, const Tensor<T>& image, int patch, double t = 0.3,
                      double min_mm3 = 5.0, double voxel_mm3 = 1.0) {
  Prediction<T> p;
  p.prob = infer_volume(g, image, patch);
  p.mask = binarize(p.prob, t);
  p.instances = filter_min_volume(connected_components(p.mask, 18, voxel_mm3), min_mm3);
  return p;
}

template <class T>
struct StudyVolume {
  int id = 0;
  const Phantom* phantom = nullptr;
  Tensor<T> image;  // normalized
  Prediction<T> prediction;
};

// ------------------------------------------------------- extrema / U tests

struct ExtremaRow {
  int volume = 0;
  int instance = 0;
  Category category = Category::TP;
  int modality = 0;
  double max = 0.0;
  double min = 0.0;
  double omega_median = 0.0;  // median of the map over the domain
  std::size_t omega_size = 0;
};

struct CategorySummary {
  Category category = Category::TP;
  int modality = 0;
  std::string stat;  // max | min
  std::size_t count = 0;
  MedianCI ci;
  bool empty = true;
};

struct PairTest {
  Category a = Category::TP;
  Category b = Category::FP;
  int modality = 0;
  std::string stat;
  UTest test;
  bool skipped = true;
};

struct ExtremaTable {
  std::vector<ExtremaRow> rows;
  std::vector<CategorySummary> summary;
  std::vector<PairTest> tests;

  std::vector<double> values(Category c, int modality, const std::string& stat) const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.category == c && r.modality == modality) v.push_back(stat == "max" ? r.max : r.min);
    return v;
  }
  const CategorySummary* find_summary(Category c, int modality, const std::string& stat) const {
    for (const auto& s : summary)
      if (s.category == c && s.modality == modality && s.stat == stat) return &s;
    return nullptr;
  }
  const PairTest* find_test(Category a, Category b, int modality, const std::string& stat) const {
    for (const auto& t : tests)
      if (t.modality == modality && t.stat == stat &&
          ((t.a == a && t.b == b) || (t.a == b && t.b == a)))
        return &t;
    return nullptr;
  }
};

inline constexpr Category kCategories[] = {Category::TP, Category::FP, Category::FN,
                                           Category::TN};

// Medians with bootstrap CIs and the six pairwise tests, per modality and
// statistic. Tests involving an empty category are marked skipped.
inline void summarize_extrema(ExtremaTable& table, int modalities, int resamples,
                              std::uint64_t seed) {
  table.summary.clear();
  table.tests.clear();
  for (int m = 0; m < modalities; ++m)
    for (const char* stat : {"max", "min"}) {
      for (Category c : kCategories) {
        CategorySummary s;
        s.category = c;
        s.modality = m;
        s.stat = stat;
        const auto v = table.values(c, m, stat);
        s.count = v.size();
        s.empty = v.empty();
        if (!v.empty())
          s.ci = bootstrap_median_ci(v, resamples, derive_seed(seed, std::uint64_t(m), int(c)));
        table.summary.push_back(s);
      }
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
          PairTest t;
          t.a = kCategories[i];
          t.b = kCategories[j];
          t.modality = m;
          t.stat = stat;
          const auto va = table.values(t.a, m, stat);
          const auto vb = table.values(t.b, m, stat);
          if (!va.empty() && !vb.empty()) {
            t.test = mann_whitney_u(va, vb);
            t.skipped = false;
          }
          table.tests.push_back(t);
        }
    }
}

struct Probe {
  int volume = 0;
  int instance = 0;
  Category category = Category::TP;
  std::vector<Index3> omega;
};

// TP/FP predicted instances, FN ground-truth instances and TN spheres of one
// volume, in that order.
template <class T>
std::vector<Probe> study_probes(const StudyVolume<T>& sv, const RunConfig& cfg) {
  const Phantom& ph = *sv.phantom;
  std::vector<Probe> out;
  const auto cats = categorize(sv.prediction.instances, ph.instances, sv.prediction.mask, ph.gt);
  for (const auto& ci : cats)
    out.push_back({sv.id, ci.instance.id, ci.category, ci.instance.voxels});
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7e57, std::uint64_t(sv.id)));
  const auto tn = sample_tn_spheres(ph.brain, ph.gt, sv.prediction.mask, rng, cfg.tn_count,
                                    cfg.tn_volume_mm3, ph.image.spacing[0]);
  int k = 0;
  for (const auto& s : tn.spheres) out.push_back({sv.id, ++k, Category::TN, s.voxels});
  return out;
}

template <class T>
SaliencyMap probe_saliency(const Graph<T>& g, const Tensor<T>& image, const Probe& p,
                           const RunConfig& cfg) {
  NoiseSpec noise = cfg.noise();
  noise.seed = derive_seed(cfg.seed, std::uint64_t(p.volume), std::uint64_t(p.instance),
                           std::uint64_t(p.category) + 1);
  SaliencyOptions so;
  so.omega_cap = cfg.omega_cap;
  SaliencyMap m = smoothgrad_instance_max(g, image, p.omega, noise, so);
  m.target = std::string(to_string(p.category)) + ":" + std::to_string(p.instance);
  return m;
}

template <class T>
ExtremaTable distribution_study(const Graph<T>& g, const std::vector<StudyVolume<T>>& volumes,
                                const RunConfig& cfg) {
  ExtremaTable table;
  int modalities = 0;
  for (const auto& sv : volumes) {
    modalities = sv.image.shape().c;
    for (const Probe& p : study_probes(sv, cfg)) {
      const SaliencyMap m = probe_saliency(g, sv.image, p, cfg);
      for (int c = 0; c < m.values.shape().c; ++c) {
        const Extrema e = saliency_extrema(m.values, c, cfg.band_lo, cfg.band_hi);
        ExtremaRow r;
        r.volume = p.volume;
        r.instance = p.instance;
        r.category = p.category;
        r.modality = c;
        r.max = e.max;
        r.min = e.min;
        r.omega_median = median_over(m.values, c, p.omega);
        r.omega_size = p.omega.size();
        table.rows.push_back(r);
      }
    }
  }
  summarize_extrema(table, modalities, cfg.bootstrap_resamples, cfg.seed);
  return table;
}

// --------------------------------------------------------------- sanity

struct EmptyRegionReport {
  SaliencyMap map;
  std::vector<Index3> omega;
  std::vector<Extrema> extrema;  // per modality
  double peak = 0.0;             // max |value| over all modalities
  std::optional<bool> within_tn_iqr;
};

inline double peak_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

inline std::pair<double, double> interquartile(std::vector<double> v) {
  if (v.empty()) return {0.0, 0.0};
  std::sort(v.begin(), v.end());
  return {quantile_sorted(v, 0.25), quantile_sorted(v, 0.75)};
}

// Saliency of a lesion-free ball. With a table, also reports whether the
// modality-0 maximum falls inside the interquartile range of the TN maxima.
template <class T>
EmptyRegionReport sanity_empty_region(const Graph<T>& g, const StudyVolume<T>& sv,
                                      const RunConfig& cfg, const ExtremaTable* table = nullptr) {
  const Phantom& ph = *sv.phantom;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xe3b7, std::uint64_t(sv.id)));
  const auto tn = sample_tn_spheres(ph.brain, ph.gt, sv.prediction.mask, rng, 1,
                                    cfg.tn_volume_mm3, ph.image.spacing[0]);
  if (tn.spheres.empty()) throw placement_error("sanity_empty_region: no lesion-free ball fits");
  EmptyRegionReport r;
  r.omega = tn.spheres.front().voxels;
  r.map = probe_saliency(g, sv.image, Probe{sv.id, 0, Category::TN, r.omega}, cfg);
  for (int c = 0; c < r.map.values.shape().c; ++c)
    r.extrema.push_back(saliency_extrema(r.map.values, c, cfg.band_lo, cfg.band_hi));
  r.peak = peak_abs(r.map.values);
  if (table) {
    const auto v = table->values(Category::TN, 0, "max");
    if (!v.empty()) {
      const auto [lo, hi] = interquartile(v);
      r.within_tn_iqr = r.extrema[0].max >= lo && r.extrema[0].max <= hi;
    }
  }
  return r;
}

struct SingleVoxelReport {
  Index3 voxel{};
  SaliencyMap average;
  SaliencyMap signed_max;
  bool identical = false;
  double vicinity_fraction = 0.0;  // |saliency| mass within the instance + 2 voxels
  bool zero_beyond_receptive_field = false;
};

template <class T>
SingleVoxelReport sanity_single_voxel(const Graph<T>& g, const Tensor<T>& image,
                                      const LesionInstance& inst, const RunConfig& cfg,
                                      std::optional<Index3> voxel = std::nullopt) {
  SingleVoxelReport r;
  r.voxel = voxel ? *voxel : center_of_mass(inst);
  const std::vector<Index3> omega{r.voxel};
  NoiseSpec noise = cfg.noise();
  noise.seed = derive_seed(cfg.seed, 0x51, std::uint64_t(inst.id));
  SaliencyOptions so;
  so.omega_cap = cfg.omega_cap;
  r.average = smoothgrad_instance_avg(g, image, omega, noise, so);
  r.signed_max = smoothgrad_instance_max(g, image, omega, noise, so);
  r.identical = r.average.values == r.signed_max.values;

  const Index3 E = image.shape().spatial();
  const Box bounds = Box::of(E);
  Mask near(Shape{1, E[0], E[1], E[2]});
  for (const Index3& v : inst.voxels)
    for (int dz = -2; dz <= 2; ++dz)
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const Index3 w{v[0] + dz, v[1] + dy, v[2] + dx};
          if (bounds.contains(w)) near.at(0, w) = 1;
        }
  const Box rf = intersect(dilate(box_around(r.voxel), receptive_field(g)), bounds);
  double inside = 0, total = 0;
  bool zero_out = true;
  const Tensor<double>& m = r.signed_max.values;
  for (int c = 0; c < m.shape().c; ++c)
    for (int z = 0; z < E[0]; ++z)
      for (int y = 0; y < E[1]; ++y)
        for (int x = 0; x < E[2]; ++x) {
          const double a = std::abs(m(c, z, y, x));
          total += a;
          if (near(0, z, y, x)) inside += a;
          if (a != 0 && !rf.contains(Index3{z, y, x})) zero_out = false;
        }
  r.vicinity_fraction = total > 0 ? inside / total : 0.0;
  r.zero_beyond_receptive_field = zero_out;
  return r;
}

// ------------------------------------------------------------ relocation

struct RelocationCase {
  Destination destination = Destination::white_matter;
  double margin_mm = 0.0;
  bool placed = false;
  std::string failure;
  Index3 target_centre{};
  double max_score = 0.0;  // max foreground probability over the moved lesion
  bool detected = false;
  SaliencyMap map;
  std::vector<Extrema> extrema;
  double peak = 0.0;
};

struct RelocationReport {
  int instance = 0;
  std::vector<RelocationCase> cases;  // (wm, 0), (background, 0), (background, 3)
};

template <class T>
RelocationReport relocation_study(const Graph<T>& g, const Phantom& ph, int volume_id,
                                  const LesionInstance& inst, int patch, const RunConfig& cfg) {
  const Tensor<double> image = preprocess(ph.image);
  RelocationReport rep;
  rep.instance = inst.id;
  const std::pair<Destination, double> plan[] = {{Destination::white_matter, 0.0},
                                                 {Destination::background, 0.0},
                                                 {Destination::background, 3.0}};
  int k = 0;
  for (const auto& [dest, margin] : plan) {
    ++k;
    RelocationCase rc;
    rc.destination = dest;
    rc.margin_mm = margin;
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x4e10, std::uint64_t(volume_id),
                                    std::uint64_t(inst.id) * 8 + std::uint64_t(k)));
    try {
      rc.target_centre = find_relocation_target(ph, inst, margin, dest, rng);
      const Relocation rel = relocate_lesion(ph, image, inst, rc.target_centre, margin, dest,
                                             rng());
      rc.placed = true;
      const Tensor<T> x = rel.image.template cast<T>();
      const Box roi = detail::omega_box(rel.target.voxels, x.shape().spatial());
      const Tensor<T> prob = infer_volume(g, x, patch, roi);
      for (const Index3& v : rel.target.voxels)
        rc.max_score = std::max(rc.max_score, double(prob.at(0, v)));
      rc.detected = rc.max_score > cfg.threshold;
      rc.map = probe_saliency(g, x, Probe{volume_id, inst.id * 8 + k, Category::TP,
                                         rel.target.voxels}, cfg);
      for (int c = 0; c < rc.map.values.shape().c; ++c)
        rc.extrema.push_back(saliency_extrema(rc.map.values, c, cfg.band_lo, cfg.band_hi));
      rc.peak = peak_abs(rc.map.values);
    } catch (const placement_error& e) {
      rc.failure = e.what();
    }
    rep.cases.push_back(std::move(rc));
  }
  return rep;
}

// Ground-truth lesions of a volume that the model detects (any predicted
// voxel), in id order, at most `count`.
template <class T>
std::vector<LesionInstance> relocation_candidates(const StudyVolume<T>& sv, int count) {
  std::vector<LesionInstance> out;
  for (const auto& li : sv.phantom->instances) {
    if (int(out.size()) >= count) break;
    for (const Index3& v : li.voxels)
      if (sv.prediction.mask.at(0, v)) {
        out.push_back(li);
        break;
      }
  }
  return out;
}

// --------------------------------------------------------------- context

// Voxels within Chebyshev distance k of the domain: k steps of dilation with
// the 3x3x3 cube.
inline Mask cube_dilation(const std::vector<Index3>& omega, int k, const Index3& extents) {
  const Shape sh{1, extents[0], extents[1], extents[2]};
  Mask m(sh);
  const Box bounds = Box::of(extents);
  for (const Index3& v : omega) {
    if (!bounds.contains(v)) throw error("cube_dilation: voxel outside the volume");
    m.at(0, v) = 1;
  }
  if (k <= 0) return m;
  // separable: a cube is the product of three 1D windows
  const std::size_t strides[3] = {std::size_t(extents[1]) * extents[2], std::size_t(extents[2]), 1};
  std::vector<int> prefix;
  std::vector<std::uint8_t> line;
  for (int a = 0; a < 3; ++a) {
    const int len = extents[a];
    const int o1 = a == 0 ? 1 : 0, o2 = a == 2 ? 1 : 2;
    prefix.assign(std::size_t(len) + 1, 0);
    line.resize(std::size_t(len));
    for (int i = 0; i < extents[o1]; ++i)
      for (int j = 0; j < extents[o2]; ++j) {
        const std::size_t base = std::size_t(i) * strides[o1] + std::size_t(j) * strides[o2];
        for (int t = 0; t < len; ++t)
          prefix[std::size_t(t) + 1] = prefix[std::size_t(t)] + m.data()[base + std::size_t(t) * strides[a]];
        for (int t = 0; t < len; ++t) {
          const int lo = std::max(0, t - k), hi = std::min(len, t + k + 1);
          line[std::size_t(t)] = prefix[std::size_t(hi)] - prefix[std::size_t(lo)] > 0;
        }
        for (int t = 0; t < len; ++t) m.data()[base + std::size_t(t) * strides[a]] = line[std::size_t(t)];
      }
  }
  return m;
}

// Voxels within city-block distance k of the domain: k steps of dilation
// with the 6-neighbour cross.
inline Mask cross_dilation(const std::vector<Index3>& omega, int k, const Index3& extents) {
  const Shape sh{1, extents[0], extents[1], extents[2]};
  const Box bounds = Box::of(extents);
  std::vector<int> dist(sh.spatial_size(), -1);
  std::vector<Index3> front;
  const auto at = [&](const Index3& v) {
    return (std::size_t(v[0]) * std::size_t(extents[1]) + std::size_t(v[1])) * std::size_t(extents[2]) +
           std::size_t(v[2]);
  };
  for (const Index3& v : omega) {
    if (!bounds.contains(v)) throw error("cross_dilation: voxel outside the volume");
    if (dist[at(v)] < 0) front.push_back(v);
    dist[at(v)] = 0;
  }
  Mask m(sh);
  for (const Index3& v : front) m.data()[at(v)] = 1;
  for (int step = 1; step <= k && !front.empty(); ++step) {
    std::vector<Index3> next;
    for (const Index3& v : front)
      for (int a = 0; a < 3; ++a)
        for (int d : {-1, 1}) {
          Index3 w = v;
          w[a] += d;
          if (!bounds.contains(w) || dist[at(w)] >= 0) continue;
          dist[at(w)] = step;
          m.data()[at(w)] = 1;
          next.push_back(w);
        }
    front = std::move(next);
  }
  return m;
}

inline Mask reveal_mask(const std::vector<Index3>& omega, int k, const Index3& extents,
                        int connectivity) {
  if (connectivity == 26) return cube_dilation(omega, k, extents);
  if (connectivity == 6) return cross_dilation(omega, k, extents);
  throw config_error("dilation connectivity must be 6 or 26");
}

struct ContextPoint {
  int k = 0;
  double radius_mm = 0.0;
  double mean_score = 0.0;  // across lesions of the mean score over the domain
  double sd_score = 0.0;
  int detected = 0;
  int lesions = 0;
};

struct ContextCurve {
  std::vector<ContextPoint> points;
  std::vector<std::vector<double>> scores;  // [lesion][k]
  std::vector<std::vector<bool>> detections;
  std::vector<int> instance_ids;
};

// Lesions whose volume lies within +-fraction of the reference volume.
inline std::vector<LesionInstance> volume_band(const std::vector<LesionInstance>& instances,
                                               double reference_mm3, double fraction = 0.15) {
  std::vector<LesionInstance> out;
  for (const auto& i : instances)
    if (std::abs(i.volume_mm3 - reference_mm3) <= fraction * reference_mm3) out.push_back(i);
  return out;
}

// Iteration k keeps the image on the k-step dilation of the domain and sets
// every other voxel to 0 (the normalized mean); iteration 0 keeps only the
// domain itself. With the cube element the curve is flat from k = receptive
// field radius on; the cross element needs three times as many steps.
template <class T>
ContextCurve context_experiment(const Graph<T>& g, const Tensor<T>& image,
                                const std::vector<LesionInstance>& lesions, int patch,
                                int iterations = 35, double t = 0.3, double spacing_mm = 1.0,
                                int connectivity = 26) {
  if (iterations < 0) throw error("context_experiment: iterations must be >= 0");
  ContextCurve curve;
  const Index3 E = image.shape().spatial();
  const int C = image.shape().c;
  for (const auto& inst : lesions) {
    curve.instance_ids.push_back(inst.id);
    std::vector<double> sc;
    std::vector<bool> det;
    const Box roi = detail::omega_box(inst.voxels, E);
    for (int k = 0; k <= iterations; ++k) {
      const Mask reveal = reveal_mask(inst.voxels, k, E, connectivity);
      Tensor<T> x(image.shape());
      const std::size_t n = image.shape().spatial_size();
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i)
          if (reveal.data()[i]) x.channel(c)[i] = image.channel(c)[i];
      const Tensor<T> prob = infer_volume(g, x, patch, roi);
      double mean = 0;
      bool hit = false;
      for (const Index3& v : inst.voxels) {
        const double p = prob.at(0, v);
        mean += p;
        hit = hit || p > t;
      }
      sc.push_back(mean / double(inst.size()));
      det.push_back(hit);
    }
    curve.scores.push_back(std::move(sc));
    curve.detections.push_back(std::move(det));
  }
  for (int k = 0; k <= iterations; ++k) {
    ContextPoint p;
    p.k = k;
    p.radius_mm = k * spacing_mm;
    p.lesions = int(lesions.size());
    double s = 0, s2 = 0;
    for (std::size_t l = 0; l < lesions.size(); ++l) {
      const double v = curve.scores[l][std::size_t(k)];
      s += v;
      s2 += v * v;
      p.detected += curve.detections[l][std::size_t(k)] ? 1 : 0;
    }
    if (!lesions.empty()) {
      p.mean_score = s / double(lesions.size());
      p.sd_score = std::sqrt(std::max(0.0, s2 / double(lesions.size()) - p.mean_score * p.mean_score));
    }
    curve.points.push_back(p);
  }
  return curve;
}

// TP predicted instances for the context experiment. With id >= 0 only that
// instance; otherwise those within +-15% of the mean ground-truth lesion
// volume, or the single closest one if the band is empty.
template <class T>
std::vector<LesionInstance> context_lesions(const StudyVolume<T>& sv, int id = -1) {
  const Phantom& ph = *sv.phantom;
  std::vector<LesionInstance> tps;
  for (const auto& ci : categorize(sv.prediction.instances, ph.instances, sv.prediction.mask, ph.gt))
    if (ci.category == Category::TP) tps.push_back(ci.instance);
  if (id >= 0) {
    for (const auto& t : tps)
      if (t.id == id) return {t};
    throw error("instance " + std::to_string(id) + " is not a TP prediction");
  }
  if (tps.empty() || ph.instances.empty()) return {};
  double ref = 0;
  for (const auto& g : ph.instances) ref += g.volume_mm3;
  ref /= double(ph.instances.size());
  auto band = volume_band(tps, ref);
  if (band.empty())
    band.push_back(*std::min_element(tps.begin(), tps.end(), [&](const auto& a, const auto& b) {
      return std::abs(a.volume_mm3 - ref) < std::abs(b.volume_mm3 - ref);
    }));
  return band;
}

}  // namespace instxai
