#pragma once

// Lesion instances: thresholding, connected components, size filtering,
// detection categories and true-negative probe spheres.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "instxai/tensor.hpp"
#include "instxai/volume.hpp"

namespace instxai {

struct LesionInstance {
  int id = 0;
  std::vector<Index3> voxels;  // sorted in z, y, x scan order
  double volume_mm3 = 0.0;
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  Box bbox{};

  std::size_t size() const { return voxels.size(); }
  bool empty() const { return voxels.empty(); }
};

// Fills volume, centroid and bbox from the voxel list.
inline void finalize(LesionInstance& inst, double voxel_volume = 1.0) {
  std::sort(inst.voxels.begin(), inst.voxels.end());
  inst.volume_mm3 = double(inst.voxels.size()) * voxel_volume;
  inst.centroid = {0.0, 0.0, 0.0};
  inst.bbox = Box{};
  for (const Index3& v : inst.voxels) {
    for (int a = 0; a < 3; ++a) inst.centroid[a] += v[a];
    inst.bbox = hull(inst.bbox, box_around(v));
  }
  if (!inst.voxels.empty())
    for (double& c : inst.centroid) c /= double(inst.voxels.size());
}

inline LesionInstance make_instance(int id, std::vector<Index3> voxels,
                                    double voxel_volume = 1.0) {
  LesionInstance inst;
  inst.id = id;
  inst.voxels = std::move(voxels);
  finalize(inst, voxel_volume);
  return inst;
}

inline Mask mask_of(const std::vector<LesionInstance>& instances, const Index3& extents) {
  Mask m(Shape{1, extents[0], extents[1], extents[2]});
  for (const auto& inst : instances)
    for (const Index3& v : inst.voxels) m.at(0, v) = 1;
  return m;
}

inline std::size_t count(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.values()) n += v != 0;
  return n;
}

// Voxels strictly above t.
template <class T>
Mask binarize(const Tensor<T>& prob, double t = 0.3, int channel = 0) {
  const Shape& s = prob.shape();
  Mask m(Shape{1, s.z, s.y, s.x});
  const T* p = prob.channel(channel);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = double(p[i]) > t ? 1 : 0;
  return m;
}

// Neighbour offsets for 6-, 18- or 26-connectivity.
inline std::vector<Index3> neighbourhood(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw error("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
  std::vector<Index3> off;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nz = (dz != 0) + (dy != 0) + (dx != 0);
        if (nz == 0) continue;
        if (connectivity == 6 && nz > 1) continue;
        if (connectivity == 18 && nz > 2) continue;
        off.push_back({dz, dy, dx});
      }
  return off;
}

namespace detail {

class DisjointSets {
 public:
  std::uint32_t make() {
    parent_.push_back(std::uint32_t(parent_.size()));
    return parent_.back();
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b)
      parent_[b] = a;
    else
      parent_[a] = b;
  }

 private:
  std::vector<std::uint32_t> parent_;
};

}  // namespace detail

// Two-pass raster labelling with union-find. Returns a label volume (0 =
// background, labels 1..n in order of first appearance in scan order).
inline Tensor<std::uint32_t> label_components(const Mask& mask, int connectivity = 18) {
  const auto all = neighbourhood(connectivity);
  std::vector<Index3> back;  // neighbours already visited in raster order
  for (const Index3& o : all)
    if (o[0] < 0 || (o[0] == 0 && (o[1] < 0 || (o[1] == 0 && o[2] < 0)))) back.push_back(o);
  const Shape& s = mask.shape();
  Tensor<std::uint32_t> provisional(Shape{1, s.z, s.y, s.x});
  detail::DisjointSets sets;
  sets.make();  // label 0 = background
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        if (!mask(0, z, y, x)) continue;
        std::uint32_t lab = 0;
        for (const Index3& o : back) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz < 0 || ny < 0 || nx < 0 || ny >= s.y || nx >= s.x) continue;
          const std::uint32_t l = provisional(0, nz, ny, nx);
          if (l == 0) continue;
          if (lab == 0)
            lab = l;
          else if (l != lab)
            sets.unite(lab, l);
        }
        provisional(0, z, y, x) = lab ? lab : sets.make();
      }
  std::vector<std::uint32_t> remap;
  std::uint32_t next = 0;
  Tensor<std::uint32_t> labels(provisional.shape());
  for (std::size_t i = 0; i < provisional.size(); ++i) {
    const std::uint32_t l = provisional.data()[i];
    if (!l) continue;
    const std::uint32_t root = sets.find(l);
    if (remap.size() <= root) remap.resize(root + 1, 0);
    if (!remap[root]) remap[root] = ++next;
    labels.data()[i] = remap[root];
  }
  return labels;
}

inline std::vector<LesionInstance> connected_components(const Mask& mask,
                                                        int connectivity = 18,
                                                        double voxel_volume = 1.0) {
  const auto labels = label_components(mask, connectivity);
  const Shape& s = mask.shape();
  std::vector<LesionInstance> out;
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        const std::uint32_t l = labels(0, z, y, x);
        if (!l) continue;
        if (out.size() < l) out.resize(l);
        out[l - 1].voxels.push_back({z, y, x});
      }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = int(i) + 1;
    finalize(out[i], voxel_volume);
  }
  return out;
}

inline std::vector<LesionInstance> filter_min_volume(std::vector<LesionInstance> instances,
                                                     double min_mm3 = 5.0) {
  std::erase_if(instances, [&](const LesionInstance& i) { return i.volume_mm3 < min_mm3; });
  return instances;
}

enum class Category { TP, FP, FN, TN };

inline const char* to_string(Category c) {
  switch (c) {
    case Category::TP: return "TP";
    case Category::FP: return "FP";
    case Category::FN: return "FN";
    case Category::TN: return "TN";
  }
  return "?";
}

inline Category parse_category(const std::string& s) {
  if (s == "TP") return Category::TP;
  if (s == "FP") return Category::FP;
  if (s == "FN") return Category::FN;
  if (s == "TN") return Category::TN;
  throw error("unknown category '" + s + "'");
}

struct CategorizedInstance {
  LesionInstance instance;
  Category category = Category::TP;
  std::size_t overlap = 0;  // voxels shared with the opposing mask
  bool categorized = true;  // false: written as "-"
};

struct DetectionCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  int gt = 0;

  double true_positive_rate() const { return gt ? double(gt - fn) / gt : 0.0; }
  double false_discovery_rate() const { return tp + fp ? double(fp) / (tp + fp) : 0.0; }
  double false_negative_rate() const { return gt ? double(fn) / gt : 0.0; }
};

inline std::size_t overlap(const LesionInstance& inst, const Mask& m) {
  std::size_t n = 0;
  for (const Index3& v : inst.voxels) n += m.at(0, v) != 0;
  return n;
}

// Predicted instances become TP/FP by overlap with the GT mask; GT instances
// with no overlap with the predicted mask become FN.
inline std::vector<CategorizedInstance> categorize(const std::vector<LesionInstance>& pred,
                                                   const std::vector<LesionInstance>& gt,
                                                   const Mask& pred_mask,
                                                   const Mask& gt_mask,
                                                   DetectionCounts* counts = nullptr) {
  std::vector<CategorizedInstance> out;
  DetectionCounts dc;
  dc.gt = int(gt.size());
  for (const auto& p : pred) {
    const std::size_t ov = overlap(p, gt_mask);
    out.push_back({p, ov > 0 ? Category::TP : Category::FP, ov});
    (ov > 0 ? dc.tp : dc.fp)++;
  }
  for (const auto& g : gt) {
    const std::size_t ov = overlap(g, pred_mask);
    if (ov == 0) {
      out.push_back({g, Category::FN, 0});
      ++dc.fn;
    }
  }
  if (counts) *counts = dc;
  return out;
}

// Radius of a ball with the given volume.
inline double sphere_radius(double volume_mm3) {
  return std::cbrt(3.0 * volume_mm3 / (4.0 * std::numbers::pi));
}

// Offsets of the discrete ball {d : |d| <= r} in voxel units.
inline std::vector<Index3> ball_offsets(double radius_vox) {
  std::vector<Index3> off;
  const int R = int(std::floor(radius_vox));
  for (int dz = -R; dz <= R; ++dz)
    for (int dy = -R; dy <= R; ++dy)
      for (int dx = -R; dx <= R; ++dx)
        if (double(dz * dz + dy * dy + dx * dx) <= radius_vox * radius_vox + 1e-9)
          off.push_back({dz, dy, dx});
  return off;
}

struct TnSampling {
  std::vector<LesionInstance> spheres;
  bool incomplete = false;  // fewer than requested placements were found
};

// Random discrete balls of the given volume inside the brain, disjoint from
// GT and prediction. Spheres are also kept disjoint from each other.
template <class Rng>
TnSampling sample_tn_spheres(const Mask& brain, const Mask& gt, const Mask& pred, Rng& rng,
                             int count = 10, double volume_mm3 = 93.0,
                             double voxel_size_mm = 1.0, int max_attempts = 20000) {
  TnSampling res;
  const auto offs = ball_offsets(sphere_radius(volume_mm3) / voxel_size_mm);
  std::vector<Index3> candidates;
  const Shape& s = brain.shape();
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x)
        if (brain(0, z, y, x) && !gt(0, z, y, x) && !pred(0, z, y, x))
          candidates.push_back({z, y, x});
  Mask taken(brain.shape());
  const Box bounds = Box::of(s);
  int attempts = 0;
  while (int(res.spheres.size()) < count && !candidates.empty() && attempts < max_attempts) {
    ++attempts;
    const Index3 c =
        candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    std::vector<Index3> vox;
    bool ok = true;
    for (const Index3& o : offs) {
      const Index3 v{c[0] + o[0], c[1] + o[1], c[2] + o[2]};
      if (!bounds.contains(v) || !brain.at(0, v) || gt.at(0, v) || pred.at(0, v) ||
          taken.at(0, v)) {
        ok = false;
        break;
      }
      vox.push_back(v);
    }
    if (!ok) continue;
    for (const Index3& v : vox) taken.at(0, v) = 1;
    res.spheres.push_back(make_instance(int(res.spheres.size()) + 1, std::move(vox),
                                        voxel_size_mm * voxel_size_mm * voxel_size_mm));
  }
  res.incomplete = int(res.spheres.size()) < count;
  return res;
}

// Voxel of the instance nearest to its centroid; ties go to the
// lexicographically smallest coordinate.
inline Index3 center_of_mass(const LesionInstance& inst) {
  if (inst.voxels.empty()) throw error("center_of_mass: empty instance");
  std::array<double, 3> c{0, 0, 0};
  for (const Index3& v : inst.voxels)
    for (int a = 0; a < 3; ++a) c[a] += v[a];
  for (double& x : c) x /= double(inst.voxels.size());
  Index3 best = inst.voxels.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (const Index3& v : inst.voxels) {
    double d = 0;
    for (int a = 0; a < 3; ++a) d += (v[a] - c[a]) * (v[a] - c[a]);
    if (d < best_d || (d == best_d && v < best)) {
      best = v;
      best_d = d;
    }
  }
  return best;
}

// ------------------------------------------------------------ serialization
//
// One instance per line:
//   <id> <category> <volume_mm3> <cz> <cy> <cx> <bbox lo z y x> <bbox hi z y x> <runs...>
// where runs are "z,y,x0:len" triples along x.

inline std::string encode_runs(const LesionInstance& inst) {
  std::ostringstream os;
  std::size_t i = 0;
  bool first = true;
  while (i < inst.voxels.size()) {
    const Index3 start = inst.voxels[i];
    int len = 1;
    while (i + std::size_t(len) < inst.voxels.size()) {
      const Index3& n = inst.voxels[i + std::size_t(len)];
      if (n[0] != start[0] || n[1] != start[1] || n[2] != start[2] + len) break;
      ++len;
    }
    if (!first) os << ' ';
    os << start[0] << ',' << start[1] << ',' << start[2] << ':' << len;
    first = false;
    i += std::size_t(len);
  }
  return os.str();
}

inline void write_instances(std::ostream& os, const std::vector<CategorizedInstance>& items) {
  os << "# instxai instances v1\n";
  os << "# id category volume_mm3 cz cy cx lo_z lo_y lo_x hi_z hi_y hi_x runs(z,y,x:len)\n";
  os.precision(10);
  for (const auto& it : items) {
    const auto& in = it.instance;
    os << in.id << ' ' << (it.categorized ? to_string(it.category) : "-") << ' ' << in.volume_mm3 << ' '
       << in.centroid[0] << ' ' << in.centroid[1] << ' ' << in.centroid[2] << ' '
       << in.bbox.lo[0] << ' ' << in.bbox.lo[1] << ' ' << in.bbox.lo[2] << ' '
       << in.bbox.hi[0] << ' ' << in.bbox.hi[1] << ' ' << in.bbox.hi[2] << ' '
       << encode_runs(in) << '\n';
  }
}

inline std::vector<CategorizedInstance> read_instances(std::istream& is,
                                                       double voxel_volume = 1.0) {
  std::vector<CategorizedInstance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    CategorizedInstance ci;
    std::string cat;
    double vol, c0, c1, c2;
    Box bb;
    if (!(ls >> ci.instance.id >> cat >> vol >> c0 >> c1 >> c2 >> bb.lo[0] >> bb.lo[1] >>
          bb.lo[2] >> bb.hi[0] >> bb.hi[1] >> bb.hi[2]))
      throw io_error("malformed instance line: " + line);
    if (cat == "-")
      ci.categorized = false;
    else if (cat == "TP" || cat == "FP" || cat == "FN" || cat == "TN")
      ci.category = parse_category(cat);
    else
      throw io_error("unknown category '" + cat + "' in instance line: " + line);
    std::string run;
    while (ls >> run) {
      int z, y, x, len;
      char c1_, c2_, c3_;
      std::istringstream rs(run);
      if (!(rs >> z >> c1_ >> y >> c2_ >> x >> c3_ >> len) || c1_ != ',' || c2_ != ',' ||
          c3_ != ':' || len <= 0)
        throw io_error("malformed run '" + run + "'");
      for (int k = 0; k < len; ++k) ci.instance.voxels.push_back({z, y, x + k});
    }
    finalize(ci.instance, voxel_volume);
    out.push_back(std::move(ci));
  }
  return out;
}

}  // namespace instxai
