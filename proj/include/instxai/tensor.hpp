#pragma once

// Dense channel-first volumes ([C, Z, Y, X], C order) and axis-aligned boxes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define INSTXAI_HAVE_MXCSR 1
#endif

namespace instxai {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class shape_error : public error {
 public:
  using error::error;
};

class numeric_error : public error {
 public:
  using error::error;
};

// Scoped flush-to-zero / denormals-are-zero. Trained weights drift into the
// subnormal range, which slows the conv kernels several-fold.
class FlushDenormals {
 public:
  FlushDenormals() {
#ifdef INSTXAI_HAVE_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~FlushDenormals() {
#ifdef INSTXAI_HAVE_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

using Index3 = std::array<int, 3>;  // z, y, x

struct Shape {
  int c = 0;
  int z = 0;
  int y = 0;
  int x = 0;

  std::size_t spatial_size() const { return std::size_t(z) * y * x; }
  std::size_t size() const { return std::size_t(c) * spatial_size(); }
  Index3 spatial() const { return {z, y, x}; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << c << ',' << z << ',' << y << ',' << x << ']';
    return os.str();
  }
};

// Half-open box [lo, hi) over the spatial axes.
struct Box {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  static Box of(const Shape& s) { return Box{{0, 0, 0}, {s.z, s.y, s.x}}; }
  static Box of(const Index3& e) { return Box{{0, 0, 0}, e}; }

  bool empty() const {
    return lo[0] >= hi[0] || lo[1] >= hi[1] || lo[2] >= hi[2];
  }
  int extent(int a) const { return std::max(0, hi[a] - lo[a]); }
  Index3 extents() const { return {extent(0), extent(1), extent(2)}; }
  std::size_t volume() const {
    return empty() ? 0 : std::size_t(extent(0)) * extent(1) * extent(2);
  }
  bool contains(const Index3& p) const {
    for (int a = 0; a < 3; ++a)
      if (p[a] < lo[a] || p[a] >= hi[a]) return false;
    return true;
  }
  bool contains(const Box& b) const {
    if (b.empty()) return true;
    for (int a = 0; a < 3; ++a)
      if (b.lo[a] < lo[a] || b.hi[a] > hi[a]) return false;
    return true;
  }
  bool operator==(const Box&) const = default;
};

inline Box hull(const Box& a, const Box& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  Box r;
  for (int i = 0; i < 3; ++i) {
    r.lo[i] = std::min(a.lo[i], b.lo[i]);
    r.hi[i] = std::max(a.hi[i], b.hi[i]);
  }
  return r;
}

inline Box intersect(const Box& a, const Box& b) {
  Box r;
  for (int i = 0; i < 3; ++i) {
    r.lo[i] = std::max(a.lo[i], b.lo[i]);
    r.hi[i] = std::min(a.hi[i], b.hi[i]);
  }
  return r;
}

inline Box dilate(const Box& b, const Index3& r) {
  if (b.empty()) return b;
  Box d = b;
  for (int i = 0; i < 3; ++i) {
    d.lo[i] -= r[i];
    d.hi[i] += r[i];
  }
  return d;
}

inline Box dilate(const Box& b, int r) { return dilate(b, Index3{r, r, r}); }

inline Box box_around(const Index3& p) {
  return Box{p, {p[0] + 1, p[1] + 1, p[2] + 1}};
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(checked(s)), data_(s.size(), fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t offset(int c, int z, int y, int x) const {
    return ((std::size_t(c) * shape_.z + z) * shape_.y + y) * shape_.x + x;
  }
  T& operator()(int c, int z, int y, int x) { return data_[offset(c, z, y, x)]; }
  const T& operator()(int c, int z, int y, int x) const {
    return data_[offset(c, z, y, x)];
  }
  T& at(int c, const Index3& p) { return (*this)(c, p[0], p[1], p[2]); }
  const T& at(int c, const Index3& p) const { return (*this)(c, p[0], p[1], p[2]); }

  T* channel(int c) { return data_.data() + std::size_t(c) * shape_.spatial_size(); }
  const T* channel(int c) const {
    return data_.data() + std::size_t(c) * shape_.spatial_size();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Zero every channel over the given spatial box.
  void zero_box(const Box& b) {
    if (b.empty()) return;
    for (int c = 0; c < shape_.c; ++c)
      for (int z = b.lo[0]; z < b.hi[0]; ++z)
        for (int y = b.lo[1]; y < b.hi[1]; ++y) {
          T* row = &(*this)(c, z, y, b.lo[2]);
          std::fill(row, row + b.extent(2), T(0));
        }
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = U(data_[i]);
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  static Shape checked(const Shape& s) {
    if (s.c < 0 || s.z < 0 || s.y < 0 || s.x < 0)
      throw shape_error("negative tensor extent " + s.str());
    return s;
  }

  Shape shape_{};
  std::vector<T> data_;
};

// Copy a spatial box (all channels) out of a tensor.
template <class T>
Tensor<T> crop(const Tensor<T>& t, const Box& b) {
  const auto e = b.extents();
  Tensor<T> out(Shape{t.shape().c, e[0], e[1], e[2]});
  for (int c = 0; c < t.shape().c; ++c)
    for (int z = 0; z < e[0]; ++z)
      for (int y = 0; y < e[1]; ++y) {
        const T* src = &t(c, z + b.lo[0], y + b.lo[1], b.lo[2]);
        std::copy(src, src + e[2], &out(c, z, y, 0));
      }
  return out;
}

// Write `src` into `dst` with its origin at `origin`.
template <class T>
void paste(Tensor<T>& dst, const Tensor<T>& src, const Index3& origin) {
  const Shape& s = src.shape();
  for (int c = 0; c < s.c; ++c)
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y) {
        const T* row = &src(c, z, y, 0);
        std::copy(row, row + s.x, &dst(c, z + origin[0], y + origin[1], origin[2]));
      }
}

// Bounding box of the nonzero voxels of one channel (all channels when c < 0).
template <class T>
Box nonzero_box(const Tensor<T>& t, int channel = -1) {
  const Shape& s = t.shape();
  Box b{{s.z, s.y, s.x}, {0, 0, 0}};
  const int c0 = channel < 0 ? 0 : channel;
  const int c1 = channel < 0 ? s.c : channel + 1;
  for (int c = c0; c < c1; ++c)
    for (int z = 0; z < s.z; ++z)
      for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x)
          if (t(c, z, y, x) != T(0)) {
            b.lo = {std::min(b.lo[0], z), std::min(b.lo[1], y), std::min(b.lo[2], x)};
            b.hi = {std::max(b.hi[0], z + 1), std::max(b.hi[1], y + 1),
                    std::max(b.hi[2], x + 1)};
          }
  if (b.empty()) return Box{};
  return b;
}

}  // namespace instxai
