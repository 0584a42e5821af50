#pragma once

// Box-restricted forward and backward kernels for the graph layer set.
//
// Every routine touches only the requested spatial box of its destination.
// Inputs outside their own computed boxes are never read because the box
// propagation in autodiff.hpp guarantees containment.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "instxai/graph.hpp"
#include "instxai/tensor.hpp"

namespace instxai::kernels {

template <class T>
inline void axpy(T* __restrict y, const T* __restrict x, T a, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Input region needed to produce `out` of node `n` (before clipping).
inline Box input_region(const Node& n, const Box& out) {
  if (out.empty()) return out;
  switch (n.kind) {
    case OpKind::conv3d:
      return dilate(out, Index3{n.kernel[0] / 2, n.kernel[1] / 2, n.kernel[2] / 2});
    case OpKind::max_pool: {
      Box b;
      for (int a = 0; a < 3; ++a) {
        b.lo[a] = out.lo[a] * n.stride[a];
        b.hi[a] = out.hi[a] * n.stride[a];
      }
      return b;
    }
    case OpKind::conv_transpose3d: {
      Box b;
      for (int a = 0; a < 3; ++a) {
        b.lo[a] = out.lo[a] / n.stride[a];
        b.hi[a] = (out.hi[a] + n.stride[a] - 1) / n.stride[a];
      }
      return b;
    }
    default:
      return out;
  }
}

// ---------------------------------------------------------------- conv3d

template <class T>
void conv3d_forward(const Tensor<T>& in, const Parameter<T>& w, const Parameter<T>& b,
                    const Index3& k, Tensor<T>& out, const Box& box) {
  if (box.empty()) return;
  const Shape& is = in.shape();
  const Shape& os = out.shape();
  const int pz = k[0] / 2, py = k[1] / 2, px = k[2] / 2;
  const int ksz = k[0] * k[1] * k[2];
  for (int co = 0; co < os.c; ++co) {
    const T* wco = w.values.data() + std::size_t(co) * is.c * ksz;
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
      for (int y = box.lo[1]; y < box.hi[1]; ++y) {
        T* row = &out(co, z, y, 0);
        std::fill(row + box.lo[2], row + box.hi[2], b.values[std::size_t(co)]);
        for (int ci = 0; ci < is.c; ++ci) {
          const T* wci = wco + std::size_t(ci) * ksz;
          for (int dz = 0; dz < k[0]; ++dz) {
            const int zi = z + dz - pz;
            if (zi < 0 || zi >= is.z) continue;
            for (int dy = 0; dy < k[1]; ++dy) {
              const int yi = y + dy - py;
              if (yi < 0 || yi >= is.y) continue;
              const T* irow = &in(ci, zi, yi, 0);
              const T* wrow = wci + (dz * k[1] + dy) * k[2];
              for (int dx = 0; dx < k[2]; ++dx) {
                const int shift = dx - px;
                const int x0 = std::max(box.lo[2], -shift);
                const int x1 = std::min(box.hi[2], is.x - shift);
                if (x1 > x0) axpy(row + x0, irow + x0 + shift, wrow[dx], x1 - x0);
              }
            }
          }
        }
      }
  }
}

// gin[box_in] += conv3d^T(gout[box_out]); returns the touched input box.
template <class T>
Box conv3d_backward_input(const Tensor<T>& gout, const Box& box_out,
                          const Parameter<T>& w, const Index3& k, Tensor<T>& gin) {
  const Shape& is = gin.shape();
  const Shape& os = gout.shape();
  const Box box_in = intersect(dilate(box_out, Index3{k[0] / 2, k[1] / 2, k[2] / 2}),
                               Box::of(is));
  if (box_in.empty() || box_out.empty()) return Box{};
  const int pz = k[0] / 2, py = k[1] / 2, px = k[2] / 2;
  const int ksz = k[0] * k[1] * k[2];
  for (int ci = 0; ci < is.c; ++ci)
    for (int zi = box_in.lo[0]; zi < box_in.hi[0]; ++zi)
      for (int yi = box_in.lo[1]; yi < box_in.hi[1]; ++yi) {
        T* row = &gin(ci, zi, yi, 0);
        for (int co = 0; co < os.c; ++co) {
          const T* wci = w.values.data() + (std::size_t(co) * is.c + ci) * ksz;
          for (int dz = 0; dz < k[0]; ++dz) {
            const int zo = zi - dz + pz;
            if (zo < box_out.lo[0] || zo >= box_out.hi[0]) continue;
            for (int dy = 0; dy < k[1]; ++dy) {
              const int yo = yi - dy + py;
              if (yo < box_out.lo[1] || yo >= box_out.hi[1]) continue;
              const T* grow = &gout(co, zo, yo, 0);
              const T* wrow = wci + (dz * k[1] + dy) * k[2];
              for (int dx = 0; dx < k[2]; ++dx) {
                // xo = xi - dx + px
                const int shift = px - dx;
                const int x0 = std::max(box_in.lo[2], box_out.lo[2] - shift);
                const int x1 = std::min(box_in.hi[2], box_out.hi[2] - shift);
                if (x1 > x0) axpy(row + x0, grow + x0 + shift, wrow[dx], x1 - x0);
              }
            }
          }
        }
      }
  return box_in;
}

template <class T>
void conv3d_backward_params(const Tensor<T>& in, const Tensor<T>& gout,
                            const Box& box_out, const Index3& k, std::vector<T>& gw,
                            std::vector<T>& gb) {
  if (box_out.empty()) return;
  const Shape& is = in.shape();
  const Shape& os = gout.shape();
  const int pz = k[0] / 2, py = k[1] / 2, px = k[2] / 2;
  const int ksz = k[0] * k[1] * k[2];
  for (int co = 0; co < os.c; ++co) {
    T bsum = 0;
    for (int z = box_out.lo[0]; z < box_out.hi[0]; ++z)
      for (int y = box_out.lo[1]; y < box_out.hi[1]; ++y) {
        const T* grow = &gout(co, z, y, 0);
        for (int x = box_out.lo[2]; x < box_out.hi[2]; ++x) bsum += grow[x];
        for (int ci = 0; ci < is.c; ++ci) {
          T* gwci = gw.data() + (std::size_t(co) * is.c + ci) * ksz;
          for (int dz = 0; dz < k[0]; ++dz) {
            const int zi = z + dz - pz;
            if (zi < 0 || zi >= is.z) continue;
            for (int dy = 0; dy < k[1]; ++dy) {
              const int yi = y + dy - py;
              if (yi < 0 || yi >= is.y) continue;
              const T* irow = &in(ci, zi, yi, 0);
              T* gwrow = gwci + (dz * k[1] + dy) * k[2];
              for (int dx = 0; dx < k[2]; ++dx) {
                const int shift = dx - px;
                const int x0 = std::max(box_out.lo[2], -shift);
                const int x1 = std::min(box_out.hi[2], is.x - shift);
                if (x1 > x0) gwrow[dx] += dot(grow + x0, irow + x0 + shift, x1 - x0);
              }
            }
          }
        }
      }
    gb[std::size_t(co)] += bsum;
  }
}

// ------------------------------------------------------ conv_transpose3d
// Weights [Cin, Cout, sz, sy, sx]; out[co, q*s + a] = b[co] + sum_ci in[ci, q] w[ci, co, a].

template <class T>
void conv_transpose3d_forward(const Tensor<T>& in, const Parameter<T>& w,
                              const Parameter<T>& b, const Index3& s, Tensor<T>& out,
                              const Box& box) {
  if (box.empty()) return;
  const int cin = in.shape().c;
  const int cout = out.shape().c;
  const int ksz = s[0] * s[1] * s[2];
  for (int co = 0; co < cout; ++co)
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
      for (int y = box.lo[1]; y < box.hi[1]; ++y)
        for (int x = box.lo[2]; x < box.hi[2]; ++x) {
          const int qz = z / s[0], qy = y / s[1], qx = x / s[2];
          const int a = ((z % s[0]) * s[1] + (y % s[1])) * s[2] + (x % s[2]);
          T acc = b.values[std::size_t(co)];
          for (int ci = 0; ci < cin; ++ci)
            acc += in(ci, qz, qy, qx) * w.values[(std::size_t(ci) * cout + co) * ksz + a];
          out(co, z, y, x) = acc;
        }
}

template <class T>
Box conv_transpose3d_backward_input(const Tensor<T>& gout, const Box& box_out,
                                    const Parameter<T>& w, const Index3& s,
                                    Tensor<T>& gin) {
  if (box_out.empty()) return Box{};
  const int cin = gin.shape().c;
  const int cout = gout.shape().c;
  const int ksz = s[0] * s[1] * s[2];
  for (int co = 0; co < cout; ++co)
    for (int z = box_out.lo[0]; z < box_out.hi[0]; ++z)
      for (int y = box_out.lo[1]; y < box_out.hi[1]; ++y)
        for (int x = box_out.lo[2]; x < box_out.hi[2]; ++x) {
          const T g = gout(co, z, y, x);
          if (g == T(0)) continue;
          const int qz = z / s[0], qy = y / s[1], qx = x / s[2];
          const int a = ((z % s[0]) * s[1] + (y % s[1])) * s[2] + (x % s[2]);
          for (int ci = 0; ci < cin; ++ci)
            gin(ci, qz, qy, qx) += g * w.values[(std::size_t(ci) * cout + co) * ksz + a];
        }
  Box box_in;
  for (int a = 0; a < 3; ++a) {
    box_in.lo[a] = box_out.lo[a] / s[a];
    box_in.hi[a] = (box_out.hi[a] + s[a] - 1) / s[a];
  }
  return box_in;
}

template <class T>
void conv_transpose3d_backward_params(const Tensor<T>& in, const Tensor<T>& gout,
                                      const Box& box_out, const Index3& s,
                                      std::vector<T>& gw, std::vector<T>& gb) {
  if (box_out.empty()) return;
  const int cin = in.shape().c;
  const int cout = gout.shape().c;
  const int ksz = s[0] * s[1] * s[2];
  for (int co = 0; co < cout; ++co)
    for (int z = box_out.lo[0]; z < box_out.hi[0]; ++z)
      for (int y = box_out.lo[1]; y < box_out.hi[1]; ++y)
        for (int x = box_out.lo[2]; x < box_out.hi[2]; ++x) {
          const T g = gout(co, z, y, x);
          gb[std::size_t(co)] += g;
          const int qz = z / s[0], qy = y / s[1], qx = x / s[2];
          const int a = ((z % s[0]) * s[1] + (y % s[1])) * s[2] + (x % s[2]);
          for (int ci = 0; ci < cin; ++ci)
            gw[(std::size_t(ci) * cout + co) * ksz + a] += g * in(ci, qz, qy, qx);
        }
}

// ---------------------------------------------------------------- max_pool
// Ties resolve to the first voxel of the window in z, y, x scan order.

template <class T>
void max_pool_forward(const Tensor<T>& in, const Index3& s, Tensor<T>& out,
                      std::vector<std::uint32_t>& argmax, const Box& box) {
  if (box.empty()) return;
  const Shape& os = out.shape();
  if (argmax.size() != out.size()) argmax.assign(out.size(), 0);
  for (int c = 0; c < os.c; ++c)
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
      for (int y = box.lo[1]; y < box.hi[1]; ++y)
        for (int x = box.lo[2]; x < box.hi[2]; ++x) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t arg = 0;
          bool first = true;
          for (int a = 0; a < s[0]; ++a)
            for (int b = 0; b < s[1]; ++b)
              for (int d = 0; d < s[2]; ++d) {
                const std::size_t off =
                    in.offset(c, z * s[0] + a, y * s[1] + b, x * s[2] + d);
                const T v = in.data()[off];
                if (first || v > best) {
                  best = v;
                  arg = off;
                  first = false;
                }
              }
          const std::size_t o = out.offset(c, z, y, x);
          out.data()[o] = best;
          argmax[o] = std::uint32_t(arg);
        }
}

template <class T>
Box max_pool_backward(const Tensor<T>& gout, const Box& box_out,
                      const std::vector<std::uint32_t>& argmax, const Index3& s,
                      Tensor<T>& gin) {
  if (box_out.empty()) return Box{};
  for (int c = 0; c < gout.shape().c; ++c)
    for (int z = box_out.lo[0]; z < box_out.hi[0]; ++z)
      for (int y = box_out.lo[1]; y < box_out.hi[1]; ++y)
        for (int x = box_out.lo[2]; x < box_out.hi[2]; ++x) {
          const std::size_t o = gout.offset(c, z, y, x);
          gin.data()[argmax[o]] += gout.data()[o];
        }
  Box box_in;
  for (int a = 0; a < 3; ++a) {
    box_in.lo[a] = box_out.lo[a] * s[a];
    box_in.hi[a] = box_out.hi[a] * s[a];
  }
  return box_in;
}

// ----------------------------------------------------------- pointwise ops

template <class F>
inline void for_rows(const Shape& s, const Box& box, F&& f) {
  for (int c = 0; c < s.c; ++c)
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
      for (int y = box.lo[1]; y < box.hi[1]; ++y) {
        const std::size_t off = ((std::size_t(c) * s.z + z) * s.y + y) * s.x + box.lo[2];
        f(c, off, box.extent(2));
      }
}

template <class T>
void relu_forward(const Tensor<T>& in, Tensor<T>& out, const Box& box) {
  if (box.empty()) return;
  for_rows(in.shape(), box, [&](int, std::size_t off, int n) {
    const T* a = in.data() + off;
    T* o = out.data() + off;
    for (int i = 0; i < n; ++i) o[i] = a[i] > T(0) ? a[i] : T(0);
  });
}

// relu'(0) is taken as 0.
template <class T>
void relu_backward(const Tensor<T>& in, const Tensor<T>& gout, const Box& box,
                   Tensor<T>& gin) {
  if (box.empty()) return;
  for_rows(in.shape(), box, [&](int, std::size_t off, int n) {
    const T* a = in.data() + off;
    const T* g = gout.data() + off;
    T* o = gin.data() + off;
    for (int i = 0; i < n; ++i)
      if (a[i] > T(0)) o[i] += g[i];
  });
}

template <class T>
void accumulate(const Tensor<T>& src, const Box& box, Tensor<T>& dst) {
  if (box.empty()) return;
  for_rows(src.shape(), box, [&](int, std::size_t off, int n) {
    const T* a = src.data() + off;
    T* o = dst.data() + off;
    for (int i = 0; i < n; ++i) o[i] += a[i];
  });
}

// Copies channels [c0, c0 + dst.c) of `src` (or the reverse) over a box.
template <class T>
void copy_channels(const Tensor<T>& src, int src_c0, Tensor<T>& dst, int dst_c0,
                   int channels, const Box& box, bool add) {
  if (box.empty()) return;
  for (int c = 0; c < channels; ++c)
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
      for (int y = box.lo[1]; y < box.hi[1]; ++y) {
        const T* a = &src(src_c0 + c, z, y, box.lo[2]);
        T* o = &dst(dst_c0 + c, z, y, box.lo[2]);
        const int n = box.extent(2);
        if (add)
          for (int i = 0; i < n; ++i) o[i] += a[i];
        else
          std::copy(a, a + n, o);
      }
}

template <class T>
void add_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, const Box& box) {
  if (box.empty()) return;
  for_rows(a.shape(), box, [&](int, std::size_t off, int n) {
    for (int i = 0; i < n; ++i) out.data()[off + i] = a.data()[off + i] + b.data()[off + i];
  });
}

// Softmax across channels, per voxel.
template <class T>
void softmax_forward(const Tensor<T>& in, Tensor<T>& out, const Box& box) {
  if (box.empty()) return;
  const int C = in.shape().c;
  for (int z = box.lo[0]; z < box.hi[0]; ++z)
    for (int y = box.lo[1]; y < box.hi[1]; ++y)
      for (int x = box.lo[2]; x < box.hi[2]; ++x) {
        T m = in(0, z, y, x);
        for (int c = 1; c < C; ++c) m = std::max(m, in(c, z, y, x));
        T sum = 0;
        for (int c = 0; c < C; ++c) {
          const T e = std::exp(in(c, z, y, x) - m);
          out(c, z, y, x) = e;
          sum += e;
        }
        for (int c = 0; c < C; ++c) out(c, z, y, x) /= sum;
      }
}

template <class T>
void softmax_backward(const Tensor<T>& out, const Tensor<T>& gout, const Box& box,
                      Tensor<T>& gin) {
  if (box.empty()) return;
  const int C = out.shape().c;
  for (int z = box.lo[0]; z < box.hi[0]; ++z)
    for (int y = box.lo[1]; y < box.hi[1]; ++y)
      for (int x = box.lo[2]; x < box.hi[2]; ++x) {
        T s = 0;
        for (int c = 0; c < C; ++c) s += gout(c, z, y, x) * out(c, z, y, x);
        for (int c = 0; c < C; ++c)
          gin(c, z, y, x) += out(c, z, y, x) * (gout(c, z, y, x) - s);
      }
}

}  // namespace instxai::kernels
