#pragma once

// Forward evaluation and reverse-mode differentiation over a Graph.
//
// Forward passes may be restricted to the output box a caller actually needs;
// the required region of every upstream node is derived from the layer
// geometry, so values inside the requested output box are exact. Backward
// passes track, per node, the box where the gradient can be nonzero and only
// touch that box. A single-voxel seed therefore costs roughly its receptive
// field cone instead of a full pass.

#include <cmath>
#include <random>
#include <vector>

#include "instxai/graph.hpp"
#include "instxai/kernels.hpp"
#include "instxai/tensor.hpp"

namespace instxai {

template <class T>
struct Tape {
  const Graph<T>* graph = nullptr;
  std::vector<Tensor<T>> values;
  std::vector<Box> computed;  // region of each node holding valid values
  std::vector<std::vector<std::uint32_t>> argmax;

  bool empty() const { return values.empty(); }
  const Tensor<T>& value(int id) const { return values.at(std::size_t(id)); }
  const Tensor<T>& output() const { return value(graph->output()); }
  const Box& output_box() const { return computed.at(std::size_t(graph->output())); }
};

struct ForwardOptions {
  Box output_box{};  // empty = whole output
};

// The graph must outlive the returned tape.
template <class T>
Tape<T> forward(const Graph<T>& g, const std::vector<Tensor<T>>& inputs,
                const ForwardOptions& opts = {}) {
  if (inputs.size() != g.inputs().size())
    throw shape_error("forward: expected " + std::to_string(g.inputs().size()) +
                      " input tensors, got " + std::to_string(inputs.size()));
  const Shape& s0 = inputs.front().shape();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape& s = inputs[i].shape();
    const int id = g.inputs()[i];
    if (s.c != g.channels_of(id) || s.spatial() != s0.spatial())
      throw shape_error("forward: input " + std::to_string(i) + " has shape " +
                        s.str() + ", graph expects " +
                        std::to_string(g.channels_of(id)) + " channels");
  }
  const auto shapes = g.infer_shapes(s0.spatial());
  const std::size_t n = g.size();

  std::vector<Box> need(n);
  const int out = g.output();
  const Box full_out = Box::of(shapes[std::size_t(out)]);
  need[std::size_t(out)] =
      opts.output_box.empty() ? full_out : intersect(opts.output_box, full_out);
  for (std::size_t i = n; i-- > 0;) {
    if (need[i].empty()) continue;
    const Node& nd = g.node(int(i));
    const Box r = kernels::input_region(nd, need[i]);
    for (int in : nd.inputs) {
      const std::size_t j = std::size_t(in);
      need[j] = hull(need[j], intersect(r, Box::of(shapes[j])));
    }
  }

  Tape<T> tape;
  tape.graph = &g;
  tape.values.resize(n);
  tape.computed = need;
  tape.argmax.resize(n);
  std::size_t next_input = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Node& nd = g.node(int(i));
    Tensor<T>& v = tape.values[i];
    if (nd.kind == OpKind::input) {
      v = inputs[next_input++];
      tape.computed[i] = Box::of(shapes[i]);
      continue;
    }
    v = Tensor<T>(shapes[i]);
    const Box& box = need[i];
    if (box.empty()) continue;
    const auto in = [&](int k) -> const Tensor<T>& {
      return tape.values[std::size_t(nd.inputs[std::size_t(k)])];
    };
    switch (nd.kind) {
      case OpKind::conv3d:
        kernels::conv3d_forward(in(0), g.parameters()[std::size_t(nd.weight)],
                                g.parameters()[std::size_t(nd.bias)], nd.kernel, v, box);
        break;
      case OpKind::conv_transpose3d:
        kernels::conv_transpose3d_forward(in(0), g.parameters()[std::size_t(nd.weight)],
                                          g.parameters()[std::size_t(nd.bias)],
                                          nd.stride, v, box);
        break;
      case OpKind::relu:
        kernels::relu_forward(in(0), v, box);
        break;
      case OpKind::max_pool:
        kernels::max_pool_forward(in(0), nd.stride, v, tape.argmax[i], box);
        break;
      case OpKind::concat: {
        int c0 = 0;
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
          const Tensor<T>& src = in(int(k));
          kernels::copy_channels(src, 0, v, c0, src.shape().c, box, false);
          c0 += src.shape().c;
        }
        break;
      }
      case OpKind::add:
        kernels::add_forward(in(0), in(1), v, box);
        break;
      case OpKind::softmax:
        kernels::softmax_forward(in(0), v, box);
        break;
      case OpKind::input:
        break;
    }
    if (!v.all_finite())
      throw numeric_error("forward: non-finite value at node " + std::to_string(i) +
                          " (" + to_string(nd.kind) + ")");
  }
  return tape;
}

template <class T>
Tape<T> forward(const Graph<T>& g, const Tensor<T>& input, const ForwardOptions& opts = {}) {
  return forward(g, std::vector<Tensor<T>>{input}, opts);
}

struct BackwardOptions {
  bool parameter_gradients = false;
};

// Node gradients are reset on every backward call that reuses this object;
// parameter gradients accumulate until zero_parameters().
template <class T>
struct Gradients {
  std::vector<Tensor<T>> node;
  std::vector<Box> support;
  std::vector<std::vector<T>> param;

  const Tensor<T>& wrt(int id) const { return node.at(std::size_t(id)); }

  void zero_parameters() {
    for (auto& p : param) std::fill(p.begin(), p.end(), T(0));
  }
};

template <class T>
void backward(const Tape<T>& tape, const Tensor<T>& seed, Gradients<T>& grads,
              const BackwardOptions& opts = {}) {
  if (tape.empty() || tape.graph == nullptr)
    throw error("backward called before forward");
  const Graph<T>& g = *tape.graph;
  const std::size_t n = g.size();
  const int out = g.output();
  if (seed.shape() != tape.output().shape())
    throw shape_error("backward: seed shape " + seed.shape().str() +
                      " differs from output " + tape.output().shape().str());

  bool fresh = grads.node.size() != n;
  for (std::size_t i = 0; !fresh && i < n; ++i)
    fresh = grads.node[i].shape() != tape.values[i].shape();
  if (fresh) {
    grads.node.clear();
    for (std::size_t i = 0; i < n; ++i) grads.node.emplace_back(tape.values[i].shape());
    grads.support.assign(n, Box{});
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      grads.node[i].zero_box(grads.support[i]);
      grads.support[i] = Box{};
    }
  }
  if (opts.parameter_gradients && grads.param.size() != g.parameters().size()) {
    grads.param.clear();
    for (const auto& p : g.parameters()) grads.param.emplace_back(p.size(), T(0));
  }

  const Box seed_box = nonzero_box(seed);
  if (!tape.output_box().contains(seed_box))
    throw error("backward: seed reaches outside the computed output region");
  {
    Tensor<T>& go = grads.node[std::size_t(out)];
    kernels::copy_channels(seed, 0, go, 0, seed.shape().c, seed_box, false);
    grads.support[std::size_t(out)] = seed_box;
  }

  for (std::size_t i = n; i-- > 0;) {
    const Box box = grads.support[i];
    if (box.empty()) continue;
    const Node& nd = g.node(int(i));
    const Tensor<T>& gi = grads.node[i];
    const auto touch = [&](int id, const Box& b) {
      grads.support[std::size_t(id)] = hull(grads.support[std::size_t(id)], b);
    };
    switch (nd.kind) {
      case OpKind::input:
        break;
      case OpKind::conv3d: {
        const int src = nd.inputs[0];
        const Box b = kernels::conv3d_backward_input(
            gi, box, g.parameters()[std::size_t(nd.weight)], nd.kernel,
            grads.node[std::size_t(src)]);
        touch(src, b);
        if (opts.parameter_gradients)
          kernels::conv3d_backward_params(tape.value(src), gi, box, nd.kernel,
                                          grads.param[std::size_t(nd.weight)],
                                          grads.param[std::size_t(nd.bias)]);
        break;
      }
      case OpKind::conv_transpose3d: {
        const int src = nd.inputs[0];
        const Box b = kernels::conv_transpose3d_backward_input(
            gi, box, g.parameters()[std::size_t(nd.weight)], nd.stride,
            grads.node[std::size_t(src)]);
        touch(src, b);
        if (opts.parameter_gradients)
          kernels::conv_transpose3d_backward_params(
              tape.value(src), gi, box, nd.stride, grads.param[std::size_t(nd.weight)],
              grads.param[std::size_t(nd.bias)]);
        break;
      }
      case OpKind::relu: {
        const int src = nd.inputs[0];
        kernels::relu_backward(tape.value(src), gi, box, grads.node[std::size_t(src)]);
        touch(src, box);
        break;
      }
      case OpKind::max_pool: {
        const int src = nd.inputs[0];
        const Box b = kernels::max_pool_backward(gi, box, tape.argmax[i], nd.stride,
                                                 grads.node[std::size_t(src)]);
        touch(src, b);
        break;
      }
      case OpKind::concat: {
        int c0 = 0;
        for (int src : nd.inputs) {
          const int ch = g.channels_of(src);
          kernels::copy_channels(gi, c0, grads.node[std::size_t(src)], 0, ch, box, true);
          touch(src, box);
          c0 += ch;
        }
        break;
      }
      case OpKind::add:
        for (int src : nd.inputs) {
          kernels::accumulate(gi, box, grads.node[std::size_t(src)]);
          touch(src, box);
        }
        break;
      case OpKind::softmax: {
        const int src = nd.inputs[0];
        kernels::softmax_backward(tape.values[i], gi, box, grads.node[std::size_t(src)]);
        touch(src, box);
        break;
      }
    }
  }

  for (int id : g.inputs()) {
    const Tensor<T>& gin = grads.node[std::size_t(id)];
    const Box& b = grads.support[std::size_t(id)];
    bool ok = true;
    kernels::for_rows(gin.shape(), b, [&](int, std::size_t off, int len) {
      for (int k = 0; k < len; ++k) ok = ok && std::isfinite(gin.data()[off + k]);
    });
    if (!ok) throw numeric_error("backward: non-finite input gradient");
  }
}

template <class T>
Gradients<T> backward(const Tape<T>& tape, const Tensor<T>& seed,
                      const BackwardOptions& opts = {}) {
  Gradients<T> g;
  backward(tape, seed, g, opts);
  return g;
}

// ----------------------------------------------------- finite differences

struct FdProbe {
  int out_channel = 0;
  Index3 out_voxel{};
  int input = 0;  // index into graph.inputs()
  int in_channel = 0;
  Index3 in_voxel{};
};

struct FdReport {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // probes whose perturbation crossed a relu/max-pool kink
};

namespace detail {

// Relu activity pattern and pooling winners of a tape.
inline std::vector<std::uint64_t> kink_signature(const Tape<double>& t) {
  std::vector<std::uint64_t> sig;
  const Graph<double>& g = *t.graph;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& nd = g.node(int(i));
    if (nd.kind == OpKind::relu) {
      const auto& v = t.values[std::size_t(nd.inputs[0])].values();
      for (double x : v) sig.push_back(x > 0.0 ? 1u : 0u);
    } else if (nd.kind == OpKind::max_pool) {
      for (auto a : t.argmax[i]) sig.push_back(a);
    }
  }
  return sig;
}

}  // namespace detail

inline FdReport finite_difference_check(const Graph<double>& g,
                                        const std::vector<Tensor<double>>& inputs,
                                        double epsilon, const std::vector<FdProbe>& probes) {
  FdReport rep;
  const Tape<double> base = forward(g, inputs);
  const auto base_sig = detail::kink_signature(base);
  Gradients<double> grads;
  for (const FdProbe& p : probes) {
    Tensor<double> seed(base.output().shape());
    seed.at(p.out_channel, p.out_voxel) = 1.0;
    backward(base, seed, grads);
    const int in_id = g.inputs().at(std::size_t(p.input));
    const double ad = grads.wrt(in_id).at(p.in_channel, p.in_voxel);

    auto shifted = inputs;
    shifted[std::size_t(p.input)].at(p.in_channel, p.in_voxel) += epsilon;
    const Tape<double> plus = forward(g, shifted);
    shifted[std::size_t(p.input)].at(p.in_channel, p.in_voxel) -= 2 * epsilon;
    const Tape<double> minus = forward(g, shifted);
    if (detail::kink_signature(plus) != base_sig ||
        detail::kink_signature(minus) != base_sig) {
      ++rep.skipped;
      continue;
    }
    const double fd = (plus.output().at(p.out_channel, p.out_voxel) -
                       minus.output().at(p.out_channel, p.out_voxel)) /
                      (2 * epsilon);
    const double err = std::abs(ad - fd) / std::max(std::abs(fd), 1e-8);
    rep.max_rel_error = std::max(rep.max_rel_error, err);
    ++rep.checked;
  }
  return rep;
}

// Uniformly random (output, input) voxel pairs for the graph's input shapes.
template <class T, class Rng>
std::vector<FdProbe> sample_probes(const Graph<T>& g, const Index3& spatial, int count,
                                   Rng& rng) {
  const auto shapes = g.infer_shapes(spatial);
  const int out_c = shapes[std::size_t(g.output())].c;
  std::vector<FdProbe> probes;
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
  for (int i = 0; i < count; ++i) {
    FdProbe p;
    p.out_channel = pick(out_c);
    p.out_voxel = {pick(spatial[0]), pick(spatial[1]), pick(spatial[2])};
    p.input = pick(int(g.inputs().size()));
    p.in_channel = pick(g.channels_of(g.inputs()[std::size_t(p.input)]));
    p.in_voxel = {pick(spatial[0]), pick(spatial[1]), pick(spatial[2])};
    probes.push_back(p);
  }
  return probes;
}

}  // namespace instxai
