#pragma once

// Static computation graph over channel-first volumes.
//
// Nodes are appended in topological order; each node may only consume nodes
// that already exist, so the node list is its own topological sort. Parameter
// tensors are owned by the graph and referenced by index from conv nodes.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "instxai/tensor.hpp"

namespace instxai {

enum class OpKind {
  input,
  conv3d,
  conv_transpose3d,
  relu,
  max_pool,
  concat,
  add,
  softmax,
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::input: return "input";
    case OpKind::conv3d: return "conv3d";
    case OpKind::conv_transpose3d: return "conv_transpose3d";
    case OpKind::relu: return "relu";
    case OpKind::max_pool: return "max_pool";
    case OpKind::concat: return "concat";
    case OpKind::add: return "add";
    case OpKind::softmax: return "softmax";
  }
  return "?";
}

struct Node {
  OpKind kind = OpKind::input;
  std::vector<int> inputs;
  // conv3d: odd kernel extents, stride 1, zero "same" padding of kernel/2.
  // conv_transpose3d / max_pool: kernel == stride (non-overlapping windows).
  Index3 kernel{1, 1, 1};
  Index3 stride{1, 1, 1};
  int channels = 0;  // output channels for conv nodes, declared channels for inputs
  int weight = -1;   // parameter index
  int bias = -1;
  std::string name;
};

// A learnable tensor of arbitrary rank, stored flat in C order.
template <class T>
struct Parameter {
  std::vector<int> dims;
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
};

template <class T>
class Graph {
 public:
  using scalar_type = T;

  int add_input(int channels, std::string name = "input") {
    if (channels <= 0) throw error("input node needs at least one channel");
    Node n;
    n.kind = OpKind::input;
    n.channels = channels;
    n.name = std::move(name);
    inputs_.push_back(int(nodes_.size()));
    return push(std::move(n));
  }

  int add_conv3d(int in, int out_channels, Index3 kernel, std::string name = {}) {
    check_ref(in);
    for (int k : kernel)
      if (k <= 0 || k % 2 == 0) throw error("conv3d kernel extents must be odd");
    if (out_channels <= 0) throw error("conv3d needs positive output channels");
    Node n;
    n.kind = OpKind::conv3d;
    n.inputs = {in};
    n.kernel = kernel;
    n.channels = out_channels;
    n.name = std::move(name);
    const int cin = channels_of(in);
    n.weight = add_param({out_channels, cin, kernel[0], kernel[1], kernel[2]});
    n.bias = add_param({out_channels});
    return push(std::move(n));
  }

  int add_conv_transpose3d(int in, int out_channels, Index3 stride,
                           std::string name = {}) {
    check_ref(in);
    for (int s : stride)
      if (s <= 0) throw error("conv_transpose3d stride must be positive");
    Node n;
    n.kind = OpKind::conv_transpose3d;
    n.inputs = {in};
    n.kernel = stride;
    n.stride = stride;
    n.channels = out_channels;
    n.name = std::move(name);
    const int cin = channels_of(in);
    n.weight = add_param({cin, out_channels, stride[0], stride[1], stride[2]});
    n.bias = add_param({out_channels});
    return push(std::move(n));
  }

  int add_relu(int in, std::string name = {}) {
    return add_unary(OpKind::relu, in, std::move(name));
  }

  int add_softmax(int in, std::string name = {}) {
    return add_unary(OpKind::softmax, in, std::move(name));
  }

  int add_max_pool(int in, Index3 window = {2, 2, 2}, std::string name = {}) {
    check_ref(in);
    for (int s : window)
      if (s <= 0) throw error("max_pool window must be positive");
    Node n;
    n.kind = OpKind::max_pool;
    n.inputs = {in};
    n.kernel = window;
    n.stride = window;
    n.channels = channels_of(in);
    n.name = std::move(name);
    return push(std::move(n));
  }

  int add_concat(std::vector<int> ins, std::string name = {}) {
    if (ins.empty()) throw error("concat needs inputs");
    int ch = 0;
    for (int i : ins) {
      check_ref(i);
      ch += channels_of(i);
    }
    Node n;
    n.kind = OpKind::concat;
    n.inputs = std::move(ins);
    n.channels = ch;
    n.name = std::move(name);
    return push(std::move(n));
  }

  int add_add(int a, int b, std::string name = {}) {
    check_ref(a);
    check_ref(b);
    if (channels_of(a) != channels_of(b)) throw error("add: channel mismatch");
    Node n;
    n.kind = OpKind::add;
    n.inputs = {a, b};
    n.channels = channels_of(a);
    n.name = std::move(name);
    return push(std::move(n));
  }

  void set_output(int id) {
    check_ref(id);
    output_ = id;
  }

  int output() const {
    if (output_ < 0) throw error("graph has no designated output node");
    return output_;
  }
  const std::vector<int>& inputs() const { return inputs_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int id) const { return nodes_.at(std::size_t(id)); }
  std::size_t size() const { return nodes_.size(); }

  int channels_of(int id) const { return nodes_.at(std::size_t(id)).channels; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) return int(i);
    return -1;
  }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Shapes of every node for the given spatial extents of the (shared) input.
  std::vector<Shape> infer_shapes(const Index3& spatial) const {
    std::vector<Shape> shapes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      switch (n.kind) {
        case OpKind::input:
          shapes[i] = Shape{n.channels, spatial[0], spatial[1], spatial[2]};
          break;
        case OpKind::conv3d:
        case OpKind::relu:
        case OpKind::softmax: {
          Shape s = shapes[std::size_t(n.inputs[0])];
          s.c = n.channels;
          shapes[i] = s;
          break;
        }
        case OpKind::conv_transpose3d: {
          const Shape& s = shapes[std::size_t(n.inputs[0])];
          shapes[i] = Shape{n.channels, s.z * n.stride[0], s.y * n.stride[1],
                            s.x * n.stride[2]};
          break;
        }
        case OpKind::max_pool: {
          const Shape& s = shapes[std::size_t(n.inputs[0])];
          if (s.z % n.stride[0] || s.y % n.stride[1] || s.x % n.stride[2])
            throw shape_error("max_pool input " + s.str() +
                              " not divisible by window at node " + std::to_string(i));
          shapes[i] = Shape{n.channels, s.z / n.stride[0], s.y / n.stride[1],
                            s.x / n.stride[2]};
          break;
        }
        case OpKind::concat:
        case OpKind::add: {
          Shape s = shapes[std::size_t(n.inputs[0])];
          for (int in : n.inputs) {
            const Shape& o = shapes[std::size_t(in)];
            if (o.spatial() != s.spatial())
              throw shape_error("spatial mismatch at node " + std::to_string(i) +
                                ": " + s.str() + " vs " + o.str());
          }
          s.c = n.channels;
          shapes[i] = s;
          break;
        }
      }
    }
    return shapes;
  }

  // Checks the segmentation contract for inputs of the given extents.
  void validate(const Index3& spatial) const {
    const auto shapes = infer_shapes(spatial);
    const Shape& out = shapes[std::size_t(output())];
    if (out.spatial() != spatial)
      throw shape_error("output spatial extents " + out.str() +
                        " differ from input extents");
  }

  // Product of pooling factors along the deepest path; window origins and
  // extents must be multiples of this for pooling grids to line up.
  Index3 alignment() const {
    std::vector<Index3> f(nodes_.size(), Index3{1, 1, 1});
    Index3 best{1, 1, 1};
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.kind == OpKind::input) continue;
      Index3 acc{1, 1, 1};
      for (int in : n.inputs)
        for (int a = 0; a < 3; ++a) acc[a] = std::max(acc[a], f[std::size_t(in)][a]);
      if (n.kind == OpKind::max_pool)
        for (int a = 0; a < 3; ++a) acc[a] *= n.stride[a];
      f[i] = acc;
      for (int a = 0; a < 3; ++a) best[a] = std::max(best[a], acc[a]);
    }
    return best;
  }

  // He-normal weights, zero biases.
  void init_parameters(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const Node& n : nodes_) {
      if (n.weight < 0) continue;
      Parameter<T>& w = params_[std::size_t(n.weight)];
      const int cin = (n.kind == OpKind::conv3d) ? w.dims[1] : w.dims[0];
      const double fan_in = double(cin) * n.kernel[0] * n.kernel[1] * n.kernel[2] /
                            (n.kind == OpKind::conv_transpose3d
                                 ? double(n.stride[0]) * n.stride[1] * n.stride[2]
                                 : 1.0);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (T& v : w.values) v = T(dist(rng));
      for (T& v : params_[std::size_t(n.bias)].values) v = T(0);
    }
  }

  template <class U>
  Graph<U> cast() const {
    Graph<U> g;
    g.nodes_ = nodes_;
    g.inputs_ = inputs_;
    g.output_ = output_;
    g.params_.reserve(params_.size());
    for (const auto& p : params_) {
      Parameter<U> q;
      q.dims = p.dims;
      q.values.assign(p.values.begin(), p.values.end());
      g.params_.push_back(std::move(q));
    }
    return g;
  }

 private:
  template <class>
  friend class Graph;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  int add_unary(OpKind k, int in, std::string name) {
    check_ref(in);
    Node n;
    n.kind = k;
    n.inputs = {in};
    n.channels = channels_of(in);
    n.name = std::move(name);
    return push(std::move(n));
  }

  int add_param(std::vector<int> dims) {
    Parameter<T> p;
    std::size_t n = 1;
    for (int d : dims) n *= std::size_t(d);
    p.dims = std::move(dims);
    p.values.assign(n, T(0));
    params_.push_back(std::move(p));
    return int(params_.size()) - 1;
  }

  void check_ref(int id) const {
    if (id < 0 || std::size_t(id) >= nodes_.size())
      throw error("node reference " + std::to_string(id) +
                  " does not precede the new node");
  }

  std::vector<Node> nodes_;
  std::vector<int> inputs_;
  std::vector<Parameter<T>> params_;
  int output_ = -1;
};

// Theoretical receptive-field half-width (voxels per axis) of the output node.
//
// Each node tracks, per axis, its grid step J in input voxels and a reach r
// such that node position p depends only on input voxels in
// [p*J - r, p*J + J - 1 + r]. Convs add (k/2)*J, pooling doubles J,
// transposed convs halve J and add the new J.
template <class T>
Index3 receptive_field(const Graph<T>& g) {
  struct Span {
    Index3 step{1, 1, 1};
    Index3 reach{0, 0, 0};
  };
  std::vector<Span> s(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& n = g.node(int(i));
    if (n.kind == OpKind::input) continue;
    Span cur = s[std::size_t(n.inputs[0])];
    for (int in : n.inputs) {
      const Span& o = s[std::size_t(in)];
      for (int a = 0; a < 3; ++a) {
        if (o.step[a] != cur.step[a])
          throw error("receptive_field: inputs of node " + std::to_string(i) +
                      " live on different grids");
        cur.reach[a] = std::max(cur.reach[a], o.reach[a]);
      }
    }
    switch (n.kind) {
      case OpKind::conv3d:
        for (int a = 0; a < 3; ++a) {
          if (n.kernel[a] % 2 == 0)
            throw error("receptive_field: even conv kernel unsupported");
          cur.reach[a] += (n.kernel[a] / 2) * cur.step[a];
        }
        break;
      case OpKind::max_pool:
        for (int a = 0; a < 3; ++a) cur.step[a] *= n.stride[a];
        break;
      case OpKind::conv_transpose3d:
        for (int a = 0; a < 3; ++a) {
          if (n.stride[a] == 1) continue;
          if (cur.step[a] % n.stride[a] != 0)
            throw error("receptive_field: upsampling below input resolution");
          cur.step[a] /= n.stride[a];
          cur.reach[a] += cur.step[a] * (n.stride[a] - 1);
        }
        break;
      case OpKind::relu:
      case OpKind::softmax:
      case OpKind::concat:
      case OpKind::add:
        break;
      case OpKind::input:
        throw error("receptive_field: unsupported layer kind");
    }
    s[i] = cur;
  }
  const Span& out = s[std::size_t(g.output())];
  if (out.step != Index3{1, 1, 1})
    throw error("receptive_field: output is not at input resolution");
  return out.reach;
}

}  // namespace instxai
