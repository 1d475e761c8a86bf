#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/errors.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

struct NodeId {
  std::size_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

enum class OpKind : std::uint8_t {
  leaf,
  affine,
  relu,
  tanh,
  add,
  sub,
  mul,
  scale,
  concat,
  mean,
  sum,
  l2_norm,
  softmax_xent,
};

inline const char* op_name(OpKind op) noexcept {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::l2_norm: return "l2_norm";
    case OpKind::softmax_xent: return "softmax_xent";
  }
  return "?";
}

/// Operation trace for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the trace is acyclic by construction. Leaves are bound to tensors at
/// evaluation time; the graph itself holds no data and can be reused with
/// different bindings (and shared read-only across threads).
///
/// Conventions:
///  - affine(x, W, b) computes x·W + b with x [n,in] (or [in]), W [in,out], b [out].
///  - concat joins along the last axis.
///  - l2_norm reduces the last axis: [n,d] -> [n], [d] -> [1].
///  - softmax_xent(logits [n,K], labels [n]) yields per-row cross-entropy; the
///    label leaf holds integral class indices stored as T.
///  - relu'(0) = 0 and the gradient of a norm at the origin is 0.
template <typename T>
class DiffGraph {
 public:
  struct Node {
    OpKind op = OpKind::leaf;
    std::vector<NodeId> inputs;
    T constant = T(0);
    std::string name;
    bool differentiable = false;
  };

  NodeId parameter(std::string name) { return leaf(std::move(name), true); }
  NodeId input(std::string name, bool differentiable = false) {
    return leaf(std::move(name), differentiable);
  }

  NodeId leaf(std::string name, bool differentiable) {
    Node n;
    n.name = std::move(name);
    n.differentiable = differentiable;
    return push(std::move(n));
  }

  NodeId affine(NodeId x, NodeId w, NodeId b) { return push_op(OpKind::affine, {x, w, b}); }
  NodeId relu(NodeId x) { return push_op(OpKind::relu, {x}); }
  NodeId tanh(NodeId x) { return push_op(OpKind::tanh, {x}); }
  NodeId add(NodeId a, NodeId b) { return push_op(OpKind::add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return push_op(OpKind::sub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return push_op(OpKind::mul, {a, b}); }
  NodeId scale(NodeId x, T factor) {
    NodeId id = push_op(OpKind::scale, {x});
    nodes_[id.index].constant = factor;
    return id;
  }
  NodeId concat(NodeId a, NodeId b) { return push_op(OpKind::concat, {a, b}); }
  NodeId mean(NodeId x) { return push_op(OpKind::mean, {x}); }
  NodeId sum(NodeId x) { return push_op(OpKind::sum, {x}); }
  NodeId l2_norm(NodeId x) { return push_op(OpKind::l2_norm, {x}); }
  NodeId softmax_xent(NodeId logits, NodeId labels) {
    return push_op(OpKind::softmax_xent, {logits, labels});
  }

  void set_output(NodeId id) {
    check_id(id);
    output_ = id;
    has_output_ = true;
  }

  NodeId output() const {
    if (!has_output_) throw Error("graph: output node not set");
    return output_;
  }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  NodeId push_op(OpKind op, std::vector<NodeId> inputs) {
    for (auto id : inputs) check_id(id);
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  void check_id(NodeId id) const {
    if (id.index >= nodes_.size()) throw Error("graph: unknown node " + std::to_string(id.index));
  }

  std::vector<Node> nodes_;
  NodeId output_{};
  bool has_output_ = false;
};

/// Leaf -> tensor assignment. Non-owning: bound tensors must outlive every
/// forward/backward call that uses the bindings.
template <typename T>
class Bindings {
 public:
  explicit Bindings(const DiffGraph<T>& graph) : graph_(&graph), slots_(graph.size(), nullptr) {}

  Bindings& bind(NodeId id, const Tensor<T>& value) {
    if (id.index >= slots_.size() || graph_->node(id).op != OpKind::leaf) {
      throw Error("bindings: node " + std::to_string(id.index) + " is not a leaf");
    }
    slots_[id.index] = &value;
    return *this;
  }

  const Tensor<T>& at(NodeId id) const {
    const Tensor<T>* t = id.index < slots_.size() ? slots_[id.index] : nullptr;
    if (t == nullptr) {
      throw Error("bindings: leaf '" + graph_->node(id).name + "' is unbound");
    }
    return *t;
  }

 private:
  const DiffGraph<T>* graph_;
  std::vector<const Tensor<T>*> slots_;
};

/// Scalar output value plus reverse-accumulated gradients of the requested leaves.
template <typename T>
class Gradients {
 public:
  T value = T(0);

  const Tensor<T>& operator[](NodeId id) const {
    for (const auto& [leaf, grad] : grads_) {
      if (leaf == id) return grad;
    }
    throw Error("gradients: node " + std::to_string(id.index) + " was not requested");
  }

  void put(NodeId id, Tensor<T> g) { grads_.emplace_back(id, std::move(g)); }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::vector<std::pair<NodeId, Tensor<T>>> grads_;
};

namespace detail {

[[noreturn]] inline void shape_fail(OpKind op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

template <typename T>
Tensor<T> forward_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.rank() > 2 || x.cols() != w.shape()[0]) {
    shape_fail(OpKind::affine, x.shape(), w.shape());
  }
  const std::size_t n = x.rows(), in = w.shape()[0], out = w.shape()[1];
  if (b.rank() != 1 || b.size() != out) shape_fail(OpKind::affine, w.shape(), b.shape());
  Tensor<T> y(x.rank() == 1 ? Shape{out} : Shape{n, out});
  for (std::size_t i = 0; i < n; ++i) {
    T* yr = y.data().data() + i * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
    for (std::size_t k = 0; k < in; ++k) {
      const T xv = x[i * in + k];
      const T* wr = w.data().data() + k * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

template <typename T>
Tensor<T> forward_concat(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() > 2 || a.rows() != b.rows()) {
    shape_fail(OpKind::concat, a.shape(), b.shape());
  }
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor<T> y(a.rank() == 1 ? Shape{ca + cb} : Shape{n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) y[i * (ca + cb) + j] = a[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) y[i * (ca + cb) + ca + j] = b[i * cb + j];
  }
  return y;
}

template <typename T>
Tensor<T> forward_l2_norm(const Tensor<T>& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += x[i * d + j] * x[i * d + j];
    y[i] = std::sqrt(acc);
  }
  return y;
}

template <typename T>
std::size_t checked_label(T raw, std::size_t classes) {
  const T rounded = std::round(raw);
  if (!(rounded == raw) || raw < T(0) || raw >= static_cast<T>(classes)) {
    throw DomainError("softmax_xent: label " + std::to_string(static_cast<double>(raw)) +
                      " outside [0," + std::to_string(classes) + ")");
  }
  return static_cast<std::size_t>(raw);
}

template <typename T>
Tensor<T> forward_softmax_xent(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.rank() > 2 || labels.rank() != 1 || labels.size() != logits.rows()) {
    shape_fail(OpKind::softmax_xent, logits.shape(), labels.shape());
  }
  const std::size_t n = logits.rows(), k = logits.cols();
  Tensor<T> y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = checked_label(labels[i], k);
    const T* z = logits.data().data() + i * k;
    T zmax = z[0];
    for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, z[c]);
    T acc = T(0);
    for (std::size_t c = 0; c < k; ++c) acc += std::exp(z[c] - zmax);
    y[i] = (zmax + std::log(acc)) - z[label];
  }
  return y;
}

template <typename T>
Tensor<T> evaluate_node(const DiffGraph<T>& g, const typename DiffGraph<T>::Node& node,
                        const std::vector<Tensor<T>>& v) {
  auto in = [&](std::size_t i) -> const Tensor<T>& { return v[node.inputs[i].index]; };
  auto same_shape = [&](OpKind op) {
    if (in(0).shape() != in(1).shape()) shape_fail(op, in(0).shape(), in(1).shape());
  };
  (void)g;
  switch (node.op) {
    case OpKind::leaf: throw Error("graph: leaf evaluated as operation");
    case OpKind::affine: return forward_affine(in(0), in(1), in(2));
    case OpKind::relu: return map(in(0), [](T x) { return x > T(0) ? x : T(0); });
    case OpKind::tanh: return map(in(0), [](T x) { return std::tanh(x); });
    case OpKind::add: same_shape(node.op); return zip(in(0), in(1), std::plus<T>{});
    case OpKind::sub: same_shape(node.op); return zip(in(0), in(1), std::minus<T>{});
    case OpKind::mul: same_shape(node.op); return zip(in(0), in(1), std::multiplies<T>{});
    case OpKind::scale: {
      const T c = node.constant;
      return map(in(0), [c](T x) { return c * x; });
    }
    case OpKind::concat: return forward_concat(in(0), in(1));
    case OpKind::sum:
    case OpKind::mean: {
      T acc = T(0);
      for (T x : in(0).data()) acc += x;
      if (node.op == OpKind::mean) acc /= static_cast<T>(in(0).size());
      return Tensor<T>::scalar(acc);
    }
    case OpKind::l2_norm: return forward_l2_norm(in(0));
    case OpKind::softmax_xent: return forward_softmax_xent(in(0), in(1));
  }
  throw Error("graph: unknown op");
}

template <typename T>
void accumulate(std::vector<Tensor<T>>& adj, std::vector<bool>& has, NodeId id, Tensor<T> g) {
  if (!has[id.index]) {
    adj[id.index] = std::move(g);
    has[id.index] = true;
    return;
  }
  auto& a = adj[id.index];
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
}

// Propagates the adjoint `dy` of `node` to its inputs.
template <typename T>
void backprop_node(const typename DiffGraph<T>::Node& node, const std::vector<Tensor<T>>& v,
                   const Tensor<T>& y, const Tensor<T>& dy, const std::vector<bool>& needs,
                   std::vector<Tensor<T>>& adj, std::vector<bool>& has) {
  auto in = [&](std::size_t i) -> const Tensor<T>& { return v[node.inputs[i].index]; };
  auto wants = [&](std::size_t i) { return needs[node.inputs[i].index]; };
  auto give = [&](std::size_t i, Tensor<T> g) { accumulate(adj, has, node.inputs[i], std::move(g)); };

  switch (node.op) {
    case OpKind::leaf: return;
    case OpKind::affine: {
      const auto& x = in(0);
      const auto& w = in(1);
      const std::size_t n = x.rows(), k_in = w.shape()[0], out = w.shape()[1];
      if (wants(0)) {
        // Row o of wt is column o of W, so every dx entry still sums over o in order.
        std::vector<T> wt(k_in * out);
        for (std::size_t k = 0; k < k_in; ++k)
          for (std::size_t o = 0; o < out; ++o) wt[o * k_in + k] = w[k * out + o];
        Tensor<T> dx(x.shape());
        for (std::size_t i = 0; i < n; ++i) {
          T* dxr = dx.data().data() + i * k_in;
          const T* dyr = dy.data().data() + i * out;
          for (std::size_t o = 0; o < out; ++o) {
            const T g = dyr[o];
            const T* wr = wt.data() + o * k_in;
            for (std::size_t k = 0; k < k_in; ++k) dxr[k] += g * wr[k];
          }
        }
        give(0, std::move(dx));
      }
      if (wants(1)) {
        Tensor<T> dw(w.shape());
        for (std::size_t i = 0; i < n; ++i) {
          const T* dyr = dy.data().data() + i * out;
          for (std::size_t k = 0; k < k_in; ++k) {
            const T xv = x[i * k_in + k];
            T* dwr = dw.data().data() + k * out;
            for (std::size_t o = 0; o < out; ++o) dwr[o] += xv * dyr[o];
          }
        }
        give(1, std::move(dw));
      }
      if (wants(2)) {
        Tensor<T> db(Shape{out});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < out; ++o) db[o] += dy[i * out + o];
        }
        give(2, std::move(db));
      }
      return;
    }
    case OpKind::relu:
      if (wants(0)) give(0, zip(in(0), dy, [](T x, T g) { return x > T(0) ? g : T(0); }));
      return;
    case OpKind::tanh:
      if (wants(0)) give(0, zip(y, dy, [](T t, T g) { return g * (T(1) - t * t); }));
      return;
    case OpKind::add:
      if (wants(0)) give(0, dy);
      if (wants(1)) give(1, dy);
      return;
    case OpKind::sub:
      if (wants(0)) give(0, dy);
      if (wants(1)) give(1, map(dy, [](T g) { return -g; }));
      return;
    case OpKind::mul:
      if (wants(0)) give(0, zip(dy, in(1), std::multiplies<T>{}));
      if (wants(1)) give(1, zip(dy, in(0), std::multiplies<T>{}));
      return;
    case OpKind::scale: {
      const T c = node.constant;
      if (wants(0)) give(0, map(dy, [c](T g) { return c * g; }));
      return;
    }
    case OpKind::concat: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
      if (wants(0)) {
        Tensor<T> da(a.shape());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca; ++j) da[i * ca + j] = dy[i * (ca + cb) + j];
        give(0, std::move(da));
      }
      if (wants(1)) {
        Tensor<T> db(b.shape());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb; ++j) db[i * cb + j] = dy[i * (ca + cb) + ca + j];
        give(1, std::move(db));
      }
      return;
    }
    case OpKind::sum:
      if (wants(0)) give(0, Tensor<T>(in(0).shape(), dy[0]));
      return;
    case OpKind::mean:
      if (wants(0)) give(0, Tensor<T>(in(0).shape(), dy[0] / static_cast<T>(in(0).size())));
      return;
    case OpKind::l2_norm: {
      if (!wants(0)) return;
      const auto& x = in(0);
      const std::size_t n = x.rows(), d = x.cols();
      Tensor<T> dx(x.shape());
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == T(0)) continue;
        const T f = dy[i] / y[i];
        for (std::size_t j = 0; j < d; ++j) dx[i * d + j] = f * x[i * d + j];
      }
      give(0, std::move(dx));
      return;
    }
    case OpKind::softmax_xent: {
      if (!wants(0)) return;
      const auto& z = in(0);
      const auto& labels = in(1);
      const std::size_t n = z.rows(), k = z.cols();
      Tensor<T> dz(z.shape());
      for (std::size_t i = 0; i < n; ++i) {
        const T* zr = z.data().data() + i * k;
        T zmax = zr[0];
        for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, zr[c]);
        T acc = T(0);
        for (std::size_t c = 0; c < k; ++c) acc += std::exp(zr[c] - zmax);
        const auto label = static_cast<std::size_t>(labels[i]);
        for (std::size_t c = 0; c < k; ++c) {
          const T p = std::exp(zr[c] - zmax) / acc;
          dz[i * k + c] = dy[i] * (p - (c == label ? T(1) : T(0)));
        }
      }
      give(0, std::move(dz));
      return;
    }
  }
}

template <typename T>
std::vector<Tensor<T>> evaluate_all(const DiffGraph<T>& graph, const Bindings<T>& bindings) {
  const auto& nodes = graph.nodes();
  std::vector<Tensor<T>> values(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& node = nodes[i];
    if (node.op == OpKind::leaf) {
      values[i] = bindings.at(NodeId{i});
      if (!values[i].all_finite()) {
        throw NumericError("forward: non-finite value bound to leaf '" + node.name + "'");
      }
      continue;
    }
    values[i] = evaluate_node(graph, node, values);
    if (!values[i].all_finite()) {
      throw NumericError(std::string("forward: non-finite output of ") + op_name(node.op) +
                         " (node " + std::to_string(i) + ")");
    }
  }
  return values;
}

}  // namespace detail

/// Evaluates the graph output. Summation order is sequential in index order,
/// so identical bindings give bitwise-identical results.
template <typename T>
Tensor<T> forward(const DiffGraph<T>& graph, const Bindings<T>& bindings) {
  const NodeId out = graph.output();
  auto values = detail::evaluate_all(graph, bindings);
  return std::move(values[out.index]);
}

/// Reverse-mode gradient of the scalar graph output with respect to `wrt`.
/// Every node in `wrt` must be a differentiable leaf.
template <typename T>
Gradients<T> backward(const DiffGraph<T>& graph, const Bindings<T>& bindings,
                      const std::vector<NodeId>& wrt) {
  const auto& nodes = graph.nodes();
  const NodeId out = graph.output();
  std::vector<bool> needs(nodes.size(), false);
  for (auto id : wrt) {
    const auto& n = graph.node(id);
    if (n.op != OpKind::leaf) {
      throw Error(std::string("backward: node '") + op_name(n.op) + "' is not a leaf");
    }
    if (!n.differentiable) throw Error("backward: leaf '" + n.name + "' is not differentiable");
    needs[id.index] = true;
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (auto in : nodes[i].inputs) needs[i] = needs[i] || needs[in.index];
  }

  auto values = detail::evaluate_all(graph, bindings);
  if (values[out.index].size() != 1) {
    throw ShapeError("backward: output must be scalar, got " + shape_string(values[out.index].shape()));
  }

  Gradients<T> result;
  result.value = values[out.index][0];

  std::vector<Tensor<T>> adj(nodes.size());
  std::vector<bool> has(nodes.size(), false);
  adj[out.index] = Tensor<T>(values[out.index].shape(), T(1));
  has[out.index] = true;
  for (std::size_t i = out.index + 1; i-- > 0;) {
    if (!has[i] || !needs[i]) continue;
    detail::backprop_node(nodes[i], values, values[i], adj[i], needs, adj, has);
  }
  for (auto id : wrt) {
    result.put(id, has[id.index] ? std::move(adj[id.index]) : Tensor<T>(values[id.index].shape()));
    has[id.index] = false;
    adj[id.index] = Tensor<T>(values[id.index].shape());
  }
  return result;
}

/// Central-difference gradient of a scalar function.
template <typename T, typename F>
Tensor<T> finite_diff(F&& fn, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw DomainError("finite_diff: step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T up = fn(probe);
    probe[i] = orig - h;
    const T down = fn(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (T(2) * h);
  }
  return grad;
}

}  // namespace unlearn
