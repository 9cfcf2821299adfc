#pragma once

// Matrix-level reverse-mode differentiation. Nodes are appended in creation
// order, which is also a topological order, so forward() replays the list
// front to back and backward() walks it back to front.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lewm/array.hpp"
#include "lewm/error.hpp"

namespace lewm {

struct Parameter {
  std::string name;
  Array value;
  Array grad;
  bool trainable = true;
};

/// Named parameter store. Backed by a deque so references stay valid as
/// entries are added.
class ParameterSet {
 public:
  Parameter& add(std::string name, Array value, bool trainable = true) {
    if (find(name)) throw Error("duplicate parameter name '" + name + "'");
    Array grad(value.shape(), 0.0);
    items_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), trainable});
    return items_.back();
  }

  Parameter* find(std::string_view name) {
    for (auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Parameter* find(std::string_view name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter& at(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + std::string(name) + "'");
  }
  const Parameter& at(std::string_view name) const {
    if (const auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + std::string(name) + "'");
  }

  void zero_grad() {
    for (auto& p : items_) p.grad = Array(p.value.shape(), 0.0);
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.items_.size() != b.items_.size()) return false;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
      const auto& x = a.items_[i];
      const auto& y = b.items_[i];
      if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
    }
    return true;
  }

 private:
  std::deque<Parameter> items_;
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Array& a) {
  return ConstMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                  static_cast<Eigen::Index>(a.cols()));
}
inline MutMap view(Array& a) {
  return MutMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                static_cast<Eigen::Index>(a.cols()));
}
}  // namespace detail

class Graph;

/// Handle to a graph node.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Array& value() const;
  const Array& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using Forward = std::function<Array(const Graph&)>;
  using Backward = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Array value, std::string name = {}) { return leaf(std::move(value), false, std::move(name)); }

  /// Differentiable leaf that is not a named parameter (e.g. embeddings fed
  /// straight into a loss under test).
  Var variable(Array value, std::string name = {}) { return leaf(std::move(value), true, std::move(name)); }

  /// Leaf bound to a parameter. Binding the same parameter twice returns the
  /// same node so gradients from every use accumulate in one place.
  Var parameter(Parameter& p) {
    for (std::size_t id : bound_)
      if (nodes_[id].param == &p) return Var(this, id);
    Var v = leaf(p.value, p.trainable, p.name);
    nodes_[v.id()].param = &p;
    bound_.push_back(v.id());
    return v;
  }

  Var apply(std::string op, const std::vector<Var>& inputs, Forward fwd, Backward bwd) {
    Node node;
    node.op = std::move(op);
    for (const Var& in : inputs) {
      if (&in.graph() != this) throw Error("node '" + node.op + "' mixes inputs from different graphs");
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    node.value = fwd(*this);
    node.fwd = std::move(fwd);
    if (node.requires_grad) node.bwd = std::move(bwd);
    const std::size_t id = nodes_.size();
    check_finite(node, id);
    nodes_.push_back(std::move(node));
    return Var(this, id);
  }

  const Array& value(std::size_t id) const { return nodes_.at(id).value; }
  const Array& value(Var v) const { return value(v.id()); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first touch.
  Array& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Array(n.value.shape(), 0.0);
    return n.grad;
  }
  const Array& grad(std::size_t id) const { return nodes_.at(id).grad; }
  const Array& grad(Var v) const { return grad(v.id()); }

  void set_value(Var leaf_var, Array value) {
    Node& n = nodes_.at(leaf_var.id());
    if (n.fwd) throw Error("set_value on non-leaf node '" + n.op + "'");
    require_same_shape(n.value, value, "set_value");
    n.value = std::move(value);
  }

  /// Recompute every derived value from the current leaf values. Parameter
  /// leaves are refreshed from their bound Parameter first.
  void forward() {
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.param) {
        n.value = n.param->value;
      } else if (n.fwd) {
        n.value = n.fwd(*this);
        check_finite(n, id);
      }
    }
  }

  /// Reverse sweep from a scalar loss. Bound parameters receive their
  /// gradient in Parameter::grad (zeros when the loss does not reach them).
  void backward(Var loss) {
    const Array& lv = value(loss);
    if (!lv.is_scalar()) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
    }
    for (auto& n : nodes_) n.grad = Array();
    if (nodes_[loss.id()].requires_grad) {
      grad_ref(loss.id())[0] = 1.0;
      for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.bwd && !n.grad.empty()) n.bwd(*this, id);
      }
    }
    for (std::size_t id : bound_) {
      Node& n = nodes_[id];
      n.param->grad = n.grad.empty() ? Array(n.value.shape(), 0.0) : n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Array value;
    Array grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Forward fwd;
    Backward bwd;
  };

  Var leaf(Array value, bool requires_grad, std::string name) {
    Node node;
    node.op = name.empty() ? std::string("leaf") : "leaf:" + name;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    const std::size_t id = nodes_.size();
    check_finite(node, id);
    nodes_.push_back(std::move(node));
    return Var(this, id);
  }

  static void check_finite(const Node& n, std::size_t id) {
    if (!n.value.all_finite()) {
      throw NonFiniteError("non-finite value at node #" + std::to_string(id) + " (" + n.op + ")");
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> bound_;
};

inline const Array& Var::value() const { return graph_->value(id_); }
inline const Array& Var::grad() const { return graph_->grad(id_); }

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline void require_matrix(const Array& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void add_into(Array& dst, const Array& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class F, class DF>
Var unary(Var x, const char* name, F f, DF df) {
  Graph& g = x.graph();
  const std::size_t xi = x.id();
  return g.apply(
      name, {x},
      [xi, f](const Graph& gr) {
        Array out = gr.value(xi);
        for (double& v : out.storage()) v = f(v);
        return out;
      },
      [xi, df](Graph& gr, std::size_t self) {
        if (!gr.requires_grad(xi)) return;
        const auto& xv = gr.value(xi).storage();
        const auto& yv = gr.value(self).storage();
        const auto& gy = gr.grad(self).storage();
        auto& gx = gr.grad_ref(xi).storage();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
      });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Graph& g = a.graph();
  detail::require_matrix(a.value(), "matmul");
  detail::require_matrix(b.value(), "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.value().shape()) + " x " +
                     shape_str(b.value().shape()));
  }
  const std::size_t ai = a.id(), bi = b.id();
  return g.apply(
      "matmul", {a, b},
      [ai, bi](const Graph& gr) {
        const Array& A = gr.value(ai);
        const Array& B = gr.value(bi);
        Array C = Array::matrix(A.rows(), B.cols());
        detail::view(C).noalias() = detail::view(A) * detail::view(B);
        return C;
      },
      [ai, bi](Graph& gr, std::size_t self) {
        const Array& G = gr.grad(self);
        if (gr.requires_grad(ai)) {
          detail::view(gr.grad_ref(ai)).noalias() += detail::view(G) * detail::view(gr.value(bi)).transpose();
        }
        if (gr.requires_grad(bi)) {
          detail::view(gr.grad_ref(bi)).noalias() += detail::view(gr.value(ai)).transpose() * detail::view(G);
        }
      });
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().apply(
      "add", {a, b},
      [ai, bi](const Graph& gr) {
        Array out = gr.value(ai);
        detail::add_into(out, gr.value(bi));
        return out;
      },
      [ai, bi](Graph& gr, std::size_t self) {
        const Array& G = gr.grad(self);
        if (gr.requires_grad(ai)) detail::add_into(gr.grad_ref(ai), G);
        if (gr.requires_grad(bi)) detail::add_into(gr.grad_ref(bi), G);
      });
}

inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().apply(
      "sub", {a, b},
      [ai, bi](const Graph& gr) {
        Array out = gr.value(ai);
        auto& o = out.storage();
        const auto& s = gr.value(bi).storage();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] -= s[i];
        return out;
      },
      [ai, bi](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self).storage();
        if (gr.requires_grad(ai)) detail::add_into(gr.grad_ref(ai), gr.grad(self));
        if (gr.requires_grad(bi)) {
          auto& gb = gr.grad_ref(bi).storage();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= G[i];
        }
      });
}

inline Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().apply(
      "mul", {a, b},
      [ai, bi](const Graph& gr) {
        Array out = gr.value(ai);
        auto& o = out.storage();
        const auto& s = gr.value(bi).storage();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= s[i];
        return out;
      },
      [ai, bi](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self).storage();
        const auto& A = gr.value(ai).storage();
        const auto& B = gr.value(bi).storage();
        if (gr.requires_grad(ai)) {
          auto& ga = gr.grad_ref(ai).storage();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[i] * B[i];
        }
        if (gr.requires_grad(bi)) {
          auto& gb = gr.grad_ref(bi).storage();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += G[i] * A[i];
        }
      });
}

namespace detail {
inline void require_row_broadcast(const Array& a, const Array& r, const char* op) {
  require_matrix(a, op);
  if (r.rows() != 1 || r.cols() != a.cols()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(r.shape()) + " over rows of " +
                     shape_str(a.shape()));
  }
}
}  // namespace detail

/// a + r with r (1 x n) broadcast over every row of a.
inline Var add_row(Var a, Var r) {
  detail::require_row_broadcast(a.value(), r.value(), "add_row");
  const std::size_t ai = a.id(), ri = r.id();
  return a.graph().apply(
      "add_row", {a, r},
      [ai, ri](const Graph& gr) {
        Array out = gr.value(ai);
        detail::view(out).rowwise() += detail::view(gr.value(ri)).row(0);
        return out;
      },
      [ai, ri](Graph& gr, std::size_t self) {
        const Array& G = gr.grad(self);
        if (gr.requires_grad(ai)) detail::add_into(gr.grad_ref(ai), G);
        if (gr.requires_grad(ri)) detail::view(gr.grad_ref(ri)).row(0) += detail::view(G).colwise().sum();
      });
}

/// a * r elementwise with r (1 x n) broadcast over rows.
inline Var mul_row(Var a, Var r) {
  detail::require_row_broadcast(a.value(), r.value(), "mul_row");
  const std::size_t ai = a.id(), ri = r.id();
  return a.graph().apply(
      "mul_row", {a, r},
      [ai, ri](const Graph& gr) {
        Array out = gr.value(ai);
        detail::view(out).array().rowwise() *= detail::view(gr.value(ri)).row(0).array();
        return out;
      },
      [ai, ri](Graph& gr, std::size_t self) {
        const auto G = detail::view(gr.grad(self));
        if (gr.requires_grad(ai)) {
          detail::view(gr.grad_ref(ai)).array() +=
              G.array().rowwise() * detail::view(gr.value(ri)).row(0).array();
        }
        if (gr.requires_grad(ri)) {
          detail::view(gr.grad_ref(ri)).row(0).array() +=
              (G.array() * detail::view(gr.value(ai)).array()).colwise().sum();
        }
      });
}

inline Var sub_row(Var a, Var r) {
  Graph& g = r.graph();
  const std::size_t ri = r.id();
  Var neg = g.apply(
      "neg", {r},
      [ri](const Graph& gr) {
        Array out = gr.value(ri);
        for (double& v : out.storage()) v = -v;
        return out;
      },
      [ri](Graph& gr, std::size_t self) {
        auto& gx = gr.grad_ref(ri).storage();
        const auto& gy = gr.grad(self).storage();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gy[i];
      });
  return add_row(a, neg);
}

inline Var scale(Var x, double c) {
  return detail::unary(x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var x, double c) {
  return detail::unary(x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var square(Var x) {
  return detail::unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Square root. The derivative denominator is floored at 1e-12 so a zero
/// input yields a large finite slope instead of Inf.
inline Var sqrt(Var x) {
  for (double v : x.value().storage())
    if (v < 0.0) throw Error("sqrt: negative input " + std::to_string(v));
  return detail::unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

inline Var exp(Var x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var cos(Var x) {
  return detail::unary(x, "cos", [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

inline Var sin(Var x) {
  return detail::unary(x, "sin", [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

inline Var tanh(Var x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// x * sigmoid(x).
inline Var silu(Var x) {
  return detail::unary(
      x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

/// Sum of all entries, as a 1x1 value.
inline Var sum(Var x) {
  const std::size_t xi = x.id();
  return x.graph().apply(
      "sum", {x},
      [xi](const Graph& gr) {
        double s = 0.0;
        for (double v : gr.value(xi).storage()) s += v;
        return Array::scalar(s);
      },
      [xi](Graph& gr, std::size_t self) {
        const double gy = gr.grad(self)[0];
        for (double& v : gr.grad_ref(xi).storage()) v += gy;
      });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean of an empty array");
  return scale(sum(x), 1.0 / n);
}

/// Column sums: (m x n) -> (1 x n).
inline Var col_sum(Var x) {
  detail::require_matrix(x.value(), "col_sum");
  const std::size_t xi = x.id();
  return x.graph().apply(
      "col_sum", {x},
      [xi](const Graph& gr) {
        const Array& X = gr.value(xi);
        Array out = Array::matrix(1, X.cols());
        detail::view(out).row(0) = detail::view(X).colwise().sum();
        return out;
      },
      [xi](Graph& gr, std::size_t self) {
        detail::view(gr.grad_ref(xi)).rowwise() += detail::view(gr.grad(self)).row(0);
      });
}

inline Var col_mean(Var x) { return scale(col_sum(x), 1.0 / static_cast<double>(x.rows())); }

/// Row sums: (m x n) -> (m x 1).
inline Var row_sum(Var x) {
  detail::require_matrix(x.value(), "row_sum");
  const std::size_t xi = x.id();
  return x.graph().apply(
      "row_sum", {x},
      [xi](const Graph& gr) {
        const Array& X = gr.value(xi);
        Array out = Array::matrix(X.rows(), 1);
        detail::view(out).col(0) = detail::view(X).rowwise().sum();
        return out;
      },
      [xi](Graph& gr, std::size_t self) {
        detail::view(gr.grad_ref(xi)).colwise() += detail::view(gr.grad(self)).col(0);
      });
}

inline Var transpose(Var x) {
  detail::require_matrix(x.value(), "transpose");
  const std::size_t xi = x.id();
  return x.graph().apply(
      "transpose", {x},
      [xi](const Graph& gr) {
        const Array& X = gr.value(xi);
        Array out = Array::matrix(X.cols(), X.rows());
        detail::view(out) = detail::view(X).transpose();
        return out;
      },
      [xi](Graph& gr, std::size_t self) {
        detail::view(gr.grad_ref(xi)) += detail::view(gr.grad(self)).transpose();
      });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x.value(), "slice_rows");
  if (begin + count > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.value().shape()));
  }
  const std::size_t xi = x.id();
  return x.graph().apply(
      "slice_rows", {x},
      [xi, begin, count](const Graph& gr) { return lewm::slice_rows(gr.value(xi), begin, count); },
      [xi, begin, count](Graph& gr, std::size_t self) {
        detail::view(gr.grad_ref(xi)).middleRows(static_cast<Eigen::Index>(begin),
                                                 static_cast<Eigen::Index>(count)) +=
            detail::view(gr.grad(self));
      });
}

/// Row i of the result is row idx[i] of x. Indices may repeat.
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  detail::require_matrix(x.value(), "gather_rows");
  for (std::size_t r : idx) {
    if (r >= x.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_str(x.value().shape()));
    }
  }
  const std::size_t xi = x.id();
  return x.graph().apply(
      "gather_rows", {x},
      [xi, idx](const Graph& gr) {
        const Array& X = gr.value(xi);
        Array out = Array::matrix(idx.size(), X.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          detail::view(out).row(static_cast<Eigen::Index>(i)) = detail::view(X).row(static_cast<Eigen::Index>(idx[i]));
        }
        return out;
      },
      [xi, idx](Graph& gr, std::size_t self) {
        auto dX = detail::view(gr.grad_ref(xi));
        const auto G = detail::view(gr.grad(self));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          dX.row(static_cast<Eigen::Index>(idx[i])) += G.row(static_cast<Eigen::Index>(i));
        }
      });
}

/// Stack matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts[0].cols();
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].value().shape()) + " vs " +
                       shape_str(p.value().shape()));
    }
    ids.push_back(p.id());
  }
  return parts[0].graph().apply(
      "concat_rows", parts,
      [ids, c](const Graph& gr) {
        std::size_t r = 0;
        for (auto id : ids) r += gr.value(id).rows();
        Array out = Array::matrix(r, c);
        std::size_t at = 0;
        for (auto id : ids) {
          const auto& s = gr.value(id).storage();
          std::copy(s.begin(), s.end(), out.storage().begin() + static_cast<std::ptrdiff_t>(at));
          at += s.size();
        }
        return out;
      },
      [ids](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self).storage();
        std::size_t at = 0;
        for (auto id : ids) {
          const std::size_t n = gr.value(id).size();
          if (gr.requires_grad(id)) {
            auto& gi = gr.grad_ref(id).storage();
            for (std::size_t k = 0; k < n; ++k) gi[k] += G[at + k];
          }
          at += n;
        }
      });
}

/// Place matrices with equal row counts side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].value().shape()) + " vs " +
                       shape_str(p.value().shape()));
    }
    ids.push_back(p.id());
  }
  return parts[0].graph().apply(
      "concat_cols", parts,
      [ids, r](const Graph& gr) {
        std::size_t c = 0;
        for (auto id : ids) c += gr.value(id).cols();
        Array out = Array::matrix(r, c);
        Eigen::Index at = 0;
        for (auto id : ids) {
          const auto v = detail::view(gr.value(id));
          detail::view(out).middleCols(at, v.cols()) = v;
          at += v.cols();
        }
        return out;
      },
      [ids](Graph& gr, std::size_t self) {
        const auto G = detail::view(gr.grad(self));
        Eigen::Index at = 0;
        for (auto id : ids) {
          const auto w = static_cast<Eigen::Index>(gr.value(id).cols());
          if (gr.requires_grad(id)) detail::view(gr.grad_ref(id)) += G.middleCols(at, w);
          at += w;
        }
      });
}

/// Per-column standardization over the batch (rows):
/// (x - mean) / sqrt(var_biased + eps).
inline Var batch_standardize(Var x, double eps) {
  detail::require_matrix(x.value(), "batch_standardize");
  if (x.rows() < 2) {
    throw DegenerateBatchError("batch_standardize needs at least 2 rows, got " + std::to_string(x.rows()));
  }
  const std::size_t xi = x.id();
  return x.graph().apply(
      "batch_standardize", {x},
      [xi, eps](const Graph& gr) {
        const Array& X = gr.value(xi);
        const auto n = static_cast<double>(X.rows());
        Array out = X;
        auto Y = detail::view(out);
        const Eigen::RowVectorXd mu = detail::view(X).colwise().sum() / n;
        Y.rowwise() -= mu;
        const Eigen::RowVectorXd var = Y.array().square().colwise().sum() / n;
        const Eigen::RowVectorXd inv = (var.array() + eps).rsqrt();
        Y.array().rowwise() *= inv.array();
        return out;
      },
      [xi, eps](Graph& gr, std::size_t self) {
        const Array& X = gr.value(xi);
        const auto n = static_cast<double>(X.rows());
        const auto Y = detail::view(gr.value(self));
        const auto G = detail::view(gr.grad(self));
        const Eigen::RowVectorXd mu = detail::view(X).colwise().sum() / n;
        const Eigen::RowVectorXd var =
            (detail::view(X).rowwise() - mu).array().square().colwise().sum() / n;
        const Eigen::RowVectorXd inv = (var.array() + eps).rsqrt();
        const Eigen::RowVectorXd g_mean = G.colwise().sum() / n;
        const Eigen::RowVectorXd gy_mean = (G.array() * Y.array()).colwise().sum() / n;
        auto dX = detail::view(gr.grad_ref(xi));
        for (Eigen::Index r = 0; r < G.rows(); ++r) {
          dX.row(r).array() +=
              inv.array() * (G.row(r).array() - g_mean.array() - Y.row(r).array() * gy_mean.array());
        }
      });
}

/// Elementwise product with a constant mask (same shape).
inline Var mask(Var x, const Array& m) {
  Var c = x.graph().constant(m, "mask");
  return mul(x, c);
}

}  // namespace lewm
