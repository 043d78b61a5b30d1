// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Tape is rebuilt for every forward pass. Ops append nodes in execution
// order, so parents always precede children and backward() is a single
// reverse sweep. Every op also charges its FLOPs to the tape using the rules
// in dpp::flops; the analytic cost model in operators.hpp composes the same
// rules from layer shapes, and tests compare the two.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dpp/errors.hpp"

namespace dpp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    check_shape();
    data.assign(shape_numel(shape), fill);
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  void check_shape() const {
    if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
};

/// A named trainable tensor. Gradients live on the tape, never here, so
/// frozen parameters can be shared read-only across evaluation threads.
struct Parameter {
  std::string name;
  Tensor value;
};

// FLOP counting rules shared by the runtime counter and the analytic model.
namespace flops {
inline std::uint64_t matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }
inline std::uint64_t elementwise(std::uint64_t n) { return n; }
inline std::uint64_t bias_add(std::uint64_t rows, std::uint64_t cols) { return rows * cols; }
// mean, center, square, variance sum, normalize, gain, bias
inline std::uint64_t layer_norm(std::uint64_t rows, std::uint64_t d) { return 7 * rows * d; }
// max, subtract(+temperature), exp, sum, divide
inline std::uint64_t softmax(std::uint64_t rows, std::uint64_t j) { return 5 * rows * j; }
inline std::uint64_t rowwise_matvec(std::uint64_t rows, std::uint64_t p, std::uint64_t q) {
  return 2 * rows * p * q;
}
inline std::uint64_t reduction(std::uint64_t n) { return n; }
}  // namespace flops

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  std::uint64_t flops() const { return flops_; }
  void add_flops(std::uint64_t n) { flops_ += n; }
  void reset_flops() { flops_ = 0; }

  Var constant(Tensor t) {
    if (!t.all_finite()) throw DomainError("constant contains non-finite values");
    return push(std::move(t), {}, false, nullptr);
  }

  /// Leaf that requires grad (tests and finite-difference checks).
  Var variable(Tensor t) {
    if (!t.all_finite()) throw DomainError("variable contains non-finite values");
    return push(std::move(t), {}, grad_enabled_, nullptr);
  }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(Tensor{}, {}, grad_enabled_, &p.value);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Records an op result. The backward closure is dropped when no parent
  /// requires grad.
  Var record(const char* op, Tensor value, std::vector<int> parents, Backward bw) {
    if (!value.all_finite()) throw DomainError(std::string(op) + ": non-finite result");
    bool needs = false;
    if (grad_enabled_)
      for (int p : parents) needs = needs || nodes_[p].requires_grad;
    Var v = push(std::move(value), std::move(parents), needs, nullptr);
    if (needs) nodes_[v.id()].backward = std::move(bw);
    return v;
  }

  const Tensor& value_of(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<int>& parents(int id) const { return nodes_[id].parents; }

  /// Gradient accumulator for a node, zero-initialized on first access.
  Tensor& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(value_of(id).shape, 0.0);
    return n.grad;
  }
  const Tensor& grad_at(int id) const { return nodes_[id].grad; }

  const Tensor* grad(Var v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.data.empty() ? nullptr : &n.grad;
  }

  const Tensor* grad_of(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return nullptr;
    return grad(Var(const_cast<Tape*>(this), it->second));
  }

  /// Reverse sweep from a scalar root. Each node is visited once, in
  /// reverse recording order.
  void backward(Var root) {
    if (root.tape() != this) throw DimensionError("backward: variable belongs to another tape");
    if (value_of(root.id()).numel() != 1)
      throw DimensionError("backward: root must be a scalar, got " +
                           shape_str(value_of(root.id()).shape));
    if (!nodes_[root.id()].requires_grad) return;
    grad_buffer(root.id()).data[0] += 1.0;
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.data.empty()) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    std::vector<int> parents;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, std::vector<int> parents, bool requires_grad, const Tensor* external) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.parents = std::move(parents);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  bool grad_enabled_;
  std::uint64_t flops_ = 0;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value_of(id_); }

namespace detail {

inline void same_tape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw DimensionError(std::string(op) + ": operands on different tapes");
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape));
}

inline void accumulate(Tensor& into, const Tensor& from) {
  for (std::size_t i = 0; i < into.data.size(); ++i) into.data[i] += from.data[i];
}

// Elementwise binary op with scalar broadcasting on either side.
// da/db return the partial derivative of the output w.r.t. each operand.
template <class F, class Da, class Db>
Var binary(Var a, Var b, const char* op, F f, Da da, Db db) {
  same_tape(a, b, op);
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool xs = x.numel() == 1, ys = y.numel() == 1;
  if (x.shape != y.shape && !xs && !ys)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(x.shape) + " vs " +
                         shape_str(y.shape));
  const Shape& out_shape = (xs && !ys) ? y.shape : x.shape;
  Tensor out(out_shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = f(x.data[xs ? 0 : i], y.data[ys ? 0 : i]);
  tape.add_flops(flops::elementwise(n));
  const int ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {ia, ib}, [ia, ib, xs, ys, da, db](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& xv = t.value_of(ia);
    const Tensor& yv = t.value_of(ib);
    const Tensor& ov = t.value_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga.data[xs ? 0 : i] += g.data[i] * da(xv.data[xs ? 0 : i], yv.data[ys ? 0 : i], ov.data[i]);
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.numel(); ++i)
        gb.data[ys ? 0 : i] += g.data[i] * db(xv.data[xs ? 0 : i], yv.data[ys ? 0 : i], ov.data[i]);
    }
  });
}

template <class F, class D>
Var unary(Var a, const char* op, F f, D d) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = f(x.data[i]);
  tape.add_flops(flops::elementwise(x.numel()));
  const int ia = a.id();
  return tape.record(op, std::move(out), {ia}, [ia, d](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& xv = t.value_of(ia);
    const Tensor& ov = t.value_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * d(xv.data[i], ov.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// c = a·b for a[m×k], b[k×n].
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_matrix(x, "matmul");
  detail::require_matrix(y, "matmul");
  const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
  if (y.shape[0] != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.data[i * k + p];
      const double* yrow = &y.data[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  Tape& tape = *a.tape();
  tape.add_flops(flops::matmul(m, k, n));
  const int ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& xv = t.value_of(ia);
    const Tensor& yv = t.value_of(ib);
    if (t.requires_grad(ia)) {  // dA = dC · Bᵀ
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.data[i * n + j] * yv.data[p * n + j];
          ga.data[i * k + p] += s;
        }
    }
    if (t.requires_grad(ib)) {  // dB = Aᵀ · dC
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv_ip = xv.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb.data[p * n + j] += xv_ip * g.data[i * n + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.shape[0], n = x.shape[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
  const int ia = a.id();
  return a.tape()->record("transpose", std::move(out), {ia}, [ia, m, n](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
  });
}

/// out[r] = a[r] + bias for a[n×m], bias with m elements.
inline Var add_row(Var a, Var bias) {
  detail::same_tape(a, bias, "add_row");
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  const std::size_t m = x.cols(), n = x.rows();
  if (b.numel() != m)
    throw DimensionError("add_row: bias " + shape_str(b.shape) + " does not match " + shape_str(x.shape));
  Tensor out = x;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += b.data[j];
  Tape& tape = *a.tape();
  tape.add_flops(flops::bias_add(n, m));
  const int ia = a.id(), ib = bias.id();
  return tape.record("add_row", std::move(out), {ia, ib}, [ia, ib, n, m](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    if (t.requires_grad(ia)) detail::accumulate(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb.data[j] += g.data[i * m + j];
    }
  });
}

/// Per-row matrix-vector product with row-specific matrices:
/// out[r, j] = Σ_k x[r, k] · w[r, k·q + j], x[n×p], w[n×(p·q)] → [n×q].
inline Var rowwise_matvec(Var x, Var w, std::size_t q) {
  detail::same_tape(x, w, "rowwise_matvec");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_matrix(xv, "rowwise_matvec");
  detail::require_matrix(wv, "rowwise_matvec");
  const std::size_t n = xv.shape[0], p = xv.shape[1];
  if (wv.shape[0] != n || wv.shape[1] != p * q)
    throw DimensionError("rowwise_matvec: weights " + shape_str(wv.shape) + " incompatible with " +
                         shape_str(xv.shape) + " and q=" + std::to_string(q));
  Tensor out({n, q});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < p; ++k) {
      const double xk = xv.data[r * p + k];
      const double* wrow = &wv.data[r * p * q + k * q];
      for (std::size_t j = 0; j < q; ++j) out.data[r * q + j] += xk * wrow[j];
    }
  Tape& tape = *x.tape();
  tape.add_flops(flops::rowwise_matvec(n, p, q));
  const int ix = x.id(), iw = w.id();
  return tape.record("rowwise_matvec", std::move(out), {ix, iw}, [ix, iw, n, p, q](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& xv2 = t.value_of(ix);
    const Tensor& wv2 = t.value_of(iw);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < p; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < q; ++j) s += g.data[r * q + j] * wv2.data[r * p * q + k * q + j];
          gx.data[r * p + k] += s;
        }
    }
    if (t.requires_grad(iw)) {
      Tensor& gw = t.grad_buffer(iw);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < p; ++k)
          for (std::size_t j = 0; j < q; ++j)
            gw.data[r * p * q + k * q + j] += xv2.data[r * p + k] * g.data[r * q + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  return detail::binary(a, b, "add", [](double x, double y) { return x + y; },
                        [](double, double, double) { return 1.0; },
                        [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(a, b, "sub", [](double x, double y) { return x - y; },
                        [](double, double, double) { return 1.0; },
                        [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(a, b, "mul", [](double x, double y) { return x * y; },
                        [](double, double y, double) { return y; },
                        [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
  for (double v : b.value().data)
    if (v == 0.0) throw DomainError("div: division by zero");
  return detail::binary(a, b, "div", [](double x, double y) { return x / y; },
                        [](double, double y, double) { return 1.0 / y; },
                        [](double x, double y, double) { return -x / (y * y); });
}

/// Ties route the gradient to the first operand.
inline Var minimum(Var a, Var b) {
  return detail::binary(a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
                        [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
                        [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

inline Var maximum(Var a, Var b) {
  return detail::binary(a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
                        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
                        [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

inline Var scale(Var a, double c) {
  return detail::unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var relu(Var a) {
  return detail::unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double v : a.value().data)
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Subgradient at exactly 0 is 0.
inline Var abs(Var a) {
  return detail::unary(a, "abs", [](double x) { return std::fabs(x); },
                       [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, "sigmoid",
                       [](double x) {
                         if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                         const double e = std::exp(x);
                         return e / (1.0 + e);
                       },
                       [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  const Tensor& x = a.value();
  if (x.numel() == 0) throw DomainError("sum: empty reduction");
  double s = 0.0;
  for (double v : x.data) s += v;
  Tape& tape = *a.tape();
  tape.add_flops(flops::reduction(x.numel()));
  const int ia = a.id();
  return tape.record("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, int self) {
    const double g = t.grad_at(self).data[0];
    for (double& v : t.grad_buffer(ia).data) v += g;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.numel());
  Var s = sum(a);
  return scale(s, 1.0 / n);
}

/// Reduce a matrix along axis 0 (→ [1×cols]) or axis 1 (→ [rows×1]).
inline Var sum(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw DimensionError("sum: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape));
  if (x.rank() == 1) return sum(a);
  detail::require_matrix(x, "sum");
  const std::size_t n = x.shape[0], m = x.shape[1];
  Tensor out(axis == 0 ? Shape{1, m} : Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[axis == 0 ? j : i] += x.data[i * m + j];
  Tape& tape = *a.tape();
  tape.add_flops(flops::reduction(x.numel()));
  const int ia = a.id();
  return tape.record("sum_axis", std::move(out), {ia}, [ia, axis, n, m](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga.data[i * m + j] += g.data[axis == 0 ? j : i];
  });
}

inline Var mean(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw DimensionError("mean: axis out of range");
  const double count = static_cast<double>(x.rank() == 1 ? x.numel() : x.shape[axis]);
  return scale(sum(a, axis), 1.0 / count);
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along the last axis of (logits / temperature), max-stabilized.
inline Var softmax(Var a, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  const Tensor& x = a.value();
  const std::size_t j = x.cols(), n = x.rows();
  Tensor out(x.shape);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &x.data[r * j];
    double* yr = &out.data[r * j];
    const double mx = *std::max_element(xr, xr + j);
    double s = 0.0;
    for (std::size_t c = 0; c < j; ++c) s += (yr[c] = std::exp((xr[c] - mx) / temperature));
    for (std::size_t c = 0; c < j; ++c) yr[c] /= s;
  }
  Tape& tape = *a.tape();
  tape.add_flops(flops::softmax(n, j));
  const int ia = a.id();
  return tape.record("softmax", std::move(out), {ia}, [ia, n, j, temperature](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& y = t.value_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < j; ++c) dot += g.data[r * j + c] * y.data[r * j + c];
      for (std::size_t c = 0; c < j; ++c)
        ga.data[r * j + c] += y.data[r * j + c] * (g.data[r * j + c] - dot) / temperature;
    }
  });
}

/// Row-wise layer normalization (biased variance, epsilon 1e-5) followed by
/// a per-column affine map.
inline Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
  detail::same_tape(a, gain, "layer_norm");
  detail::same_tape(a, bias, "layer_norm");
  const Tensor& x = a.value();
  const std::size_t d = x.cols(), n = x.rows();
  if (d < 2) throw DimensionError("layer_norm: row width must be >= 2");
  if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias width mismatch");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(x.shape);
  std::vector<double> xhat(x.numel()), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &x.data[r * d];
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * inv_std[r];
      out.data[r * d + c] = gv.data[c] * xhat[r * d + c] + bv.data[c];
    }
  }
  Tape& tape = *a.tape();
  tape.add_flops(flops::layer_norm(n, d));
  const int ia = a.id(), ig = gain.id(), ib = bias.id();
  return tape.record("layer_norm", std::move(out), {ia, ig, ib},
                     [ia, ig, ib, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                       const Tensor& g = t.grad_at(self);
                       const Tensor& gv2 = t.value_of(ig);
                       if (t.requires_grad(ig)) {
                         Tensor& gg = t.grad_buffer(ig);
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < d; ++c) gg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                       }
                       if (t.requires_grad(ib)) {
                         Tensor& gb = t.grad_buffer(ib);
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < d; ++c) gb.data[c] += g.data[r * d + c];
                       }
                       if (t.requires_grad(ia)) {
                         Tensor& gx = t.grad_buffer(ia);
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < n; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dxh = g.data[r * d + c] * gv2.data[c];
                             m1 += dxh;
                             m2 += dxh * xhat[r * d + c];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dxh = g.data[r * d + c] * gv2.data[c];
                             gx.data[r * d + c] += inv_std[r] * (dxh - m1 - xhat[r * d + c] * m2);
                           }
                         }
                       }
                     });
}

/// Σ_i w_i · (−log softmax(logits_i)[label_i]) over rows of logits[n×C].
inline Var cross_entropy(Var logits, std::span<const int> labels, std::span<const double> weights) {
  const Tensor& x = logits.value();
  const std::size_t n = x.rows(), c = x.cols();
  if (labels.size() != n || weights.size() != n) throw DimensionError("cross_entropy: label/weight count mismatch");
  Tensor probs(x.shape);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw DimensionError("cross_entropy: label out of range");
    const double* xr = &x.data[r * c];
    const double mx = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (probs.data[r * c + k] = std::exp(xr[k] - mx));
    for (std::size_t k = 0; k < c; ++k) probs.data[r * c + k] /= s;
    total += weights[r] * (mx + std::log(s) - xr[labels[r]]);
  }
  Tape& tape = *logits.tape();
  tape.add_flops(flops::softmax(n, c));
  const int ia = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> w(weights.begin(), weights.end());
  return tape.record("cross_entropy", Tensor::scalar(total), {ia},
                     [ia, n, c, probs = std::move(probs), lab = std::move(lab), w = std::move(w)](Tape& t, int self) {
                       const double g = t.grad_at(self).data[0];
                       Tensor& ga = t.grad_buffer(ia);
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t k = 0; k < c; ++k) {
                           const double target = static_cast<int>(k) == lab[r] ? 1.0 : 0.0;
                           ga.data[r * c + k] += g * w[r] * (probs.data[r * c + k] - target);
                         }
                     });
}

// ---------------------------------------------------------------------------
// Data movement (no FLOPs)

inline Var gather_rows(Var a, std::span<const int> rows) {
  const Tensor& x = a.value();
  const std::size_t m = x.cols(), n = x.rows();
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= n) throw DimensionError("gather_rows: index out of range");
    std::copy_n(&x.data[rows[i] * m], m, &out.data[i * m]);
  }
  const int ia = a.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return a.tape()->record("gather_rows", std::move(out), {ia}, [ia, m, idx = std::move(idx)](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) ga.data[idx[i] * m + j] += g.data[i * m + j];
  });
}

/// Builds an [n_rows×cols] matrix whose row index[p][r] is row r of parts[p].
/// Every output row must be covered exactly once.
inline Var assemble_rows(std::span<const Var> parts, std::span<const std::vector<int>> index, std::size_t n_rows) {
  if (parts.empty() || parts.size() != index.size()) throw DimensionError("assemble_rows: parts/index mismatch");
  Tape& tape = *parts[0].tape();
  const std::size_t m = parts[0].cols();
  Tensor out({n_rows, m});
  std::vector<char> covered(n_rows, 0);
  std::vector<int> parent_ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    if (x.cols() != m || x.rows() != index[p].size()) throw DimensionError("assemble_rows: part shape mismatch");
    for (std::size_t r = 0; r < index[p].size(); ++r) {
      const int dst = index[p][r];
      if (dst < 0 || static_cast<std::size_t>(dst) >= n_rows || covered[dst])
        throw DimensionError("assemble_rows: invalid or duplicate row index");
      covered[dst] = 1;
      std::copy_n(&x.data[r * m], m, &out.data[dst * m]);
    }
    parent_ids.push_back(parts[p].id());
  }
  if (std::find(covered.begin(), covered.end(), 0) != covered.end())
    throw DimensionError("assemble_rows: rows left uncovered");
  std::vector<std::vector<int>> idx(index.begin(), index.end());
  return tape.record("assemble_rows", std::move(out), parent_ids,
                     [m, pids = parent_ids, idx = std::move(idx)](Tape& t, int self) {
                       const Tensor& g = t.grad_at(self);
                       for (std::size_t p = 0; p < pids.size(); ++p) {
                         if (!t.requires_grad(pids[p])) continue;
                         Tensor& gp = t.grad_buffer(pids[p]);
                         for (std::size_t r = 0; r < idx[p].size(); ++r)
                           for (std::size_t j = 0; j < m; ++j) gp.data[r * m + j] += g.data[idx[p][r] * m + j];
                       }
                     });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const std::size_t m = x.cols(), n = x.rows();
  if (begin >= end || end > m) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(&x.data[i * m + begin], w, &out.data[i * w]);
  const int ia = a.id();
  return a.tape()->record("slice_cols", std::move(out), {ia}, [ia, n, m, begin, w](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga.data[i * m + begin + j] += g.data[i * w + j];
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    if (p.rows() != n) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
    ids.push_back(p.id());
  }
  Tensor out({n, total});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(&x.data[i * widths[p]], widths[p], &out.data[i * total + off]);
    off += widths[p];
  }
  return parts[0].tape()->record("concat_cols", std::move(out), ids, [ids, widths, n, total](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    std::size_t o = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad_buffer(ids[p]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) gp.data[i * widths[p] + j] += g.data[i * total + o + j];
      }
      o += widths[p];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out(std::move(shape), a.value().data);
  const int ia = a.id();
  return a.tape()->record("reshape", std::move(out), {ia}, [ia](Tape& t, int self) {
    detail::accumulate(t.grad_buffer(ia), t.grad_at(self));
  });
}

/// Forward value is `hard`; the backward pass routes the gradient to `soft`
/// unchanged (straight-through estimator).
inline Var straight_through(Tensor hard, Var soft) {
  if (hard.shape != soft.shape()) throw DimensionError("straight_through: shape mismatch");
  const int is = soft.id();
  return soft.tape()->record("straight_through", std::move(hard), {is}, [is](Tape& t, int self) {
    detail::accumulate(t.grad_buffer(is), t.grad_at(self));
  });
}

// ---------------------------------------------------------------------------
// Verification oracle

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for a scalar function of a single tensor argument.
inline double finite_difference_check(const std::function<Var(Tape&, Var)>& f, const Tensor& theta,
                                      double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_check: h must be positive");
  Tape tape;
  Var x = tape.variable(theta);
  Var y = f(tape, x);
  if (!std::isfinite(y.item())) throw EvaluationError("finite_difference_check: non-finite f");
  tape.backward(y);
  const Tensor* g = tape.grad(x);
  auto eval = [&](const Tensor& at) {
    Tape t(false);
    const double v = f(t, t.constant(at)).item();
    if (!std::isfinite(v)) throw EvaluationError("finite_difference_check: non-finite f");
    return v;
  };
  double worst = 0.0;
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval(probe);
    probe.data[i] = orig - h;
    const double fm = eval(probe);
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = g ? g->data[i] : 0.0;
    worst = std::max(worst, std::fabs(analytic - numeric) / std::max(1.0, std::fabs(analytic)));
  }
  return worst;
}

/// Same check over a set of parameters; f must bind them with tape.param().
/// Parameters are perturbed in place and restored.
inline double finite_difference_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                      double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_check: h must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var y = f(tape);
    if (!std::isfinite(y.item())) throw EvaluationError("finite_difference_check: non-finite f");
    tape.backward(y);
    for (Parameter* p : params) {
      const Tensor* g = tape.grad_of(*p);
      analytic.push_back(g ? *g : Tensor(p->value.shape, 0.0));
    }
  }
  auto eval = [&] {
    Tape t(false);
    const double v = f(t).item();
    if (!std::isfinite(v)) throw EvaluationError("finite_difference_check: non-finite f");
    return v;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = params[k]->value;
    for (std::size_t i = 0; i < v.numel(); ++i) {
      const double orig = v.data[i];
      v.data[i] = orig + h;
      const double fp = eval();
      v.data[i] = orig - h;
      const double fm = eval();
      v.data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k].data[i];
      worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
  }
  return worst;
}

}  // namespace dpp
