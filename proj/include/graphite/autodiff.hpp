/*
 * Copyright 2026 The GRAPHITE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Define-by-run reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied to its Vars. Calling backward() on a
// scalar Var walks the tape in reverse append order and accumulates adjoints;
// leaves created with Tape::param() forward their adjoint into the grad
// buffer of the Tensor they were created from. Vectors are 1xN or Nx1
// matrices and scalars are 1x1.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "graphite/error.hpp"

namespace graphite {

/// Dense row-major matrix of doubles with an optional gradient buffer.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      std::ostringstream os;
      os << "Tensor: " << data.size() << " values do not fill shape " << r
         << "x" << c;
      throw ValidationError(os.str());
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(n, 1, std::move(v));
  }

  std::array<std::size_t, 2> shape() const { return {rows, cols}; }
  std::size_t size() const { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  void zero_grad() { grad.reset(); }
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}
inline std::string shape_str(const Tensor& t) { return shape_str(t.rows, t.cols); }

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double item() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a value that never receives gradient writes.
  Var constant(Tensor value) {
    value.grad.reset();
    return push(std::move(value), {}, nullptr, false, nullptr);
  }

  /// Registers a learnable tensor. Repeated registration of the same tensor
  /// returns the same leaf.
  Var param(Tensor& t) {
    if (auto it = params_.find(&t); it != params_.end()) return Var(this, it->second);
    Tensor copy(t.rows, t.cols, t.data);
    Var v = push(std::move(copy), {}, nullptr, true, &t);
    params_.emplace(&t, v.id());
    return v;
  }

  /// Records the result of an operation. `fn` receives the node index and
  /// must accumulate into the adjoints of the node's inputs.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(fn) : nullptr,
                needs, nullptr);
  }

  /// Reverse sweep from a scalar loss. Node adjoints are reset first;
  /// registered parameter grads accumulate across calls.
  void backward(Var loss) {
    if (&loss.tape() != this) throw ValidationError("backward: loss belongs to another tape");
    const Tensor& lv = nodes_[loss.id()].value;
    if (lv.size() != 1) {
      throw ValidationError("backward: loss must be scalar, got shape " + shape_str(lv));
    }
    for (auto& n : nodes_) n.grad.clear();
    adjoint(loss.id())[0] = 1.0;
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, k);
      if (n.param != nullptr) {
        auto& g = n.param->grad;
        if (!g || g->size() != n.grad.size()) g = std::vector<double>(n.grad.size(), 0.0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
      }
    }
  }

  /// Adjoint of `v` from the last backward(); zeros if it received none.
  std::vector<double> grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Accessors used by operation backward functions.
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<double>& out_grad(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Mutable adjoint buffer, allocated on first use.
  std::vector<double>& adjoint(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor* param = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs,
           Tensor* param) {
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(fn), needs, param});
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps references to earlier nodes stable while recording.
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ValidationError("item: expected scalar, got " + shape_str(v));
  return v.data[0];
}

namespace detail {

inline Tape& same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ValidationError(std::string(op) + ": operands on different tapes");
  return a.tape();
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                        shape_str(b));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows != b.rows || a.cols != b.cols) shape_error(op, a, b);
}

// Adds `src` into the adjoint of node `id` when that node takes gradients.
inline void accumulate(Tape& t, std::size_t id, std::span<const double> src) {
  if (!t.requires_grad(id)) return;
  auto& g = t.adjoint(id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = fwd(x.data[i]);
  const std::size_t in = a.id();
  return a.tape().record(std::move(y), {in}, [in, deriv](Tape& t, std::size_t self) {
    if (!t.requires_grad(in)) return;
    const auto& xv = t.value(in).data;
    const auto& yv = t.value(self).data;
    const auto& gy = t.out_grad(self);
    auto& gx = t.adjoint(in);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace detail

/// C = A * B.
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols != B.rows) detail::shape_error("matmul", A, B);
  const std::size_t m = A.rows, k = A.cols, n = B.cols;
  Tensor C(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(C), {ia, ib}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const auto& G = tp.out_grad(self);
    const auto& Av = tp.value(ia).data;
    const auto& Bv = tp.value(ib).data;
    if (tp.requires_grad(ia)) {
      auto& gA = tp.adjoint(ia);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = Bv.data() + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          gA[i * k + p] += s;
        }
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gB = tp.adjoint(ib);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Av[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gB.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape("add", a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    detail::accumulate(tp, ia, tp.out_grad(self));
    detail::accumulate(tp, ib, tp.out_grad(self));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape("sub", a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    detail::accumulate(tp, ia, g);
    if (tp.requires_grad(ib)) {
      auto& gb = tp.adjoint(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape("mul", a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(ia).data;
    const auto& bv = tp.value(ib).data;
    if (tp.requires_grad(ia)) {
      auto& ga = tp.adjoint(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.adjoint(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Elementwise quotient a / b.
inline Var div(Var a, Var b) {
  Tape& t = detail::same_tape("div", a, b);
  detail::require_same_shape("div", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] /= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& bv = tp.value(ib).data;
    const auto& yv = tp.value(self).data;
    if (tp.requires_grad(ia)) {
      auto& ga = tp.adjoint(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.adjoint(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    }
  });
}

/// A (m x n) + b (1 x n), b added to every row.
inline Var add_bias(Var a, Var b) {
  Tape& t = detail::same_tape("add_bias", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rows != 1 || B.cols != A.cols) detail::shape_error("add_bias", A, B);
  Tensor y = A;
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) y.data[i * A.cols + j] += B.data[j];
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t m = A.rows, n = A.cols;
  return t.record(std::move(y), {ia, ib}, [ia, ib, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    detail::accumulate(tp, ia, g);
    if (tp.requires_grad(ib)) {
      auto& gb = tp.adjoint(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

/// A (m x n) with row i scaled by c (m x 1).
inline Var mul_col(Var a, Var c) {
  Tape& t = detail::same_tape("mul_col", a, c);
  const Tensor& A = a.value();
  const Tensor& C = c.value();
  if (C.cols != 1 || C.rows != A.rows) detail::shape_error("mul_col", A, C);
  Tensor y = A;
  const std::size_t m = A.rows, n = A.cols;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data[i * n + j] *= C.data[i];
  const std::size_t ia = a.id(), ic = c.id();
  return t.record(std::move(y), {ia, ic}, [ia, ic, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(ia).data;
    const auto& cv = tp.value(ic).data;
    if (tp.requires_grad(ia)) {
      auto& ga = tp.adjoint(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * cv[i];
    }
    if (tp.requires_grad(ic)) {
      auto& gc = tp.adjoint(ic);
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * av[i * n + j];
        gc[i] += s;
      }
    }
  });
}

inline Var scale(Var a, double k) {
  return detail::unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

inline Var add_scalar(Var a, double k) {
  return detail::unary(a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var leaky_relu(Var a, double slope = 0.2) {
  return detail::unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var relu(Var a) { return leaky_relu(a, 0.0); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows, n = A.cols;
  Tensor y(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data[j * m + i] = A.data[i * n + j];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.out_grad(self);
    auto& ga = tp.adjoint(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

/// Sum of all entries, 1x1.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const double g = tp.out_grad(self)[0];
    for (double& x : tp.adjoint(ia)) x += g;
  });
}

/// Mean of all entries, 1x1.
inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ValidationError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Column means (reduction over axis 0), 1 x n.
inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  if (A.rows == 0) throw ValidationError("mean_rows: no rows");
  const std::size_t m = A.rows, n = A.cols;
  Tensor y(1, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data[j] += A.data[i * n + j];
  for (double& v : y.data) v /= static_cast<double>(m);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.out_grad(self);
    auto& ga = tp.adjoint(ia);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

/// Row sums (reduction over the last axis), m x 1.
inline Var sum_cols(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows, n = A.cols;
  Tensor y(m, 1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data[i] += A.data[i * n + j];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.out_grad(self);
    auto& ga = tp.adjoint(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
  });
}

/// Concatenation along the last axis; all parts need equal row counts.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ValidationError("concat_cols: operands on different tapes");
    if (p.rows() != m) detail::shape_error("concat_cols", parts.front().value(), p.value());
    n += p.cols();
  }
  Tensor y(m, n);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(P.data.data() + i * P.cols, P.cols, y.data.data() + i * n + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += P.cols;
  }
  return t.record(std::move(y), ids, [ids, offsets, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      auto& gp = tp.adjoint(ids[k]);
      const std::size_t w = tp.value(ids[k]).cols;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * n + offsets[k] + j];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Concatenation along axis 0; all parts need equal column counts.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ValidationError("concat_rows: operands on different tapes");
    if (p.cols() != n) detail::shape_error("concat_rows", parts.front().value(), p.value());
    m += p.rows();
  }
  Tensor y(m, n);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& d = p.value().data;
    std::copy(d.begin(), d.end(), y.data.begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += d.size();
  }
  return t.record(std::move(y), ids, [ids, offsets](Tape& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      auto& gp = tp.adjoint(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

namespace detail {

// Visits the index lists of every softmax group: rows (axis 1) or columns
// (axis 0) of an m x n matrix.
template <class F>
void for_each_axis_group(std::size_t m, std::size_t n, int axis, F f) {
  std::vector<std::size_t> idx;
  if (axis == 1) {
    idx.resize(n);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) idx[j] = i * n + j;
      f(idx);
    }
  } else {
    idx.resize(m);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) idx[i] = i * n + j;
      f(idx);
    }
  }
}

inline void check_axis(const char* op, const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw ValidationError(std::string(op) + ": axis must be 0 or 1");
  if ((axis == 1 ? x.cols : x.rows) == 0) {
    throw ValidationError(std::string(op) + ": empty axis in shape " + shape_str(x));
  }
}

}  // namespace detail

/// Softmax along axis 0 (per column) or 1 (per row), max-shifted.
inline Var softmax(Var a, int axis) {
  const Tensor& x = a.value();
  detail::check_axis("softmax", x, axis);
  Tensor y(x.rows, x.cols);
  detail::for_each_axis_group(x.rows, x.cols, axis, [&](const std::vector<std::size_t>& g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto i : g) mx = std::max(mx, x.data[i]);
    double s = 0.0;
    for (auto i : g) s += (y.data[i] = std::exp(x.data[i] - mx));
    for (auto i : g) y.data[i] /= s;
  });
  const std::size_t ia = a.id(), m = x.rows, n = x.cols;
  return a.tape().record(std::move(y), {ia}, [ia, m, n, axis](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& gy = tp.out_grad(self);
    const auto& yv = tp.value(self).data;
    auto& gx = tp.adjoint(ia);
    detail::for_each_axis_group(m, n, axis, [&](const std::vector<std::size_t>& g) {
      double dot = 0.0;
      for (auto i : g) dot += gy[i] * yv[i];
      for (auto i : g) gx[i] += yv[i] * (gy[i] - dot);
    });
  });
}

/// log(softmax(a)) along an axis, computed as x - logsumexp(x).
inline Var log_softmax(Var a, int axis) {
  const Tensor& x = a.value();
  detail::check_axis("log_softmax", x, axis);
  Tensor y(x.rows, x.cols);
  detail::for_each_axis_group(x.rows, x.cols, axis, [&](const std::vector<std::size_t>& g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto i : g) mx = std::max(mx, x.data[i]);
    double s = 0.0;
    for (auto i : g) s += std::exp(x.data[i] - mx);
    const double lse = mx + std::log(s);
    for (auto i : g) y.data[i] = x.data[i] - lse;
  });
  const std::size_t ia = a.id(), m = x.rows, n = x.cols;
  return a.tape().record(std::move(y), {ia}, [ia, m, n, axis](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& gy = tp.out_grad(self);
    const auto& yv = tp.value(self).data;
    auto& gx = tp.adjoint(ia);
    detail::for_each_axis_group(m, n, axis, [&](const std::vector<std::size_t>& g) {
      double total = 0.0;
      for (auto i : g) total += gy[i];
      for (auto i : g) gx[i] += gy[i] - std::exp(yv[i]) * total;
    });
  });
}

/// Softmax of an E x 1 column within groups given by `segment[e]` in
/// [0, num_segments). Empty segments are allowed.
inline Var segment_softmax(Var a, std::vector<std::size_t> segment, std::size_t num_segments) {
  const Tensor& x = a.value();
  if (x.cols != 1 || x.rows != segment.size()) {
    throw ValidationError("segment_softmax: expected " + std::to_string(segment.size()) +
                          "x1 logits, got " + shape_str(x));
  }
  std::vector<double> mx(num_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < segment.size(); ++e) {
    if (segment[e] >= num_segments) throw ValidationError("segment_softmax: segment id out of range");
    mx[segment[e]] = std::max(mx[segment[e]], x.data[e]);
  }
  std::vector<double> denom(num_segments, 0.0);
  Tensor y(x.rows, 1);
  for (std::size_t e = 0; e < segment.size(); ++e) {
    y.data[e] = std::exp(x.data[e] - mx[segment[e]]);
    denom[segment[e]] += y.data[e];
  }
  for (std::size_t e = 0; e < segment.size(); ++e) y.data[e] /= denom[segment[e]];
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(y), {ia},
      [ia, seg = std::move(segment), num_segments](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const auto& gy = tp.out_grad(self);
        const auto& yv = tp.value(self).data;
        std::vector<double> dot(num_segments, 0.0);
        for (std::size_t e = 0; e < seg.size(); ++e) dot[seg[e]] += gy[e] * yv[e];
        auto& gx = tp.adjoint(ia);
        for (std::size_t e = 0; e < seg.size(); ++e) gx[e] += yv[e] * (gy[e] - dot[seg[e]]);
      });
}

/// Row gather: out[r] = a[index[r]].
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  const std::size_t n = A.cols;
  Tensor y(index.size(), n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= A.rows) {
      throw ValidationError("gather_rows: index " + std::to_string(index[r]) +
                            " out of range for shape " + shape_str(A));
    }
    std::copy_n(A.data.data() + index[r] * n, n, y.data.data() + r * n);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, n, idx = std::move(index)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.out_grad(self);
    auto& ga = tp.adjoint(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
  });
}

/// Row scatter-add: out (num_rows x n), out[index[r]] += a[r].
inline Var scatter_add_rows(Var a, std::vector<std::size_t> index, std::size_t num_rows) {
  const Tensor& A = a.value();
  if (A.rows != index.size()) {
    throw ValidationError("scatter_add_rows: " + std::to_string(index.size()) +
                          " indices for shape " + shape_str(A));
  }
  const std::size_t n = A.cols;
  Tensor y(num_rows, n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= num_rows) throw ValidationError("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) y.data[index[r] * n + j] += A.data[r * n + j];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, n, idx = std::move(index)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.out_grad(self);
    auto& ga = tp.adjoint(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[idx[r] * n + j];
  });
}

/// Row-wise L2 normalization x / sqrt(|x|^2 + eps).
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows, n = A.cols;
  Tensor y(m, n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += A.data[i * n + j] * A.data[i * n + j];
    norms[i] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < n; ++j) y.data[i * n + j] = A.data[i * n + j] / norms[i];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, m, n, norms = std::move(norms)](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(ia)) return;
                           const auto& g = tp.out_grad(self);
                           const auto& yv = tp.value(self).data;
                           auto& ga = tp.adjoint(ia);
                           for (std::size_t i = 0; i < m; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yv[i * n + j];
                             for (std::size_t j = 0; j < n; ++j)
                               ga[i * n + j] += (g[i * n + j] - yv[i * n + j] * dot) / norms[i];
                           }
                         });
}

/// Maximum relative error between reverse-mode gradients of `f` and central
/// differences, over every entry of every tensor in `params`. `f` must build
/// its loss on the tape it is given and register the parameters with
/// Tape::param().
inline double grad_check(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params,
                         double step = 1e-5) {
  if (!(step > 0.0)) throw ValidationError("grad_check: step must be positive");
  for (Tensor* p : params) p->zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.item())) throw RuntimeError("grad_check: non-finite loss at base point");
    tape.backward(loss);
    for (Tensor* p : params) {
      analytic.push_back(p->grad ? *p->grad : std::vector<double>(p->size(), 0.0));
      p->zero_grad();
    }
  }
  auto eval = [&] {
    Tape tape;
    return f(tape).item();
  };
  double worst = 0.0;
  std::size_t flat = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    for (std::size_t i = 0; i < p.size(); ++i, ++flat) {
      const double saved = p.data[i];
      p.data[i] = saved + step;
      const double up = eval();
      p.data[i] = saved - step;
      const double down = eval();
      p.data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
        throw RuntimeError("grad_check: non-finite value at parameter index " +
                           std::to_string(flat) + " (tensor " + std::to_string(k) + ", entry " +
                           std::to_string(i) + ")");
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline double grad_check(const std::function<Var(Tape&)>& f, std::initializer_list<Tensor*> params,
                         double step = 1e-5) {
  return grad_check(f, std::span<Tensor* const>(params.begin(), params.size()), step);
}

}  // namespace graphite
