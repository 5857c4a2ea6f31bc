#pragma once

// Reverse-mode differentiation over Matrix-valued nodes. A Tape records nodes in
// creation order, which is a valid topological order; backward() walks it in
// reverse and accumulates leaf gradients into the ParamStore slots.

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ega/numerics/matrix.hpp"
#include "ega/numerics/params.hpp"

namespace ega {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) { return push(std::move(m), false, nullptr); }

  // Leaf bound to a stored tensor. Frozen tensors and buffers enter as constants.
  Var param(ParamStore& store, const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return Var{this, it->second};
    Tensor& t = store.at(name);
    Var v = push(t.value, t.trainable(), nullptr);
    nodes_[v.id].param = &t;
    bound_.emplace(name, v.id);
    return v;
  }

  const Matrix& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw ShapeError("Tape::scalar on " + m.shape_str());
    return m(0, 0);
  }
  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }
  // Gradient of the last backward() with respect to `v`; zeros if none reached it.
  Matrix grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.grad.empty() && !n.value.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void check(Var v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw GraphError("Tape: variable does not belong to this tape");
  }

  Var push(Matrix value, bool requires_grad, Backprop backprop) {
    ensure_finite(value, "Tape");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void accumulate(std::size_t id, const Matrix& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    n.grad += delta;
  }
  bool needs(std::size_t id) const noexcept { return nodes_[id].requires_grad; }

  // Accumulates d(scale*loss)/d(param) into every bound trainable tensor.
  void backward(Var loss, double scale = 1.0) {
    check(loss);
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ShapeError("Tape::backward: loss must be 1x1, got " + lv.shape_str());
    for (auto& n : nodes_) n.grad = Matrix();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Matrix(1, 1, scale);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backprop) {
        // Parents always precede their children, so this reference stays valid.
        const Matrix& g = n.grad;
        n.backprop(*this, g);
      } else if (n.param != nullptr) {
        n.param->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
    Tensor* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> bound_;
};

namespace ad {

namespace detail {

inline Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw GraphError("ad: unbound variable");
  a.tape->check(a);
  return *a.tape;
}
inline Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw GraphError("ad: operands belong to different tapes");
  t.check(b);
  return t;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  Matrix out(A.rows(), B.cols());
  if (A.cols() != B.rows()) throw ShapeError("matmul: " + A.shape_str() + " x " + B.shape_str());
  gemm_accumulate(A, false, B, false, out);
  const bool rg = t.needs(a.id) || t.needs(b.id);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs(a.id)) {
      const Matrix& Bv = tp.value(b);
      Matrix da(g.rows(), Bv.rows());
      gemm_accumulate(g, false, Bv, true, da);
      tp.accumulate(a.id, da);
    }
    if (tp.needs(b.id)) {
      const Matrix& Av = tp.value(a);
      Matrix db(Av.cols(), g.cols());
      gemm_accumulate(Av, true, g, false, db);
      tp.accumulate(b.id, db);
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  Matrix out = t.value(a);
  out += t.value(b);
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g);
    tp.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  Matrix out = t.value(a);
  out -= t.value(b);
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g);
    if (tp.needs(b.id)) tp.accumulate(b.id, g * -1.0);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  A.require_same_shape(B, "mul");
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = A.data()[i] * B.data()[i];
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [a, b](Tape& tp, const Matrix& g) {
    const Matrix& Av = tp.value(a);
    const Matrix& Bv = tp.value(b);
    if (tp.needs(a.id)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] * Bv.data()[i];
      tp.accumulate(a.id, d);
    }
    if (tp.needs(b.id)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] * Av.data()[i];
      tp.accumulate(b.id, d);
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& t = detail::tape_of(a);
  Matrix out = t.value(a) * s;
  return t.push(std::move(out), t.needs(a.id),
                [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a.id, g * s); });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = detail::tape_of(a);
  Matrix out = t.value(a);
  for (double& x : out.data()) x += s;
  return t.push(std::move(out), t.needs(a.id),
                [a](Tape& tp, const Matrix& g) { tp.accumulate(a.id, g); });
}

// 1 - a
inline Var one_minus(Var a) { return add_scalar(scale(a, -1.0), 1.0); }

// x (r x c) times a 1x1 variable.
inline Var mul_scalar(Var x, Var s) {
  Tape& t = detail::tape_of(x, s);
  const Matrix& S = t.value(s);
  if (S.rows() != 1 || S.cols() != 1) throw ShapeError("mul_scalar: scalar is " + S.shape_str());
  Matrix out = t.value(x) * S(0, 0);
  return t.push(std::move(out), t.needs(x.id) || t.needs(s.id), [x, s](Tape& tp, const Matrix& g) {
    if (tp.needs(x.id)) tp.accumulate(x.id, g * tp.value(s)(0, 0));
    if (tp.needs(s.id)) {
      const Matrix& X = tp.value(x);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * X.data()[i];
      tp.accumulate(s.id, Matrix(1, 1, acc));
    }
  });
}

// x (r x c) + row (1 x c) broadcast over rows.
inline Var add_row(Var x, Var row) {
  Tape& t = detail::tape_of(x, row);
  const Matrix& X = t.value(x);
  const Matrix& R = t.value(row);
  if (R.rows() != 1 || R.cols() != X.cols())
    throw ShapeError("add_row: " + X.shape_str() + " + " + R.shape_str());
  Matrix out = X;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += R(0, j);
  return t.push(std::move(out), t.needs(x.id) || t.needs(row.id),
                [x, row](Tape& tp, const Matrix& g) {
                  tp.accumulate(x.id, g);
                  if (tp.needs(row.id)) {
                    Matrix d(1, g.cols());
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
                    tp.accumulate(row.id, d);
                  }
                });
}

// x (r x c) scaled row-wise by col (r x 1).
inline Var mul_col(Var x, Var col) {
  Tape& t = detail::tape_of(x, col);
  const Matrix& X = t.value(x);
  const Matrix& C = t.value(col);
  if (C.cols() != 1 || C.rows() != X.rows())
    throw ShapeError("mul_col: " + X.shape_str() + " * " + C.shape_str());
  Matrix out = X;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= C(i, 0);
  return t.push(std::move(out), t.needs(x.id) || t.needs(col.id),
                [x, col](Tape& tp, const Matrix& g) {
                  const Matrix& Xv = tp.value(x);
                  const Matrix& Cv = tp.value(col);
                  if (tp.needs(x.id)) {
                    Matrix d = g;
                    for (std::size_t i = 0; i < d.rows(); ++i)
                      for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) *= Cv(i, 0);
                    tp.accumulate(x.id, d);
                  }
                  if (tp.needs(col.id)) {
                    Matrix d(Cv.rows(), 1);
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) d(i, 0) += g(i, j) * Xv(i, j);
                    tp.accumulate(col.id, d);
                  }
                });
}

// x (r x c) + col (r x 1) broadcast over columns.
inline Var add_col(Var x, Var col) {
  Tape& t = detail::tape_of(x, col);
  const Matrix& X = t.value(x);
  const Matrix& C = t.value(col);
  if (C.cols() != 1 || C.rows() != X.rows())
    throw ShapeError("add_col: " + X.shape_str() + " + " + C.shape_str());
  Matrix out = X;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += C(i, 0);
  return t.push(std::move(out), t.needs(x.id) || t.needs(col.id),
                [x, col](Tape& tp, const Matrix& g) {
                  tp.accumulate(x.id, g);
                  if (tp.needs(col.id)) {
                    Matrix d(g.rows(), 1);
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) d(i, 0) += g(i, j);
                    tp.accumulate(col.id, d);
                  }
                });
}

inline Var sigmoid(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out = t.value(a);
  for (double& x : out.data()) x = ega::sigmoid(x);
  const std::size_t self = t.size();
  return t.push(std::move(out), t.needs(a.id), [a, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(Var{&tp, self});
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double s = y.data()[i];
      d.data()[i] = g.data()[i] * s * (1.0 - s);
    }
    tp.accumulate(a.id, d);
  });
}

inline Var exp(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out = t.value(a);
  for (double& x : out.data()) x = std::exp(x);
  const std::size_t self = t.size();
  return t.push(std::move(out), t.needs(a.id), [a, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(Var{&tp, self});
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] * y.data()[i];
    tp.accumulate(a.id, d);
  });
}

inline Var log(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out = t.value(a);
  for (double& x : out.data()) {
    if (!(x > 0.0)) throw NumericError("ad::log: non-positive argument");
    x = std::log(x);
  }
  return t.push(std::move(out), t.needs(a.id), [a](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] / x.data()[i];
    tp.accumulate(a.id, d);
  });
}

inline Var transpose(Var a) {
  Tape& t = detail::tape_of(a);
  return t.push(t.value(a).transposed(), t.needs(a.id), [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g.transposed());
  });
}

inline Var row_softmax(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out = ega::row_softmax(t.value(a));
  const std::size_t self = t.size();
  return t.push(std::move(out), t.needs(a.id), [a, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(Var{&tp, self});
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - dot);
    }
    tp.accumulate(a.id, d);
  });
}

inline Var row_log_softmax(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    auto r = X.row(i);
    if (r.empty()) continue;
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = r[j] - lse;
  }
  const std::size_t self = t.size();
  return t.push(std::move(out), t.needs(a.id), [a, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(Var{&tp, self});
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
    }
    tp.accumulate(a.id, d);
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  if (begin + count > X.cols())
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") of " + X.shape_str());
  Matrix out(X.rows(), count);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = X(i, begin + j);
  return t.push(std::move(out), t.needs(a.id), [a, begin, count](Tape& tp, const Matrix& g) {
    const Matrix& Xv = tp.value(a);
    Matrix d(Xv.rows(), Xv.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) d(i, begin + j) = g(i, j);
    tp.accumulate(a.id, d);
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  if (begin + count > X.rows())
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") of " + X.shape_str());
  Matrix out(count, X.cols());
  std::copy_n(X.data().begin() + static_cast<std::ptrdiff_t>(begin * X.cols()), count * X.cols(),
              out.data().begin());
  return t.push(std::move(out), t.needs(a.id), [a, begin](Tape& tp, const Matrix& g) {
    const Matrix& Xv = tp.value(a);
    Matrix d(Xv.rows(), Xv.cols());
    std::copy(g.data().begin(), g.data().end(),
              d.data().begin() + static_cast<std::ptrdiff_t>(begin * Xv.cols()));
    tp.accumulate(a.id, d);
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = detail::tape_of(parts[0]);
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::tape_of(parts[0], p);
    if (t.value(p).rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + t.value(p).shape_str());
    cols += t.value(p).cols();
    rg = rg || t.needs(p.id);
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& P = t.value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out(i, off + j) = P(i, j);
    off += P.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), rg, [ps](Tape& tp, const Matrix& g) {
    std::size_t o = 0;
    for (Var p : ps) {
      const std::size_t c = tp.value(p).cols();
      if (tp.needs(p.id)) {
        Matrix d(g.rows(), c);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) d(i, j) = g(i, o + j);
        tp.accumulate(p.id, d);
      }
      o += c;
    }
  });
}
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = detail::tape_of(parts[0]);
  const std::size_t cols = t.value(parts[0]).cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::tape_of(parts[0], p);
    if (t.value(p).cols() != cols)
      throw ShapeError("concat_rows: column mismatch " + t.value(p).shape_str());
    rows += t.value(p).rows();
    rg = rg || t.needs(p.id);
  }
  Matrix out(rows, cols);
  auto it = out.data().begin();
  for (Var p : parts) it = std::copy(t.value(p).data().begin(), t.value(p).data().end(), it);
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), rg, [ps](Tape& tp, const Matrix& g) {
    std::size_t r0 = 0;
    for (Var p : ps) {
      const std::size_t r = tp.value(p).rows();
      if (tp.needs(p.id)) {
        Matrix d(r, g.cols());
        std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(r0 * g.cols()), r * g.cols(),
                    d.data().begin());
        tp.accumulate(p.id, d);
      }
      r0 += r;
    }
  });
}
inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

// out.row(i) = x.row(index[i]); gradients scatter-add back.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& t = detail::tape_of(x);
  const Matrix& X = t.value(x);
  Matrix out(index.size(), X.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= X.rows())
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                       X.shape_str());
    std::copy(X.row(index[i]).begin(), X.row(index[i]).end(), out.row(i).begin());
  }
  return t.push(std::move(out), t.needs(x.id), [x, index = std::move(index)](Tape& tp, const Matrix& g) {
    const Matrix& Xv = tp.value(x);
    Matrix d(Xv.rows(), Xv.cols());
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) d(index[i], j) += g(i, j);
    tp.accumulate(x.id, d);
  });
}

// Repeats a 1 x c row n times.
inline Var broadcast_rows(Var x, std::size_t n) {
  Tape& t = detail::tape_of(x);
  const Matrix& X = t.value(x);
  if (X.rows() != 1) throw ShapeError("broadcast_rows: expects a row, got " + X.shape_str());
  Matrix out(n, X.cols());
  for (std::size_t i = 0; i < n; ++i) std::copy(X.data().begin(), X.data().end(), out.row(i).begin());
  return t.push(std::move(out), t.needs(x.id), [x](Tape& tp, const Matrix& g) {
    Matrix d(1, g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
    tp.accumulate(x.id, d);
  });
}

inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  double s = 0.0;
  for (double x : t.value(a).data()) s += x;
  return t.push(Matrix(1, 1, s), t.needs(a.id), [a](Tape& tp, const Matrix& g) {
    const Matrix& X = tp.value(a);
    tp.accumulate(a.id, Matrix(X.rows(), X.cols(), g(0, 0)));
  });
}

// Each column divided by its sum; an all-zero column stays zero.
inline Var normalize_cols(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  std::vector<double> sums(X.cols(), 0.0);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) sums[j] += X(i, j);
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) = sums[j] != 0.0 ? X(i, j) / sums[j] : 0.0;
  const std::size_t self = t.size();
  return t.push(std::move(out), t.needs(a.id), [a, self, sums](Tape& tp, const Matrix& g) {
    const Matrix& Y = tp.value(Var{&tp, self});
    Matrix d(Y.rows(), Y.cols());
    for (std::size_t j = 0; j < Y.cols(); ++j) {
      if (sums[j] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t i = 0; i < Y.rows(); ++i) dot += g(i, j) * Y(i, j);
      for (std::size_t i = 0; i < Y.rows(); ++i) d(i, j) = (g(i, j) - dot) / sums[j];
    }
    tp.accumulate(a.id, d);
  });
}

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// Dice activation normalized by fixed (running) statistics:
//   p = sigmoid((x - mean) / sqrt(var + eps)),  y = p*x + (1-p)*alpha*x.
inline Var dice(Var x, Var alpha, std::span<const double> mean, std::span<const double> var,
                double eps) {
  Tape& t = detail::tape_of(x, alpha);
  const Matrix& X = t.value(x);
  const Matrix& A = t.value(alpha);
  const std::size_t c = X.cols();
  if (A.rows() != 1 || A.cols() != c || mean.size() != c || var.size() != c)
    throw ShapeError("dice: channel mismatch, input " + X.shape_str() + " alpha " + A.shape_str());
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) {
    const double v = var[j] + eps;
    if (!(v > 0.0)) throw NumericError("dice: var + eps must be positive");
    inv_std[j] = 1.0 / std::sqrt(v);
  }
  std::vector<double> mu(mean.begin(), mean.end());
  Matrix out(X.rows(), c);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double s = X(i, j);
      const double p = ega::sigmoid((s - mu[j]) * inv_std[j]);
      out(i, j) = p * s + (1.0 - p) * A(0, j) * s;
    }
  return t.push(std::move(out), t.needs(x.id) || t.needs(alpha.id),
                [x, alpha, mu, inv_std](Tape& tp, const Matrix& g) {
                  const Matrix& Xv = tp.value(x);
                  const Matrix& Av = tp.value(alpha);
                  Matrix dx(Xv.rows(), Xv.cols());
                  Matrix da(1, Xv.cols());
                  for (std::size_t i = 0; i < Xv.rows(); ++i)
                    for (std::size_t j = 0; j < Xv.cols(); ++j) {
                      const double s = Xv(i, j);
                      const double p = ega::sigmoid((s - mu[j]) * inv_std[j]);
                      const double a = Av(0, j);
                      const double dp = p * (1.0 - p) * inv_std[j];
                      dx(i, j) = g(i, j) * (p + (1.0 - p) * a + s * (1.0 - a) * dp);
                      da(0, j) += g(i, j) * (1.0 - p) * s;
                    }
                  tp.accumulate(x.id, dx);
                  tp.accumulate(alpha.id, da);
                });
}

// Per-row layer normalization with learnable gain and bias (1 x c each).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = detail::tape_of(x, gain);
  detail::tape_of(x, bias);
  const Matrix& X = t.value(x);
  const Matrix& G = t.value(gain);
  const Matrix& B = t.value(bias);
  const std::size_t c = X.cols();
  if (G.rows() != 1 || G.cols() != c || B.rows() != 1 || B.cols() != c)
    throw ShapeError("layer_norm: parameter shape mismatch for input " + X.shape_str());
  Matrix xhat(X.rows(), c);
  std::vector<double> rstd(X.rows());
  Matrix out(X.rows(), c);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += X(i, j);
    m /= static_cast<double>(c);
    double v = 0.0;
    for (std::size_t j = 0; j < c; ++j) v += (X(i, j) - m) * (X(i, j) - m);
    v /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(v + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (X(i, j) - m) * rstd[i];
      out(i, j) = G(0, j) * xhat(i, j) + B(0, j);
    }
  }
  const bool rg = t.needs(x.id) || t.needs(gain.id) || t.needs(bias.id);
  return t.push(std::move(out), rg,
                [x, gain, bias, xhat = std::move(xhat), rstd](Tape& tp, const Matrix& g) {
                  const Matrix& Gv = tp.value(gain);
                  const std::size_t c = g.cols();
                  if (tp.needs(gain.id) || tp.needs(bias.id)) {
                    Matrix dg(1, c), db(1, c);
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        dg(0, j) += g(i, j) * xhat(i, j);
                        db(0, j) += g(i, j);
                      }
                    tp.accumulate(gain.id, dg);
                    tp.accumulate(bias.id, db);
                  }
                  if (tp.needs(x.id)) {
                    Matrix dx(g.rows(), c);
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double gh = g(i, j) * Gv(0, j);
                        s1 += gh;
                        s2 += gh * xhat(i, j);
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const double gh = g(i, j) * Gv(0, j);
                        dx(i, j) = rstd[i] * (gh - inv_c * s1 - xhat(i, j) * inv_c * s2);
                      }
                    }
                    tp.accumulate(x.id, dx);
                  }
                });
}

inline constexpr double kProbClamp = 1e-7;

// Summed binary cross-entropy of probabilities `p` against 0/1 `labels` (same
// shape). Probabilities are clamped to [1e-7, 1-1e-7]; clamped entries pass no gradient.
inline Var bce(Var p, const Matrix& labels) {
  Tape& t = detail::tape_of(p);
  const Matrix& P = t.value(p);
  P.require_same_shape(labels, "bce");
  double loss = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double q = std::clamp(P.data()[i], kProbClamp, 1.0 - kProbClamp);
    const double y = labels.data()[i];
    loss -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
  }
  return t.push(Matrix(1, 1, loss), t.needs(p.id), [p, labels](Tape& tp, const Matrix& g) {
    const Matrix& Pv = tp.value(p);
    Matrix d(Pv.rows(), Pv.cols());
    for (std::size_t i = 0; i < Pv.size(); ++i) {
      const double raw = Pv.data()[i];
      if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;
      const double y = labels.data()[i];
      d.data()[i] = g(0, 0) * (-y / raw + (1.0 - y) / (1.0 - raw));
    }
    tp.accumulate(p.id, d);
  });
}

}  // namespace ad
}  // namespace ega
