#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Parameters are bound by
// the address of the Matrix that stores them, so a training step is
//
//   ad::Tape tape;
//   ad::Var loss = model_loss(tape, model);
//   tape.backward(loss);
//   model.w -= lr * tape.gradient(model.w);
//
// Every op's backward rule is checked against central finite differences in
// tests/test_autodiff.cpp.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dnpg/error.hpp"

namespace dnpg {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

namespace ad {

class Tape;

class Var {
 public:
  Var() = default;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const;
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}, nullptr); }

  // Free-standing differentiable input, not tied to any parameter storage.
  Var leaf(Matrix value) { return push(std::move(value), true, {}, nullptr); }

  // Binds a parameter matrix. Binding the same matrix twice returns the same
  // Var, so gradients from every use accumulate in one place.
  Var parameter(const Matrix& storage) {
    const void* key = &storage;
    if (auto it = bound_.find(key); it != bound_.end()) return Var(this, it->second);
    const bool trainable = grad_enabled_ && !frozen_.contains(key);
    Var v = push(storage, trainable, {}, nullptr);
    bound_.emplace(key, v.id());
    return v;
  }

  // Marks a parameter as non-trainable for this tape. Must precede binding.
  void freeze(const Matrix& storage) { frozen_.insert(&storage); }

  // With gradients disabled every parameter binds as a constant and no
  // backward closures are recorded (inference mode).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }

  Var record(Matrix value, std::vector<std::size_t> inputs, Backward backward) {
    bool needs_grad = false;
    for (std::size_t in : inputs) needs_grad = needs_grad || nodes_[in].requires_grad;
    if (!needs_grad) return push(std::move(value), false, {}, nullptr);
    return push(std::move(value), true, std::move(inputs), std::move(backward));
  }

  void backward(Var loss) {
    if (loss.tape() != this) throw ContractError("backward: variable belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward: loss must be a 1x1 scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    accumulate(loss.id(), Matrix::Ones(1, 1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

  [[nodiscard]] const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Upstream gradient of a node; zero-filled when nothing flowed into it.
  [[nodiscard]] const Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  [[nodiscard]] const Matrix& grad(Var v) { return grad(v.id()); }

  // Gradient with respect to a bound parameter; zeros if the parameter was
  // frozen or never bound on this tape.
  [[nodiscard]] Matrix gradient(const Matrix& storage) {
    auto it = bound_.find(&storage);
    if (it == bound_.end() || !nodes_[it->second].requires_grad) {
      return Matrix::Zero(storage.rows(), storage.cols());
    }
    return grad(it->second);
  }

  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var push(Matrix value, bool needs_grad, std::vector<std::size_t> inputs, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(inputs), std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> bound_;
  std::unordered_set<const void*> frozen_;
  bool grad_enabled_ = true;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("Var::scalar on a non-scalar value");
  return v(0, 0);
}

namespace detail {

inline void same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw ContractError("ad: operands on different tapes");
}

inline void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline void scalar_shape(Var s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError(std::string(op) + ": expected a 1x1 scalar");
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

inline Var hadamard(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "hadamard");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var scale(Var a, double c) {
  const std::size_t ia = a.id();
  return a.tape()->record(a.value() * c, {ia}, [ia, c](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self) * c);
  });
}

// a * s for a 1x1 variable s.
inline Var mul_scalar(Var a, Var s) {
  detail::same_tape(a, s);
  detail::scalar_shape(s, "mul_scalar");
  const std::size_t ia = a.id(), is = s.id();
  return a.tape()->record(a.value() * s.scalar(), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(is)(0, 0));
    if (t.requires_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

// a + s broadcast over every entry, s a 1x1 variable.
inline Var add_scalar(Var a, Var s) {
  detail::same_tape(a, s);
  detail::scalar_shape(s, "add_scalar");
  const std::size_t ia = a.id(), is = s.id();
  Matrix out = a.value().array() + s.scalar();
  return a.tape()->record(std::move(out), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, g.sum()));
  });
}

// a + row broadcast over the rows of a; row is 1 x a.cols().
inline Var add_row(Var a, Var row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  const std::size_t ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {ia, ir}, [ia, ir](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

inline Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape()->record(a.value().transpose(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

inline Var tanh(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().tanh();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var softplus(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return detail::softplus(x); });
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    Matrix d = t.value(ia).unaryExpr([](double x) { return detail::sigmoid(x); });
    t.accumulate(ia, t.grad(self).cwiseProduct(d));
  });
}

inline Var exp(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().exp();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

// Elementwise square root; the derivative at exactly zero is taken as zero.
inline Var sqrt(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().max(0.0).sqrt();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    Matrix d = y.unaryExpr([](double v) { return v > 0.0 ? 0.5 / v : 0.0; });
    t.accumulate(ia, t.grad(self).cwiseProduct(d));
  });
}

inline Var sum(Var a) {
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record(Matrix::Constant(1, 1, a.value().sum()), {ia}, [ia, r, c](Tape& t, std::size_t self) {
    t.accumulate(ia, Matrix::Constant(r, c, t.grad(self)(0, 0)));
  });
}

inline Var mean(Var a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// sum(a .* weights) for a constant weight matrix.
inline Var weighted_sum(Var a, const Matrix& weights) {
  if (weights.rows() != a.rows() || weights.cols() != a.cols()) throw ShapeError("weighted_sum: shape mismatch");
  const std::size_t ia = a.id();
  const double v = a.value().cwiseProduct(weights).sum();
  return a.tape()->record(Matrix::Constant(1, 1, v), {ia}, [ia, weights](Tape& t, std::size_t self) {
    t.accumulate(ia, weights * t.grad(self)(0, 0));
  });
}

// Average of the rows: 1 x cols.
inline Var mean_rows(Var a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: no rows");
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows();
  Matrix out = a.value().colwise().mean();
  return a.tape()->record(std::move(out), {ia}, [ia, r](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).replicate(r, 1) / static_cast<double>(r));
  });
}

inline Var row_softmax(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t.accumulate(ia, y.cwiseProduct(g - dot.replicate(1, g.cols())));
  });
}

inline Var row_log_softmax(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  return a.tape()->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix p = t.value(self).array().exp();
    Eigen::VectorXd gs = g.rowwise().sum();
    t.accumulate(ia, g - p.cwiseProduct(gs.replicate(1, g.cols())));
  });
}

inline constexpr double kNormEpsilon = 1e-12;

// Rows scaled to unit L2 norm; rows with norm below kNormEpsilon are divided
// by kNormEpsilon instead.
inline Var normalize_rows(Var a) {
  const std::size_t ia = a.id();
  Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(kNormEpsilon);
  Matrix out = a.value().array().colwise() / norms.array();
  return a.tape()->record(std::move(out), {ia}, [ia, norms](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    Matrix dx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (x.row(i).norm() < kNormEpsilon) {
        dx.row(i) = g.row(i) / norms(i);
      } else {
        dx.row(i) = (g.row(i) - g.row(i).dot(y.row(i)) * y.row(i)) / norms(i);
      }
    }
    t.accumulate(ia, dx);
  });
}

// Pairwise cosine similarity between the rows of a and the rows of b.
inline Var cosine(Var a, Var b) { return matmul(normalize_rows(a), transpose(normalize_rows(b))); }

// Pairwise squared Euclidean distances: out(i, j) = |a_i - b_j|^2.
inline Var sq_distances(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("sq_distances: dimension mismatch");
  const std::size_t ia = a.id(), ib = b.id();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < B.rows(); ++j) out(i, j) = (A.row(i) - B.row(j)).squaredNorm();
  }
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix da = 2.0 * (A.array().colwise() * g.rowwise().sum().array()).matrix() - 2.0 * g * B;
      t.accumulate(ia, da);
    }
    if (t.requires_grad(ib)) {
      Matrix db = 2.0 * (B.array().colwise() * g.colwise().sum().transpose().array()).matrix() -
                  2.0 * g.transpose() * A;
      t.accumulate(ib, db);
    }
  });
}

// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<Eigen::Index> row_argmax(const Matrix& m) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()), 0);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    idx[static_cast<std::size_t>(i)] = best;
  }
  return idx;
}

// Row maxima as a column vector; the gradient goes to the lowest-index argmax.
inline Var row_max(Var a) {
  if (a.cols() == 0) throw ShapeError("row_max: no columns");
  const std::size_t ia = a.id();
  std::vector<Eigen::Index> arg = row_argmax(a.value());
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) out(i, 0) = a.value()(i, arg[static_cast<std::size_t>(i)]);
  const Eigen::Index c = a.cols();
  return a.tape()->record(std::move(out), {ia}, [ia, arg, c](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix d = Matrix::Zero(g.rows(), c);
    for (Eigen::Index i = 0; i < g.rows(); ++i) d(i, arg[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(ia, d);
  });
}

// out(i) = a(i, cols[i]).
inline Var pick(Var a, const std::vector<int>& cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) throw ShapeError("pick: one column index per row required");
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= a.cols()) throw ShapeError("pick: column index out of range");
    out(i, 0) = a.value()(i, c);
  }
  const std::size_t ia = a.id();
  const Eigen::Index nc = a.cols();
  return a.tape()->record(std::move(out), {ia}, [ia, cols, nc](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix d = Matrix::Zero(g.rows(), nc);
    for (Eigen::Index i = 0; i < g.rows(); ++i) d(i, cols[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(ia, d);
  });
}

// Rows of a selected (with repetition allowed) by index.
inline Var gather_rows(Var a, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const std::size_t ia = a.id();
  const Eigen::Index nr = a.rows();
  return a.tape()->record(std::move(out), {ia}, [ia, rows, nr](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix d = Matrix::Zero(nr, g.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, d);
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t ia = a.id();
  const Eigen::Index nr = a.rows();
  Matrix out = a.value().middleRows(start, count);
  return a.tape()->record(std::move(out), {ia}, [ia, start, count, nr](Tape& t, std::size_t self) {
    Matrix d = Matrix::Zero(nr, t.value(ia).cols());
    d.middleRows(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

inline Var vstack(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("vstack: column count mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const std::size_t ia = a.id(), ib = b.id();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, ra, rb](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g.topRows(ra));
    t.accumulate(ib, g.bottomRows(rb));
  });
}

// Column-concatenates a (n x p) and b (n x q).
inline Var hstack(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw ShapeError("hstack: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const std::size_t ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, ca, cb](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g.leftCols(ca));
    t.accumulate(ib, g.rightCols(cb));
  });
}

// KL(m || uniform) for a 1 x k probability row m, with 0 log 0 = 0.
inline Var kl_to_uniform(Var m) {
  if (m.rows() != 1 || m.cols() == 0) throw ShapeError("kl_to_uniform: expected a 1 x k row");
  const double k = static_cast<double>(m.cols());
  double v = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double p = m.value()(0, j);
    if (p > 0.0) v += p * std::log(p * k);
  }
  const std::size_t im = m.id();
  return m.tape()->record(Matrix::Constant(1, 1, v), {im}, [im, k](Tape& t, std::size_t self) {
    const Matrix& p = t.value(im);
    const double g = t.grad(self)(0, 0);
    Matrix d = p.unaryExpr([k](double x) { return x > 0.0 ? std::log(x * k) + 1.0 : 0.0; });
    t.accumulate(im, d * g);
  });
}

}  // namespace ad
}  // namespace dnpg
