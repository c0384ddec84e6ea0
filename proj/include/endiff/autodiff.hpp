#pragma once

// Minimal tensor-level reverse-mode automatic differentiation.
//
// A Var wraps a dense matrix. Vars created without a tape are plain values
// and every op on them is ordinary evaluation. Vars created from a Tape (or
// derived from one) are recorded; Tape::backward walks the record in reverse
// creation order and accumulates vector-Jacobian products into each node.
//
// Per-node 3x3 blocks are stored as M x 9 matrices, block m in row m, entry
// (k, l) at column 3k + l.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "endiff/block_linalg.hpp"
#include "endiff/errors.hpp"

namespace endiff::ad {

using Index = Eigen::Index;

class Tape;

struct Node {
  Matrix value;
  Matrix grad;
  std::function<void(const Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  Var(Matrix value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

  static Var scalar(double v) { return Var(Matrix::Constant(1, 1, v)); }

  const Matrix& value() const { return node_->value; }
  double item() const { return node_->value(0, 0); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }

  /// Accumulated gradient; zero-filled when nothing reached this node.
  Matrix grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
  }

  /// Same value, detached from any tape.
  Var detach() const { return Var(node_->value); }

 private:
  std::shared_ptr<Node> node_;
  Tape* tape_ = nullptr;

  friend class Tape;
  friend void accumulate(const Var& v, const Matrix& g);
  template <class F>
  friend Var make_op(Matrix value, std::initializer_list<const Var*> inputs, F&& backward);
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) {
    Var v(std::move(value));
    v.tape_ = this;
    nodes_.push_back(v.node_);
    return v;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and runs the reverse sweep.
  void backward(const Var& out) {
    if (out.rows() != 1 || out.cols() != 1) throw InvalidInput("backward: output must be 1x1");
    if (out.tape_ != this) throw InvalidInput("backward: output not recorded on this tape");
    out.node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && n.grad.size() != 0) n.backward(n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;

  template <class F>
  friend Var make_op(Matrix value, std::initializer_list<const Var*> inputs, F&& backward);
};

inline void accumulate(const Var& v, const Matrix& g) {
  if (v.tracked()) v.node_->accumulate(g);
}

/// Records `value` as the output of an op over `inputs`. When no input is
/// tracked the backward closure is dropped and a plain value is returned.
template <class F>
Var make_op(Matrix value, std::initializer_list<const Var*> inputs, F&& backward) {
  Tape* tape = nullptr;
  for (const Var* in : inputs) {
    if (!in->tape_) continue;
    if (tape && tape != in->tape_) throw InvalidInput("autodiff: inputs from different tapes");
    tape = in->tape_;
  }
  Var out(std::move(value));
  if (!tape) return out;
  out.tape_ = tape;
  out.node_->backward = std::forward<F>(backward);
  tape->nodes_.push_back(out.node_);
  return out;
}

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput(std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---- elementwise arithmetic ------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {&a, &b}, [a, b](const Node& n) {
    accumulate(a, n.grad);
    accumulate(b, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {&a, &b}, [a, b](const Node& n) {
    accumulate(a, n.grad);
    accumulate(b, -n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {&a, &b}, [a, b](const Node& n) {
    if (a.tracked()) accumulate(a, n.grad.cwiseProduct(b.value()));
    if (b.tracked()) accumulate(b, n.grad.cwiseProduct(a.value()));
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "div");
  return make_op(a.value().cwiseQuotient(b.value()), {&a, &b}, [a, b](const Node& n) {
    if (a.tracked()) accumulate(a, n.grad.cwiseQuotient(b.value()));
    if (b.tracked())
      accumulate(b, -n.grad.cwiseProduct(n.value).cwiseQuotient(b.value()));
  });
}

inline Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {&a}, [a, s](const Node& n) { accumulate(a, n.grad * s); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var add_scalar(const Var& a, double s) {
  return make_op((a.value().array() + s).matrix(), {&a},
                 [a](const Node& n) { accumulate(a, n.grad); });
}

/// a * s for a 1x1 Var s.
inline Var mul_scalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw InvalidInput("mul_scalar: s must be 1x1");
  return make_op(a.value() * s.item(), {&a, &s}, [a, s](const Node& n) {
    if (a.tracked()) accumulate(a, n.grad * s.item());
    if (s.tracked()) accumulate(s, Matrix::Constant(1, 1, n.grad.cwiseProduct(a.value()).sum()));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimension mismatch");
  return make_op(a.value() * b.value(), {&a, &b}, [a, b](const Node& n) {
    if (a.tracked()) accumulate(a, n.grad * b.value().transpose());
    if (b.tracked()) accumulate(b, a.value().transpose() * n.grad);
  });
}

/// a + 1 * row, row is 1 x n.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("add_row: shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(v), {&a, &row}, [a, row](const Node& n) {
    accumulate(a, n.grad);
    if (row.tracked()) accumulate(row, n.grad.colwise().sum());
  });
}

/// out(i, j) = a(i, j) * col(i).
inline Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw InvalidInput("mul_col: shape mismatch");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return make_op(std::move(v), {&a, &col}, [a, col](const Node& n) {
    if (a.tracked())
      accumulate(a, (n.grad.array().colwise() * col.value().col(0).array()).matrix());
    if (col.tracked()) accumulate(col, n.grad.cwiseProduct(a.value()).rowwise().sum());
  });
}

/// out(i, j) = a(i, j) * row(j).
inline Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("mul_row: shape mismatch");
  Matrix v = a.value().array().rowwise() * row.value().row(0).array();
  return make_op(std::move(v), {&a, &row}, [a, row](const Node& n) {
    if (a.tracked())
      accumulate(a, (n.grad.array().rowwise() * row.value().row(0).array()).matrix());
    if (row.tracked()) accumulate(row, n.grad.cwiseProduct(a.value()).colwise().sum());
  });
}

inline Var broadcast_rows(const Var& row, Index m) {
  if (row.rows() != 1) throw InvalidInput("broadcast_rows: expected a row");
  Matrix v = row.value().replicate(m, 1);
  return make_op(std::move(v), {&row},
                 [row](const Node& n) { accumulate(row, n.grad.colwise().sum()); });
}

// ---- unary nonlinearities ----------------------------------------------------

inline Var exp(const Var& a) {
  return make_op(a.value().array().exp().matrix(), {&a},
                 [a](const Node& n) { accumulate(a, n.grad.cwiseProduct(n.value)); });
}

inline Var log(const Var& a) {
  return make_op(a.value().array().log().matrix(), {&a},
                 [a](const Node& n) { accumulate(a, n.grad.cwiseQuotient(a.value())); });
}

inline Var sqrt(const Var& a) {
  return make_op(a.value().array().sqrt().matrix(), {&a}, [a](const Node& n) {
    accumulate(a, (0.5 * n.grad.array() / n.value.array()).matrix());
  });
}

inline Var square(const Var& a) {
  return make_op(a.value().array().square().matrix(), {&a}, [a](const Node& n) {
    accumulate(a, (2.0 * n.grad.array() * a.value().array()).matrix());
  });
}

inline Var tanh(const Var& a) {
  return make_op(a.value().array().tanh().matrix(), {&a}, [a](const Node& n) {
    accumulate(a, (n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

namespace detail {
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
}  // namespace detail

inline Var sigmoid(const Var& a) {
  return make_op(a.value().unaryExpr([](double x) { return detail::sigmoid(x); }), {&a},
                 [a](const Node& n) {
                   accumulate(a, (n.grad.array() * n.value.array() * (1.0 - n.value.array()))
                                     .matrix());
                 });
}

inline Var softplus(const Var& a) {
  return make_op(a.value().unaryExpr([](double x) { return detail::softplus(x); }), {&a},
                 [a](const Node& n) {
                   Matrix s = a.value().unaryExpr([](double x) { return detail::sigmoid(x); });
                   accumulate(a, n.grad.cwiseProduct(s));
                 });
}

/// x * sigmoid(x).
inline Var silu(const Var& a) {
  Matrix s = a.value().unaryExpr([](double x) { return detail::sigmoid(x); });
  Matrix v = a.value().cwiseProduct(s);
  return make_op(std::move(v), {&a}, [a, s](const Node& n) {
    Matrix d = (s.array() * (1.0 + a.value().array() * (1.0 - s.array()))).matrix();
    accumulate(a, n.grad.cwiseProduct(d));
  });
}

// ---- reductions and reshaping ----------------------------------------------

inline Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {&a}, [a](const Node& n) {
    accumulate(a, Matrix::Constant(a.rows(), a.cols(), n.grad(0, 0)));
  });
}

inline Var col_mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.rows());
  return make_op(Matrix(a.value().colwise().mean()), {&a}, [a, inv](const Node& n) {
    accumulate(a, n.grad.replicate(a.rows(), 1) * inv);
  });
}

inline Var row_sum(const Var& a) {
  return make_op(Matrix(a.value().rowwise().sum()), {&a}, [a](const Node& n) {
    accumulate(a, n.grad.replicate(1, a.cols()));
  });
}

/// Removes the column means (zero center of mass for M x 3 positions).
inline Var project_com(const Var& a) {
  Matrix v = a.value().rowwise() - a.value().colwise().mean();
  return make_op(std::move(v), {&a}, [a](const Node& n) {
    Matrix g = n.grad.rowwise() - n.grad.colwise().mean();
    accumulate(a, g);
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || start + count > a.cols()) throw InvalidInput("slice_cols: out of range");
  return make_op(Matrix(a.value().middleCols(start, count)), {&a},
                 [a, start, count](const Node& n) {
                   Matrix g = Matrix::Zero(a.rows(), a.cols());
                   g.middleCols(start, count) = n.grad;
                   accumulate(a, g);
                 });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: nothing to concatenate");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw InvalidInput("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Tape* tape = nullptr;
  for (const auto& p : parts)
    if (p.tracked()) tape = p.tape();
  if (!tape) return Var(std::move(v));
  // Route through make_op with the first tracked part as the tape anchor.
  const Var* anchor = nullptr;
  for (const auto& p : parts)
    if (p.tracked()) anchor = &p;
  return make_op(std::move(v), {anchor}, [parts](const Node& n) {
    Index off = 0;
    for (const auto& p : parts) {
      if (p.tracked()) accumulate(p, n.grad.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

/// out.row(e) = a.row(idx[e]).
inline Var gather_rows(const Var& a, std::shared_ptr<const std::vector<Index>> idx) {
  Matrix v(static_cast<Index>(idx->size()), a.cols());
  for (std::size_t e = 0; e < idx->size(); ++e) v.row(static_cast<Index>(e)) = a.value().row((*idx)[e]);
  return make_op(std::move(v), {&a}, [a, idx](const Node& n) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t e = 0; e < idx->size(); ++e) g.row((*idx)[e]) += n.grad.row(static_cast<Index>(e));
    accumulate(a, g);
  });
}

/// out.row(idx[e]) += a.row(e), summed in increasing e.
inline Var scatter_add_rows(const Var& a, std::shared_ptr<const std::vector<Index>> idx,
                            Index rows) {
  if (static_cast<Index>(idx->size()) != a.rows()) throw InvalidInput("scatter_add_rows: size");
  Matrix v = Matrix::Zero(rows, a.cols());
  for (std::size_t e = 0; e < idx->size(); ++e) v.row((*idx)[e]) += a.value().row(static_cast<Index>(e));
  return make_op(std::move(v), {&a}, [a, idx](const Node& n) {
    Matrix g(a.rows(), a.cols());
    for (std::size_t e = 0; e < idx->size(); ++e) g.row(static_cast<Index>(e)) = n.grad.row((*idx)[e]);
    accumulate(a, g);
  });
}

/// Row i becomes rows k*i .. k*i + k - 1.
inline Var repeat_rows(const Var& a, Index k) {
  Matrix v(a.rows() * k, a.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index r = 0; r < k; ++r) v.row(i * k + r) = a.value().row(i);
  return make_op(std::move(v), {&a}, [a, k](const Node& n) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index r = 0; r < k; ++r) g.row(i) += n.grad.row(i * k + r);
    accumulate(a, g);
  });
}

/// Sums consecutive groups of k rows.
inline Var group_sum_rows(const Var& a, Index k) {
  if (a.rows() % k != 0) throw InvalidInput("group_sum_rows: rows not divisible");
  const Index m = a.rows() / k;
  Matrix v = Matrix::Zero(m, a.cols());
  for (Index i = 0; i < m; ++i)
    for (Index r = 0; r < k; ++r) v.row(i) += a.value().row(i * k + r);
  return make_op(std::move(v), {&a}, [a, k, m](const Node& n) {
    Matrix g(a.rows(), a.cols());
    for (Index i = 0; i < m; ++i)
      for (Index r = 0; r < k; ++r) g.row(i * k + r) = n.grad.row(i);
    accumulate(a, g);
  });
}

/// Row-major reinterpretation to rows x cols.
inline Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.rows() * a.cols()) throw InvalidInput("reshape: size mismatch");
  auto to_rm = [](const Matrix& m, Index r, Index c) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    Matrix out = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        rm.data(), r, c);
    return out;
  };
  const Index r0 = a.rows(), c0 = a.cols();
  return make_op(to_rm(a.value(), rows, cols), {&a}, [a, r0, c0, to_rm](const Node& n) {
    accumulate(a, to_rm(n.grad, r0, c0));
  });
}

// ---- per-node 3x3 blocks (M x 9) ----------------------------------------------

inline Matrix3 block_at(const Matrix& b, Index m) {
  Matrix3 out;
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) out(k, l) = b(m, 3 * k + l);
  return out;
}

inline void set_block(Matrix& b, Index m, const Matrix3& v) {
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) b(m, 3 * k + l) = v(k, l);
}

inline Matrix to_block_rows(const NodeBlockMatrix& u) {
  Matrix out(u.size(), 9);
  for (Index m = 0; m < u.size(); ++m) set_block(out, m, u.blocks[static_cast<std::size_t>(m)]);
  return out;
}

inline NodeBlockMatrix from_block_rows(const Matrix& b) {
  NodeBlockMatrix out;
  out.blocks.resize(static_cast<std::size_t>(b.rows()));
  for (Index m = 0; m < b.rows(); ++m) out.blocks[static_cast<std::size_t>(m)] = block_at(b, m);
  return out;
}

/// Row of nine values holding I3.
inline Matrix identity_block_row() {
  Matrix r = Matrix::Zero(1, 9);
  r(0, 0) = r(0, 4) = r(0, 8) = 1.0;
  return r;
}

/// out_m = B_m e_m for B (M x 9), e (M x 3).
inline Var block_apply(const Var& b, const Var& e) {
  if (b.cols() != 9 || e.cols() != 3 || b.rows() != e.rows())
    throw InvalidInput("block_apply: shape mismatch");
  const Index m_count = e.rows();
  Matrix v(m_count, 3);
  for (Index m = 0; m < m_count; ++m)
    v.row(m) = (block_at(b.value(), m) * e.value().row(m).transpose()).transpose();
  return make_op(std::move(v), {&b, &e}, [b, e, m_count](const Node& n) {
    if (e.tracked()) {
      Matrix ge(m_count, 3);
      for (Index m = 0; m < m_count; ++m)
        ge.row(m) = (block_at(b.value(), m).transpose() * n.grad.row(m).transpose()).transpose();
      accumulate(e, ge);
    }
    if (b.tracked()) {
      Matrix gb(m_count, 9);
      for (Index m = 0; m < m_count; ++m)
        set_block(gb, m, n.grad.row(m).transpose() * e.value().row(m));
      accumulate(b, gb);
    }
  });
}

inline Var block_transpose(const Var& b) {
  auto tr = [](const Matrix& x) {
    Matrix out(x.rows(), 9);
    for (Index m = 0; m < x.rows(); ++m) set_block(out, m, block_at(x, m).transpose());
    return out;
  };
  return make_op(tr(b.value()), {&b}, [b, tr](const Node& n) { accumulate(b, tr(n.grad)); });
}

inline Var block_inverse(const Var& b) {
  Matrix v(b.rows(), 9);
  for (Index m = 0; m < b.rows(); ++m)
    set_block(v, m, block3_inverse(block_at(b.value(), m), static_cast<std::ptrdiff_t>(m)));
  return make_op(std::move(v), {&b}, [b](const Node& n) {
    Matrix g(b.rows(), 9);
    for (Index m = 0; m < b.rows(); ++m) {
      const Matrix3 y = block_at(n.value, m);
      set_block(g, m, -y.transpose() * block_at(n.grad, m) * y.transpose());
    }
    accumulate(b, g);
  });
}

/// log|det B_m| per block, M x 1.
inline Var block_logabsdet(const Var& b) {
  Matrix v(b.rows(), 1);
  for (Index m = 0; m < b.rows(); ++m) v(m, 0) = std::log(std::abs(block3_det(block_at(b.value(), m))));
  return make_op(std::move(v), {&b}, [b](const Node& n) {
    Matrix g(b.rows(), 9);
    for (Index m = 0; m < b.rows(); ++m) {
      const Matrix3 inv = block3_inverse(block_at(b.value(), m), static_cast<std::ptrdiff_t>(m));
      set_block(g, m, n.grad(m, 0) * inv.transpose());
    }
    accumulate(b, g);
  });
}

/// B_m = sum_c a_{m,c} c_{m,c}^T where a, c are (3M x K) stacks of vectors.
inline Var block_outer(const Var& a, const Var& c) {
  detail::same_shape(a, c, "block_outer");
  if (a.rows() % 3 != 0) throw InvalidInput("block_outer: rows must be 3M");
  const Index m_count = a.rows() / 3;
  Matrix v(m_count, 9);
  for (Index m = 0; m < m_count; ++m) {
    const Matrix3 blk = a.value().middleRows(3 * m, 3) * c.value().middleRows(3 * m, 3).transpose();
    set_block(v, m, blk);
  }
  return make_op(std::move(v), {&a, &c}, [a, c, m_count](const Node& n) {
    Matrix ga(a.rows(), a.cols()), gc(c.rows(), c.cols());
    for (Index m = 0; m < m_count; ++m) {
      const Matrix3 g = block_at(n.grad, m);
      ga.middleRows(3 * m, 3) = g * c.value().middleRows(3 * m, 3);
      gc.middleRows(3 * m, 3) = g.transpose() * a.value().middleRows(3 * m, 3);
    }
    if (a.tracked()) accumulate(a, ga);
    if (c.tracked()) accumulate(c, gc);
  });
}

/// Squared Frobenius norm as a 1x1 Var.
inline Var sum_squares(const Var& a) { return sum(square(a)); }

}  // namespace endiff::ad
