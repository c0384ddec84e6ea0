#pragma once

// Shared helpers and independent oracles for the unit tests.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "endiff/endiff.hpp"

namespace endiff::testing {

inline Matrix random_matrix(RandomSource& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Matrix random_centered(RandomSource& rng, Eigen::Index m, double scale = 1.0) {
  return zero_com_project(random_matrix(rng, m, 3, scale));
}

/// Well-conditioned random 3x3 block: c I + s G.
inline Matrix3 random_block(RandomSource& rng, double c = 1.5, double s = 0.4) {
  Matrix3 b = c * Matrix3::Identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) b(i, j) += s * rng.normal();
  return b;
}

inline NodeBlockMatrix random_blocks(RandomSource& rng, Eigen::Index m) {
  NodeBlockMatrix u;
  for (Eigen::Index i = 0; i < m; ++i) u.blocks.push_back(random_block(rng));
  return u;
}

/// Row-major flattening: entry (m, k) goes to 3m + k.
inline Vector flatten(const Matrix& v) {
  Vector out(v.size());
  for (Eigen::Index m = 0; m < v.rows(); ++m)
    for (Eigen::Index k = 0; k < v.cols(); ++k) out(m * v.cols() + k) = v(m, k);
  return out;
}

inline Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  Matrix out(rows, cols);
  for (Eigen::Index m = 0; m < rows; ++m)
    for (Eigen::Index k = 0; k < cols; ++k) out(m, k) = v(m * cols + k);
  return out;
}

/// Dense 3M x 3M block-diagonal matrix in the flattened layout.
inline Matrix dense_block_diag(const NodeBlockMatrix& u) {
  const Eigen::Index m = u.size();
  Matrix d = Matrix::Zero(3 * m, 3 * m);
  for (Eigen::Index i = 0; i < m; ++i) d.block(3 * i, 3 * i, 3, 3) = u.blocks[static_cast<std::size_t>(i)];
  return d;
}

/// Orthonormal basis (3M x 3(M-1)) of the zero-CoM subspace, built by
/// Gram-Schmidt on differences of unit node displacements, independent of
/// the library's projector.
inline Matrix zero_com_basis(Eigen::Index m) {
  const Eigen::Index n = 3 * m;
  Matrix cand(n, 3 * (m - 1));
  cand.setZero();
  Eigen::Index col = 0;
  for (Eigen::Index i = 1; i < m; ++i)
    for (int k = 0; k < 3; ++k) {
      cand(3 * i + k, col) = 1.0;
      cand(k, col) = -1.0;
      ++col;
    }
  Matrix q = cand;
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    for (Eigen::Index i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
    q.col(j).normalize();
  }
  return q;
}

/// Restriction of P U to the subspace in the basis Q: Q^T U Q.
inline Matrix restricted_operator(const NodeBlockMatrix& u) {
  const Matrix q = zero_com_basis(u.size());
  return q.transpose() * dense_block_diag(u) * q;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

/// Central finite-difference gradient of a scalar function of a matrix.
inline Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Matrix p = x, m = x;
      p(i, j) += h;
      m(i, j) -= h;
      g(i, j) = (f(p) - f(m)) / (2.0 * h);
    }
  return g;
}

/// Small network configuration for fast tests.
inline EquiNetConfig tiny_net(int feature_dim = 5, int condition_dim = 0) {
  EquiNetConfig c;
  c.layers = 1;
  c.scalar_width = 8;
  c.vector_width = 4;
  c.rbf_count = 6;
  c.time_dim = 4;
  c.feature_dim = feature_dim;
  c.condition_dim = condition_dim;
  c.condition_embed = 4;
  c.condition_hidden = 8;
  return c;
}

/// Perturbs every parameter so that zero-initialized heads become active.
inline void jitter_params(ParamStore& store, RandomSource& rng, double scale) {
  for (double& v : store.flat()) v += scale * rng.normal();
}

inline GeometricGraph random_graph(RandomSource& rng, Eigen::Index m, Eigen::Index d, double spread = 1.2) {
  GeometricGraph g;
  g.positions = random_centered(rng, m, spread);
  g.features = random_matrix(rng, m, d, 0.3);
  return g;
}

}  // namespace endiff::testing
