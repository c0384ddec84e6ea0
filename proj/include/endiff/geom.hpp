#pragma once

// Geometric primitives: graphs, the zero center-of-mass subspace, O(3)
// rotations and invariant noise.
//
// Row-vector convention throughout: positions are an M x 3 matrix with one
// atom per row, and a rotation R acts as positions * R^T.

#include <Eigen/Dense>

#include <algorithm>
#include <optional>
#include <vector>

#include "endiff/errors.hpp"
#include "endiff/rng.hpp"

namespace endiff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Matrix3 = Eigen::Matrix3d;
using Vector3 = Eigen::Vector3d;

/// A point x = (r, h): positions r (M x 3), invariant features h (M x D) and
/// an optional composition condition (per-type atom counts).
struct GeometricGraph {
  Matrix positions;
  Matrix features;
  std::optional<std::vector<int>> condition;

  Eigen::Index node_count() const { return positions.rows(); }
  Eigen::Index feature_dim() const { return features.cols(); }
};

struct Rotation {
  Matrix3 matrix = Matrix3::Identity();

  Rotation compose(const Rotation& other) const { return {matrix * other.matrix}; }
  Rotation transpose() const { return {matrix.transpose()}; }
  double det() const { return matrix.determinant(); }
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Row-wise center-of-mass removal, P = I - (1/M) T T^T.
inline Matrix zero_com_project(const Matrix& v) {
  if (v.rows() < 1) throw InvalidInput("zero_com_project: empty matrix");
  if (!v.allFinite()) throw InvalidInput("zero_com_project: non-finite entry");
  Eigen::RowVectorXd mean = v.colwise().mean();
  return v.rowwise() - mean;
}

inline double max_abs_column_mean(const Matrix& v) {
  return v.colwise().mean().cwiseAbs().maxCoeff();
}

inline bool is_centered(const Matrix& v, double tol) {
  return v.rows() > 0 && max_abs_column_mean(v) <= tol;
}

/// Centering check with the tolerance scaled by max(1, max |v|), for
/// intermediates whose magnitude is not bounded a priori.
inline bool is_centered_relative(const Matrix& v, double tol) {
  if (v.rows() == 0) return false;
  return max_abs_column_mean(v) <= tol * std::max(1.0, v.cwiseAbs().maxCoeff());
}

/// Haar-distributed element of O(3) (or SO(3) when reflections are not
/// allowed): QR-factorize a 3x3 standard Gaussian draw and fix the signs so
/// that R has a positive diagonal, which makes Q uniform. For SO(3) the first
/// column is negated when det(Q) = -1.
inline Rotation random_rotation(RandomSource& rng, bool allow_reflection) {
  Matrix3 g;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix3> qr(g);
  Matrix3 q = qr.householderQ();
  Matrix3 r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < 3; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  if (!allow_reflection && q.determinant() < 0.0) q.col(0) = -q.col(0);
  return {q};
}

inline Matrix rotate_positions(const Rotation& rot, const Matrix& positions) {
  return positions * rot.matrix.transpose();
}

inline GeometricGraph rotate_graph(const Rotation& rot, const GeometricGraph& x) {
  GeometricGraph out = x;
  out.positions = rotate_positions(rot, x.positions);
  return out;
}

/// Noise that is invariant in law under O(3): features are i.i.d. N(0, 1);
/// positions are i.i.d. N(0, 1) then projected onto the zero-CoM subspace.
struct InvariantNoise {
  Matrix positions;
  Matrix features;
};

inline InvariantNoise sample_invariant_noise(Eigen::Index nodes, Eigen::Index feature_dim,
                                             RandomSource& rng) {
  if (nodes < 1) throw InvalidInput("sample_invariant_noise: need at least one node");
  InvariantNoise out{Matrix(nodes, 3), Matrix(nodes, feature_dim)};
  for (Eigen::Index i = 0; i < nodes; ++i)
    for (int k = 0; k < 3; ++k) out.positions(i, k) = rng.normal();
  for (Eigen::Index i = 0; i < nodes; ++i)
    for (Eigen::Index k = 0; k < feature_dim; ++k) out.features(i, k) = rng.normal();
  out.positions = zero_com_project(out.positions);
  return out;
}

inline Matrix pairwise_distances(const Matrix& positions) {
  const Eigen::Index n = positions.rows();
  Matrix d(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d(i, j) = (positions.row(i) - positions.row(j)).norm();
  return d;
}

}  // namespace endiff
