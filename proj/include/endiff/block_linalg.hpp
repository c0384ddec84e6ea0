#pragma once

// Closed-form linear algebra for per-node 3x3 block transforms acting on the
// zero center-of-mass subspace.
//
// The ambient operator is U = P*Ut + (1/M) T T^T, where Ut is block diagonal
// with blocks Ut^m, P removes the center of mass and T stacks M copies of I3.
// On centered inputs the second term vanishes, so U e = P(Ut e). With
// V = (1/M) sum_m (Ut^m)^-1:
//
//   det U restricted to the subspace = prod_m det Ut^m * det V
//   U^-1 zbar = Ut^-1 (zbar - c),  c = V^-1 * mean_m((Ut^m)^-1 zbar_m)
//
// All matrices here are 3x3 so every inverse and determinant is explicit.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "endiff/errors.hpp"
#include "endiff/geom.hpp"

namespace endiff {

inline constexpr double kSingularDet = 1e-12;
inline constexpr double kCenteredTol = 1e-8;

struct NodeBlockMatrix {
  std::vector<Matrix3> blocks;

  Eigen::Index size() const { return static_cast<Eigen::Index>(blocks.size()); }

  static NodeBlockMatrix identity(Eigen::Index nodes, double scale = 1.0) {
    return {std::vector<Matrix3>(static_cast<std::size_t>(nodes), scale * Matrix3::Identity())};
  }
};

/// Strictly positive per-entry scales for the invariant features.
struct FeatureScales {
  Matrix scales;
};

/// Adjugate over determinant. `node` only labels the error.
inline Matrix3 block3_inverse(const Matrix3& b, std::ptrdiff_t node = -1) {
  const double c00 = b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1);
  const double c01 = b(1, 2) * b(2, 0) - b(1, 0) * b(2, 2);
  const double c02 = b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0);
  const double det = b(0, 0) * c00 + b(0, 1) * c01 + b(0, 2) * c02;
  if (!(std::abs(det) > kSingularDet))
    throw SingularTransform("singular 3x3 block (det=" + std::to_string(det) + ") at node " +
                                std::to_string(node),
                            node);
  Matrix3 adj;
  adj(0, 0) = c00;
  adj(1, 0) = c01;
  adj(2, 0) = c02;
  adj(0, 1) = b(0, 2) * b(2, 1) - b(0, 1) * b(2, 2);
  adj(1, 1) = b(0, 0) * b(2, 2) - b(0, 2) * b(2, 0);
  adj(2, 1) = b(0, 1) * b(2, 0) - b(0, 0) * b(2, 1);
  adj(0, 2) = b(0, 1) * b(1, 2) - b(0, 2) * b(1, 1);
  adj(1, 2) = b(0, 2) * b(1, 0) - b(0, 0) * b(1, 2);
  adj(2, 2) = b(0, 0) * b(1, 1) - b(0, 1) * b(1, 0);
  return adj / det;
}

inline double block3_det(const Matrix3& b) {
  return b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) -
         b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0)) +
         b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
}

namespace detail {

inline void require_centered(const Matrix& v, const char* op) {
  if (v.cols() != 3) throw InvalidInput(std::string(op) + ": expected M x 3 input");
  if (!is_centered_relative(v, kCenteredTol))
    throw InvalidInput(std::string(op) + ": input is not zero-CoM");
}

inline void require_rows(const NodeBlockMatrix& u, const Matrix& v, const char* op) {
  if (u.size() != v.rows()) throw InvalidInput(std::string(op) + ": node count mismatch");
}

inline Matrix blockwise(const std::vector<Matrix3>& blocks, const Matrix& v) {
  Matrix out(v.rows(), 3);
  for (Eigen::Index m = 0; m < v.rows(); ++m)
    out.row(m) = (blocks[static_cast<std::size_t>(m)] * v.row(m).transpose()).transpose();
  return out;
}

inline std::vector<Matrix3> inverse_blocks(const NodeBlockMatrix& u) {
  std::vector<Matrix3> inv(u.blocks.size());
  for (std::size_t m = 0; m < u.blocks.size(); ++m)
    inv[m] = block3_inverse(u.blocks[m], static_cast<std::ptrdiff_t>(m));
  return inv;
}

}  // namespace detail

/// V = (1/M) sum_m (Ut^m)^-1.
inline Matrix3 subspace_aggregate(const NodeBlockMatrix& u) {
  Matrix3 v = Matrix3::Zero();
  for (const auto& b : detail::inverse_blocks(u)) v += b;
  return v / static_cast<double>(u.size());
}

inline Matrix ambient_apply(const NodeBlockMatrix& u, const Matrix& eps) {
  detail::require_centered(eps, "ambient_apply");
  detail::require_rows(u, eps, "ambient_apply");
  return zero_com_project(detail::blockwise(u.blocks, eps));
}

inline double ambient_logdet(const NodeBlockMatrix& u) {
  double acc = 0.0;
  Matrix3 v = Matrix3::Zero();
  for (std::size_t m = 0; m < u.blocks.size(); ++m) {
    acc += std::log(std::abs(block3_det(u.blocks[m])));
    v += block3_inverse(u.blocks[m], static_cast<std::ptrdiff_t>(m));
  }
  v /= static_cast<double>(u.size());
  const double det_v = block3_det(v);
  if (!(std::abs(det_v) > kSingularDet))
    throw SingularTransform("singular aggregate V in ambient_logdet", -1);
  return acc + std::log(std::abs(det_v));
}

/// Solves U e = zbar for centered zbar via the Woodbury identity.
inline Matrix ambient_inverse_apply(const NodeBlockMatrix& u, const Matrix& zbar) {
  detail::require_centered(zbar, "ambient_inverse_apply");
  detail::require_rows(u, zbar, "ambient_inverse_apply");
  const auto inv = detail::inverse_blocks(u);
  Matrix3 v = Matrix3::Zero();
  for (const auto& b : inv) v += b;
  v /= static_cast<double>(u.size());
  const Matrix3 v_inv = block3_inverse(v, -1);
  const Matrix w = detail::blockwise(inv, zbar);
  const Vector3 shift = v_inv * w.colwise().mean().transpose();
  Matrix out(zbar.rows(), 3);
  for (Eigen::Index m = 0; m < zbar.rows(); ++m)
    out.row(m) = w.row(m) - (inv[static_cast<std::size_t>(m)] * shift).transpose();
  return zero_com_project(out);
}

inline NodeBlockMatrix transpose_blocks(const NodeBlockMatrix& u) {
  NodeBlockMatrix out = u;
  for (auto& b : out.blocks) b.transposeInPlace();
  return out;
}

/// Solves (restricted U)^T s = y on the subspace. The transpose of the
/// restricted operator is the ambient operator built from transposed blocks.
inline Matrix ambient_inverse_transpose_apply(const NodeBlockMatrix& u, const Matrix& y) {
  return ambient_inverse_apply(transpose_blocks(u), y);
}

/// Blocks R Ut^m R^T.
inline NodeBlockMatrix conjugate_blocks(const NodeBlockMatrix& u, const Rotation& rot) {
  NodeBlockMatrix out = u;
  for (auto& b : out.blocks) b = rot.matrix * b * rot.matrix.transpose();
  return out;
}

inline double feature_logdet_inv(const FeatureScales& s) {
  if (!s.scales.allFinite() || !(s.scales.array() > 0.0).all())
    throw InvalidInput("feature_logdet_inv: scales must be positive and finite");
  return -s.scales.array().log().sum();
}

}  // namespace endiff
