#pragma once

// The learnable forward map F(eps, t, x) = mu(x, t) + U(x, t) eps.
//
//   mu_r = P[(1 - t) r + t(1 - t) mu_bar_r]
//   U^m  = delta^(1-t) sigma_bar_m^(t(1-t)) I + t(1 - t) U_bar^m
//   mu_h = (1 - t) h + t(1 - t) mu_bar_h
//   s_h  = delta^(1-t) sigma_bar_h^(t(1-t))
//
// so that F(., 0, x) = x + delta * eps and F(., 1, x) = eps for any heads.
// Positions use the ambient zero-CoM formulation (see block_linalg.hpp).

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>

#include "endiff/autodiff.hpp"
#include "endiff/block_linalg.hpp"
#include "endiff/errors.hpp"

namespace endiff {

using ad::Var;

/// Raw readouts of the forward network. Shapes: mu_bar_r M x 3 (centered),
/// mu_bar_h M x D, sigma_bar_r M x 1, sigma_bar_h M x D, u_bar M x 9.
struct ForwardHeads {
  Var mu_bar_r;
  Var mu_bar_h;
  Var sigma_bar_r;
  Var sigma_bar_h;
  Var u_bar;

  static ForwardHeads zeros(Eigen::Index nodes, Eigen::Index feature_dim, double sigma_bar = 1.0) {
    return {Var(Matrix::Zero(nodes, 3)), Var(Matrix::Zero(nodes, feature_dim)),
            Var(Matrix::Constant(nodes, 1, sigma_bar)),
            Var(Matrix::Constant(nodes, feature_dim, sigma_bar)), Var(Matrix::Zero(nodes, 9))};
  }
};

/// mu and U of the conditional Gaussian q(z_t | x) at a fixed time.
struct AffinePath {
  Var mu_r;     // M x 3
  Var mu_h;     // M x D
  Var u;        // M x 9, blocks Ut^m
  Var sigma_h;  // M x D
  double t = 0.0;
  double delta = 0.0;

  Eigen::Index nodes() const { return mu_r.rows(); }
  NodeBlockMatrix blocks() const { return ad::from_block_rows(u.value()); }
  FeatureScales scales() const { return {sigma_h.value()}; }
};

/// Latent or drift pair: positions (M x 3, centered) and features (M x D).
struct StatePair {
  Var r;
  Var h;
};

inline AffinePath assemble_path(const Var& x_r, const Var& x_h, double t, const ForwardHeads& heads,
                                double delta) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("assemble_path: t outside [0, 1]");
  if (!(delta > 0.0)) throw DomainError("assemble_path: delta must be positive");
  const double a = 1.0 - t;
  const double b = t * (1.0 - t);
  const double log_delta = std::log(delta);
  const Eigen::Index m = x_r.rows();

  AffinePath p;
  p.t = t;
  p.delta = delta;
  p.mu_r = ad::project_com(ad::add(ad::scale(x_r, a), ad::scale(heads.mu_bar_r, b)));
  p.mu_h = ad::add(ad::scale(x_h, a), ad::scale(heads.mu_bar_h, b));

  const Var diag = ad::exp(ad::add_scalar(ad::scale(ad::log(heads.sigma_bar_r), b), a * log_delta));
  const Var eye = ad::matmul(diag, Var(ad::identity_block_row()));
  p.u = ad::add(eye, ad::scale(heads.u_bar, b));
  if (b == 0.0) p.u = eye;  // exact endpoints regardless of head values
  p.sigma_h = ad::exp(ad::add_scalar(ad::scale(ad::log(heads.sigma_bar_h), b), a * log_delta));
  if (t == 1.0) {
    p.u = Var(ad::identity_block_row().replicate(m, 1));
    p.sigma_h = Var(Matrix::Ones(x_h.rows(), x_h.cols()));
  }
  return p;
}

namespace detail {

inline void require_centered(const Var& v, const char* op) {
  if (v.cols() != 3 || !is_centered_relative(v.value(), kCenteredTol))
    throw InvalidInput(std::string(op) + ": positions are not zero-CoM");
}

/// Solves P(blockwise(b) e) = y for centered y, e centered (Woodbury).
inline Var woodbury_solve(const Var& b, const Var& y) {
  const Var inv = ad::block_inverse(b);
  const Var v_inv = ad::block_inverse(ad::col_mean(inv));
  const Var w = ad::block_apply(inv, y);
  const Var shift = ad::block_apply(v_inv, ad::col_mean(w));
  // Exactly centered in exact arithmetic; the projection removes round-off,
  // which grows with the conditioning of V.
  return ad::project_com(ad::sub(w, ad::block_apply(inv, ad::broadcast_rows(shift, y.rows()))));
}

}  // namespace detail

inline StatePair forward_apply(const AffinePath& path, const Var& eps_r, const Var& eps_h) {
  detail::require_centered(eps_r, "forward_apply");
  return {ad::add(path.mu_r, ad::project_com(ad::block_apply(path.u, eps_r))),
          ad::add(path.mu_h, ad::mul(path.sigma_h, eps_h))};
}

inline StatePair forward_invert(const AffinePath& path, const Var& z_r, const Var& z_h) {
  const Var zbar = ad::sub(z_r, path.mu_r);
  detail::require_centered(zbar, "forward_invert");
  return {detail::woodbury_solve(path.u, zbar), ad::div(ad::sub(z_h, path.mu_h), path.sigma_h)};
}

/// log|J_F^-1| = -sum log s_h - (sum_m log|det Ut^m| + log|det V|).
inline double forward_logdet_inv(const AffinePath& path) {
  return feature_logdet_inv(path.scales()) - ambient_logdet(path.blocks());
}

/// Gaussian log-density of z under the path, on the (M-1)*3 + M*D
/// dimensional space where it is supported.
inline double path_log_density(const AffinePath& path, const Matrix& z_r, const Matrix& z_h) {
  const StatePair eps = forward_invert(path, Var(z_r), Var(z_h));
  const double dim = static_cast<double>((path.nodes() - 1) * 3 + z_h.size());
  const double sq = eps.r.value().squaredNorm() + eps.h.value().squaredNorm();
  return -0.5 * sq - 0.5 * dim * std::log(2.0 * std::numbers::pi) + forward_logdet_inv(path);
}

using PathFn = std::function<AffinePath(double)>;

inline double fd_step(double t) {
  return std::min({1e-4, t / 2.0, (1.0 - t) / 2.0});
}

inline StatePair time_derivative_with_step(const Var& eps_r, const Var& eps_h, double t, double h,
                                           const PathFn& path_at) {
  if (!(h > 0.0) || t - h < 0.0 || t + h > 1.0)
    throw DomainError("time_derivative: degenerate step");
  const StatePair hi = forward_apply(path_at(t + h), eps_r, eps_h);
  const StatePair lo = forward_apply(path_at(t - h), eps_r, eps_h);
  const double inv = 1.0 / (2.0 * h);
  return {ad::scale(ad::sub(hi.r, lo.r), inv), ad::scale(ad::sub(hi.h, lo.h), inv)};
}


/// dF/dt at fixed eps by central differences, re-evaluating the path at t +- h.
inline StatePair time_derivative(const Var& eps_r, const Var& eps_h, double t, const PathFn& path_at) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("time_derivative: t must lie in (0, 1)");
  const double h = fd_step(t);
  return time_derivative_with_step(eps_r, eps_h, t, h, path_at);
}

}  // namespace endiff
