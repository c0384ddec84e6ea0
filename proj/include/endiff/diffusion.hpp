#pragma once

// Conditional paths, scores, drifts and the drift-matching loss.
//
// For a path z = mu(x, t) + U(x, t) eps:
//   f     = dz/dt at fixed eps                    (conditional ODE drift)
//   f^F   = f + (g^2 / 2) grad log q(z | x)
//   f^B   = f - (g^2 / 2) grad log q(z | x)
//   f_hat = f^B evaluated with x replaced by the predictor output x_hat(z, t)
//   loss  = |f^B - f_hat|^2 / (2 g^2)

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "endiff/autodiff.hpp"
#include "endiff/equinet.hpp"
#include "endiff/errors.hpp"
#include "endiff/forward_transform.hpp"
#include "endiff/params.hpp"
#include "endiff/rng.hpp"

namespace endiff {

enum class ForwardKind { kEnd, kEndMuOnly, kEdmStar, kEdmStarGamma };
enum class GSchedule { kConstant, kLearned };

inline const char* to_string(ForwardKind k) {
  switch (k) {
    case ForwardKind::kEnd: return "end";
    case ForwardKind::kEndMuOnly: return "end_mu_only";
    case ForwardKind::kEdmStar: return "edm_star";
    case ForwardKind::kEdmStarGamma: return "edm_star_gamma";
  }
  return "?";
}

inline ForwardKind forward_kind_from_string(const std::string& s) {
  if (s == "end") return ForwardKind::kEnd;
  if (s == "end_mu_only") return ForwardKind::kEndMuOnly;
  if (s == "edm_star") return ForwardKind::kEdmStar;
  if (s == "edm_star_gamma") return ForwardKind::kEdmStarGamma;
  throw ConfigError("unknown forward kind '" + s + "'");
}

inline const char* to_string(GSchedule g) {
  return g == GSchedule::kConstant ? "constant" : "learned";
}

inline GSchedule g_schedule_from_string(const std::string& s) {
  if (s == "constant") return GSchedule::kConstant;
  if (s == "learned") return GSchedule::kLearned;
  throw ConfigError("unknown g schedule '" + s + "'");
}

struct DiffusionConfig {
  ForwardKind forward = ForwardKind::kEnd;
  double delta = 1e-2;
  GSchedule g_schedule = GSchedule::kConstant;
  double g0 = 1.0;
  double beta_min = 0.1;
  double beta_max = 20.0;
  int steps = 100;
  double t_min = 1e-3;
  double feature_scale = 0.25;

  bool has_forward_net() const {
    return forward == ForwardKind::kEnd || forward == ForwardKind::kEndMuOnly;
  }

  void validate() const {
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
    if (!(g0 > 0.0)) throw ConfigError("g0 must be positive");
    if (!(beta_min >= 0.0 && beta_min < beta_max)) throw ConfigError("need 0 <= beta_min < beta_max");
    if (steps < 2) throw ConfigError("steps must be >= 2");
    if (!(t_min > 0.0 && t_min < 0.5)) throw ConfigError("t_min must lie in (0, 0.5)");
    if (!(feature_scale > 0.0)) throw ConfigError("feature_scale must be positive");
  }
};

/// Linear beta(s) = beta_min + s (beta_max - beta_min):
/// alpha = exp(-1/2 int_0^t beta), sigma = sqrt(1 - alpha^2).
inline std::pair<double, double> vp_alpha_sigma(double t, double beta_min, double beta_max) {
  const double integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
  const double alpha = std::exp(-0.5 * integral);
  return {alpha, std::sqrt(-std::expm1(-integral))};
}

inline double vp_beta(double t, double beta_min, double beta_max) {
  return beta_min + t * (beta_max - beta_min);
}

namespace detail {

inline constexpr int kGammaKnots = 3;
inline constexpr int kGHidden = 8;

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline Var gamma_u(const BoundParams& p, const std::string& prefix, double t) {
  const Var w = ad::softplus(p[prefix + "a"]);
  const Var b = ad::softplus(p[prefix + "b"]);
  const Var c = p[prefix + "c"];
  const Var bt = ad::mul(b, ad::add_scalar(ad::neg(c), t));
  const Var b0 = ad::mul(b, ad::neg(c));
  const Var bumps = ad::sub(ad::sigmoid(bt), ad::sigmoid(b0));
  return ad::add_scalar(ad::sum(ad::mul(w, bumps)), t);
}

}  // namespace detail

/// Registers every parameter segment the configuration needs.
inline void init_model_params(ParamStore& store, const DiffusionConfig& dc, const EquiNetConfig& nc,
                              RandomSource& rng) {
  dc.validate();
  nc.validate();
  if (dc.has_forward_net()) {
    add_encoder_params(store, "fwd.", nc, rng);
    add_heads_params(store, "fwd.", nc, rng);
  }
  add_encoder_params(store, "pred.", nc, rng);
  add_datapoint_params(store, "pred.", nc, rng);
  if (dc.forward == ForwardKind::kEdmStarGamma) {
    for (const std::string modality : {"gamma.r.", "gamma.h."}) {
      store.add(modality + "a", 1, detail::kGammaKnots, Init::kConstant, rng, -2.0);
      store.add(modality + "b", 1, detail::kGammaKnots, Init::kConstant, rng, 10.0);
      Matrix c(1, detail::kGammaKnots);
      for (int k = 0; k < detail::kGammaKnots; ++k) c(0, k) = (k + 1.0) / (detail::kGammaKnots + 1.0);
      store.add(modality + "c", 1, detail::kGammaKnots, Init::kZero, rng);
      store.set(modality + "c", c);
    }
  }
  if (dc.g_schedule == GSchedule::kLearned) {
    store.add("g.w1", 1, detail::kGHidden, Init::kFanIn, rng);
    store.add("g.b1", 1, detail::kGHidden, Init::kZero, rng);
    store.add("g.w2", detail::kGHidden, 1, Init::kZero, rng);
    store.add("g.b2", 1, 1, Init::kConstant, rng, std::log(std::expm1(dc.g0)));
  }
}

/// Binds configuration, parameters and an optional composition for one
/// graph. Composition embeddings are computed once per evaluator.
class Evaluator {
 public:
  Evaluator(const DiffusionConfig& dc, const EquiNetConfig& nc, const BoundParams& params,
            std::optional<std::vector<int>> condition = std::nullopt)
      : dc_(dc), nc_(nc), p_(params), condition_(std::move(condition)) {
    if (nc_.conditioned() && !condition_)
      throw ConfigError("conditional model evaluated without a condition");
    if (!nc_.conditioned() && condition_)
      throw ConfigError("condition given to an unconditional model");
  }

  const DiffusionConfig& diffusion() const { return dc_; }
  const EquiNetConfig& net() const { return nc_; }
  const BoundParams& params() const { return p_; }

  ForwardHeads heads(const Var& x_r, const Var& x_h, double t) const {
    const HiddenState s = encode(x_r, x_h, t, embedding("fwd."), p_, "fwd.", nc_);
    return readout_forward_heads(s, p_, "fwd.", nc_);
  }

  /// The AffinePath of the configured forward kind at time t.
  AffinePath path(const Var& x_r, const Var& x_h, double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("build_forward: t outside [0, 1]");
    switch (dc_.forward) {
      case ForwardKind::kEnd: return assemble_path(x_r, x_h, t, heads(x_r, x_h, t), dc_.delta);
      case ForwardKind::kEndMuOnly: {
        AffinePath p = assemble_path(x_r, x_h, t, heads(x_r, x_h, t), dc_.delta);
        const double sigma = std::max(vp_alpha_sigma(t, dc_.beta_min, dc_.beta_max).second, dc_.delta);
        p.u = Var(ad::identity_block_row().replicate(x_r.rows(), 1) * sigma);
        p.sigma_h = Var(Matrix::Constant(x_h.rows(), x_h.cols(), sigma));
        return p;
      }
      case ForwardKind::kEdmStar: {
        const auto [alpha, sigma_raw] = vp_alpha_sigma(t, dc_.beta_min, dc_.beta_max);
        const double sigma = std::max(sigma_raw, dc_.delta);
        return scaled_path(x_r, x_h, Var::scalar(alpha), Var::scalar(alpha), Var::scalar(sigma),
                           Var::scalar(sigma), t);
      }
      case ForwardKind::kEdmStarGamma: {
        const auto [ar, sr] = gamma_alpha_sigma("gamma.r.", t);
        const auto [ah, sh] = gamma_alpha_sigma("gamma.h.", t);
        return scaled_path(x_r, x_h, ar, ah, sr, sh, t);
      }
    }
    throw ConfigError("unknown forward kind");
  }

  Datapoint predict(const Var& z_r, const Var& z_h, double t) const {
    const HiddenState s = encode(z_r, z_h, t, embedding("pred."), p_, "pred.", nc_);
    return readout_datapoint(s, z_r, p_, "pred.");
  }

  /// Diffusion coefficient g(t) as a 1x1 Var.
  Var g(double t) const {
    if (dc_.g_schedule == GSchedule::kConstant) return Var::scalar(dc_.g0);
    const Var hidden = ad::tanh(ad::add(ad::scale(p_["g.w1"], t), p_["g.b1"]));
    return ad::softplus(ad::add(ad::matmul(hidden, p_["g.w2"]), p_["g.b2"]));
  }

  /// Endpoints pinned to EDM*: sigma(0) = delta and sigma(1) = sqrt(1 - alpha_1^2).
  std::pair<Var, Var> gamma_alpha_sigma(const std::string& prefix, double t) const {
    const double g0 = detail::logit(dc_.delta * dc_.delta);
    const double a1 = vp_alpha_sigma(1.0, dc_.beta_min, dc_.beta_max).first;
    const double g1 = detail::logit(1.0 - a1 * a1);
    const Var frac = ad::div(detail::gamma_u(p_, prefix, t), detail::gamma_u(p_, prefix, 1.0));
    const Var gamma = ad::add_scalar(ad::scale(frac, g1 - g0), g0);
    return {ad::sqrt(ad::sigmoid(ad::neg(gamma))), ad::sqrt(ad::sigmoid(gamma))};
  }

 private:
  std::optional<Var> embedding(const std::string& prefix) const {
    if (!condition_) return std::nullopt;
    auto it = cache_.find(prefix);
    if (it != cache_.end()) return it->second;
    Var e = embed_composition(*condition_, p_, prefix, nc_);
    cache_.emplace(prefix, e);
    return e;
  }

  AffinePath scaled_path(const Var& x_r, const Var& x_h, const Var& alpha_r, const Var& alpha_h,
                         const Var& sigma_r, const Var& sigma_h, double t) const {
    AffinePath p;
    p.t = t;
    p.delta = dc_.delta;
    p.mu_r = ad::mul_scalar(ad::project_com(x_r), alpha_r);
    p.mu_h = ad::mul_scalar(x_h, alpha_h);
    p.u = ad::mul_scalar(Var(ad::identity_block_row().replicate(x_r.rows(), 1)), sigma_r);
    p.sigma_h = ad::mul_scalar(Var(Matrix::Ones(x_h.rows(), x_h.cols())), sigma_h);
    return p;
  }

  const DiffusionConfig& dc_;
  const EquiNetConfig& nc_;
  const BoundParams& p_;
  std::optional<std::vector<int>> condition_;
  mutable std::map<std::string, Var> cache_;
};

/// Gradient of log q(z | x) given eps = F^-1(z): -U^-T eps on the positions
/// (transposed-block Woodbury solve) and -eps_h / sigma_h on the features.
inline StatePair cond_score_from_eps(const AffinePath& path, const StatePair& eps) {
  return {ad::neg(detail::woodbury_solve(ad::block_transpose(path.u), eps.r)),
          ad::neg(ad::div(eps.h, path.sigma_h))};
}

inline StatePair cond_score(const AffinePath& path, const StatePair& z) {
  return cond_score_from_eps(path, forward_invert(path, z.r, z.h));
}

/// f = dF/dt at fixed eps, heads re-evaluated at the shifted times.
inline StatePair cond_ode_drift(const Evaluator& ev, const StatePair& eps, double t,
                                const StatePair& x) {
  return time_derivative(eps.r, eps.h, t,
                         [&](double s) { return ev.path(x.r, x.h, s); });
}

namespace detail {

inline StatePair combine(const StatePair& f, const StatePair& score, const Var& g, double sign) {
  const Var coef = ad::scale(ad::square(g), 0.5 * sign);
  return {ad::add(f.r, ad::mul_scalar(score.r, coef)), ad::add(f.h, ad::mul_scalar(score.h, coef))};
}

}  // namespace detail

/// Both conditional drifts at z, sharing one path evaluation.
struct DriftPair {
  StatePair forward;   // f^F
  StatePair backward;  // f^B
  StatePair ode;       // f
  StatePair score;
};

inline DriftPair cond_drifts(const Evaluator& ev, const StatePair& z, double t, const StatePair& x,
                             const Var& g) {
  const AffinePath path = ev.path(x.r, x.h, t);
  const StatePair eps = forward_invert(path, z.r, z.h);
  const StatePair score = cond_score_from_eps(path, eps);
  const StatePair f = cond_ode_drift(ev, eps, t, x);
  return {detail::combine(f, score, g, 1.0), detail::combine(f, score, g, -1.0), f, score};
}

inline StatePair reverse_cond_drift(const Evaluator& ev, const StatePair& z, double t,
                                    const StatePair& x, const Var& g) {
  return cond_drifts(ev, z, t, x, g).backward;
}

inline StatePair forward_cond_drift(const Evaluator& ev, const StatePair& z, double t,
                                    const StatePair& x, const Var& g) {
  return cond_drifts(ev, z, t, x, g).forward;
}

/// f_hat(z, t) = f^B(z, t, x_hat(z, t)).
inline StatePair generative_drift(const Evaluator& ev, const StatePair& z, double t, const Var& g) {
  const Datapoint xh = ev.predict(z.r, z.h, t);
  return reverse_cond_drift(ev, z, t, {xh.r, xh.h}, g);
}

namespace detail {

inline void require_finite(const Var& v, const char* stage) {
  if (!v.value().allFinite()) throw NumericError(stage, std::string("non-finite values in ") + stage);
}

inline void require_finite(const StatePair& s, const char* stage) {
  require_finite(s.r, stage);
  require_finite(s.h, stage);
}

}  // namespace detail

/// |f^B(z_t, t, x) - f_hat(z_t, t)|^2 / (2 g^2) with z_t = F(eps, t, x).
inline Var loss_term(const Evaluator& ev, const StatePair& x, double t, const StatePair& eps) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("loss_term: t must lie in (0, 1)");
  const Var g = ev.g(t);
  detail::require_finite(g, "g");

  const AffinePath path = ev.path(x.r, x.h, t);
  detail::require_finite(path.u, "path");
  const StatePair z = forward_apply(path, eps.r, eps.h);
  detail::require_finite(z, "latent");

  const StatePair f = cond_ode_drift(ev, eps, t, x);
  const StatePair target = detail::combine(f, cond_score_from_eps(path, eps), g, -1.0);
  detail::require_finite(target, "reverse drift");

  const StatePair pred = generative_drift(ev, z, t, g);
  detail::require_finite(pred, "generative drift");

  const Var sq = ad::add(ad::sum_squares(ad::sub(target.r, pred.r)),
                         ad::sum_squares(ad::sub(target.h, pred.h)));
  const Var loss = ad::div(sq, ad::scale(ad::square(g), 2.0));
  detail::require_finite(loss, "loss");
  return loss;
}

}  // namespace endiff
