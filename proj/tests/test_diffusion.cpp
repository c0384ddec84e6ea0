#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace endiff;
using namespace endiff::testing;
namespace ad = endiff::ad;

namespace {

struct Rig {
  DiffusionConfig dc;
  EquiNetConfig nc;
  ParamStore store;

  explicit Rig(ForwardKind kind, int condition_dim = 0, GSchedule gs = GSchedule::kConstant,
                 double jitter = 0.2) {
    dc.forward = kind;
    dc.g_schedule = gs;
    nc = tiny_net(3, condition_dim);
    RandomSource rng(11);
    init_model_params(store, dc, nc, rng);
    RandomSource j(12);
    jitter_params(store, j, jitter);
  }
};

StatePair pair(const Matrix& r, const Matrix& h) { return {Var(r), Var(h)}; }

}  // namespace

TEST(Diffusion, VpScheduleIsVariancePreserving) {
  for (double t : {0.0, 1e-4, 0.1, 0.5, 1.0}) {
    const auto [a, s] = vp_alpha_sigma(t, 0.1, 20.0);
    EXPECT_NEAR(a * a + s * s, 1.0, 1e-14);
  }
  EXPECT_DOUBLE_EQ(vp_alpha_sigma(0.0, 0.1, 20.0).second, 0.0);
  EXPECT_NEAR(vp_beta(0.5, 0.1, 20.0), 10.05, 1e-12);
}

TEST(Diffusion, ConfigValidationAndNames) {
  DiffusionConfig dc;
  EXPECT_NO_THROW(dc.validate());
  dc.delta = 0.0;
  EXPECT_THROW(dc.validate(), ConfigError);
  for (auto k : {ForwardKind::kEnd, ForwardKind::kEndMuOnly, ForwardKind::kEdmStar, ForwardKind::kEdmStarGamma})
    EXPECT_EQ(forward_kind_from_string(to_string(k)), k);
  EXPECT_THROW(forward_kind_from_string("bogus"), ConfigError);
  EXPECT_EQ(g_schedule_from_string("learned"), GSchedule::kLearned);
}

TEST(Diffusion, ParameterSegmentsFollowTheKind) {
  Rig end(ForwardKind::kEnd), edm(ForwardKind::kEdmStar), gam(ForwardKind::kEdmStarGamma);
  EXPECT_TRUE(end.store.contains("fwd.heads.ua"));
  EXPECT_FALSE(edm.store.contains("fwd.heads.ua"));
  EXPECT_TRUE(edm.store.contains("pred.out.r"));
  EXPECT_TRUE(gam.store.contains("gamma.r.a"));
  Rig learned(ForwardKind::kEdmStar, 0, GSchedule::kLearned, 0.0);
  const BoundParams p = learned.store.bind(nullptr);
  Evaluator ev(learned.dc, learned.nc, p);
  EXPECT_NEAR(ev.g(0.3).item(), learned.dc.g0, 1e-12);  // zero output layer
}

TEST(Diffusion, ScoreMatchesFiniteDifferencesOfLogDensity) {
  Rig s(ForwardKind::kEnd);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(1);
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::Index m = 3 + rep % 3;
    const Matrix xr = random_centered(r, m), xh = random_matrix(r, m, 3);
    const double t = 0.1 + 0.8 * r.uniform();
    const AffinePath path = ev.path(Var(xr), Var(xh), t);
    const StatePair z = forward_apply(path, Var(random_centered(r, m)), Var(random_matrix(r, m, 3)));
    const StatePair score = cond_score(path, z);
    // Positions: finite differences along centered directions, projected gradient.
    const Matrix q = zero_com_basis(m);
    const Vector gflat = flatten(score.r.value());
    const double hh = 1e-5;
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      const Matrix dir = unflatten(q.col(j), m, 3);
      const double fd = (path_log_density(path, z.r.value() + hh * dir, z.h.value()) -
                         path_log_density(path, z.r.value() - hh * dir, z.h.value())) /
                        (2 * hh);
      EXPECT_LT(std::abs(gflat.dot(q.col(j)) - fd), 1e-4 * std::max(1.0, std::abs(fd)));
    }
    EXPECT_LT(max_abs_column_mean(score.r.value()), 1e-10);
    const Matrix gh = fd_gradient([&](const Matrix& zh) { return path_log_density(path, z.r.value(), zh); },
                                  z.h.value(), 1e-5);
    EXPECT_LT(max_abs(score.h.value() - gh), 1e-4 * std::max(1.0, max_abs(gh)));
  }
}

TEST(Diffusion, EdmStarScoreIsClosedForm) {
  Rig s(ForwardKind::kEdmStar);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(2);
  for (double t : {0.05, 0.3, 0.9}) {
    const Matrix xr = random_centered(r, 4), xh = random_matrix(r, 4, 3);
    const Matrix zr = random_centered(r, 4), zh = random_matrix(r, 4, 3);
    const auto [alpha, sigma] = vp_alpha_sigma(t, s.dc.beta_min, s.dc.beta_max);
    const StatePair score = cond_score(ev.path(Var(xr), Var(xh), t), pair(zr, zh));
    EXPECT_LT(max_abs(score.r.value() - (alpha * xr - zr) / (sigma * sigma)), 1e-10);
    EXPECT_LT(max_abs(score.h.value() - (alpha * xh - zh) / (sigma * sigma)), 1e-10);
  }
}

TEST(Diffusion, EdmStarReverseDriftIsVpReverseDrift) {
  // With g^2 = beta(t), f^B equals -1/2 beta z - beta * score, the VP reverse drift.
  Rig s(ForwardKind::kEdmStar);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(3);
  for (double t : {0.2, 0.5, 0.8}) {
    const Matrix xr = random_centered(r, 3), xh = random_matrix(r, 3, 3);
    const Matrix zr = random_centered(r, 3), zh = random_matrix(r, 3, 3);
    const double beta = vp_beta(t, s.dc.beta_min, s.dc.beta_max);
    const auto [alpha, sigma] = vp_alpha_sigma(t, s.dc.beta_min, s.dc.beta_max);
    const Var g = Var::scalar(std::sqrt(beta));
    const StatePair fb = reverse_cond_drift(ev, pair(zr, zh), t, pair(xr, xh), g);
    const Matrix want_r = -0.5 * beta * zr - beta * (alpha * xr - zr) / (sigma * sigma);
    EXPECT_LT(max_abs(fb.r.value() - want_r), 1e-5 * std::max(1.0, max_abs(want_r)));
  }
}

TEST(Diffusion, ForwardAndBackwardDriftsDifferByScore) {
  Rig s(ForwardKind::kEnd);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(4);
  const Matrix xr = random_centered(r, 4), xh = random_matrix(r, 4, 3);
  const StatePair z = pair(random_centered(r, 4), random_matrix(r, 4, 3));
  const Var g = Var::scalar(0.7);
  const DriftPair d = cond_drifts(ev, z, 0.4, pair(xr, xh), g);
  EXPECT_LT(max_abs(d.forward.r.value() - d.backward.r.value() - 0.49 * d.score.r.value()), 1e-10);
  EXPECT_LT(max_abs(0.5 * (d.forward.h.value() + d.backward.h.value()) - d.ode.h.value()), 1e-10);
}

TEST(Diffusion, DriftsAndLossAreEquivariant) {
  for (auto kind : {ForwardKind::kEnd, ForwardKind::kEdmStar, ForwardKind::kEdmStarGamma}) {
    Rig s(kind);
    const BoundParams p = s.store.bind(nullptr);
    Evaluator ev(s.dc, s.nc, p);
    RandomSource r(5);
    for (int rep = 0; rep < 5; ++rep) {
      const Matrix xr = random_centered(r, 4, 1.3), xh = random_matrix(r, 4, 3);
      const Matrix er = random_centered(r, 4), eh = random_matrix(r, 4, 3);
      const Rotation rot = random_rotation(r, true);
      const double t = 0.05 + 0.9 * r.uniform();
      const Var g = ev.g(t);
      const AffinePath pa = ev.path(Var(xr), Var(xh), t);
      const StatePair z = forward_apply(pa, Var(er), Var(eh));
      const StatePair zr = {Var(rotate_positions(rot, z.r.value())), z.h};
      const StatePair xrot = pair(rotate_positions(rot, xr), xh);

      const StatePair zb = forward_apply(ev.path(xrot.r, xrot.h, t), Var(rotate_positions(rot, er)), Var(eh));
      EXPECT_LT(max_abs(zb.r.value() - zr.r.value()), 1e-8);

      const StatePair fa = generative_drift(ev, z, t, g), fb = generative_drift(ev, zr, t, g);
      EXPECT_LT(max_abs(rotate_positions(rot, fa.r.value()) - fb.r.value()), 1e-6 * std::max(1.0, max_abs(fa.r.value())));
      EXPECT_LT(max_abs(fa.h.value() - fb.h.value()), 1e-6 * std::max(1.0, max_abs(fa.h.value())));

      const double la = loss_term(ev, pair(xr, xh), t, pair(er, eh)).item();
      const double lb = loss_term(ev, xrot, t, pair(rotate_positions(rot, er), eh)).item();
      EXPECT_LT(std::abs(la - lb), 1e-6 * std::max(1.0, std::abs(la))) << to_string(kind);
    }
  }
}

TEST(Diffusion, LossIsNonNegativeAndZeroForExactPredictor) {
  Rig s(ForwardKind::kEnd);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(6);
  const Matrix xr = random_centered(r, 3), xh = random_matrix(r, 3, 3);
  const double l = loss_term(ev, pair(xr, xh), 0.5, pair(random_centered(r, 3), random_matrix(r, 3, 3))).item();
  EXPECT_GE(l, 0.0);
  EXPECT_THROW(loss_term(ev, pair(xr, xh), 0.0, pair(xr, xh)), DomainError);

  // The target equals f^B evaluated with the true datapoint.
  const Matrix er = random_centered(r, 3), eh = random_matrix(r, 3, 3);
  const AffinePath path = ev.path(Var(xr), Var(xh), 0.5);
  const StatePair z = forward_apply(path, Var(er), Var(eh));
  const StatePair via_z = reverse_cond_drift(ev, z, 0.5, pair(xr, xh), ev.g(0.5));
  const StatePair f = cond_ode_drift(ev, pair(er, eh), 0.5, pair(xr, xh));
  const StatePair sc = cond_score_from_eps(path, pair(er, eh));
  const double g2 = ev.g(0.5).item() * ev.g(0.5).item();
  EXPECT_LT(max_abs(via_z.r.value() - (f.r.value() - 0.5 * g2 * sc.r.value())), 1e-8);
}

TEST(Diffusion, EndWithZeroHeadsHasInterpolantMoments) {
  Rig s(ForwardKind::kEnd, 0, GSchedule::kConstant, 0.0);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(7);
  const Matrix xr = random_centered(r, 3), xh = random_matrix(r, 3, 3);
  const double t = 0.4;
  const AffinePath path = ev.path(Var(xr), Var(xh), t);
  const double sd = std::pow(s.dc.delta, 1 - t);
  const int n = 20000;
  Matrix mean = Matrix::Zero(3, 3);
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const InvariantNoise e = sample_invariant_noise(3, 3, r);
    const StatePair z = forward_apply(path, Var(e.positions), Var(e.features));
    mean += z.r.value();
    var += std::pow(z.h.value()(0, 0) - (1 - t) * xh(0, 0), 2);
  }
  mean /= n;
  EXPECT_LT(max_abs(mean - (1 - t) * xr), 5 * sd / std::sqrt(n));
  EXPECT_NEAR(var / n, sd * sd, 5 * sd * sd * std::sqrt(2.0 / n));
}

TEST(Diffusion, GammaScheduleEndpointsArePinned) {
  Rig s(ForwardKind::kEdmStarGamma, 0, GSchedule::kConstant, 0.5);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  const auto [a0, s0] = ev.gamma_alpha_sigma("gamma.r.", 0.0);
  EXPECT_NEAR(s0.item(), s.dc.delta, 1e-12);
  const auto [a1, s1] = ev.gamma_alpha_sigma("gamma.h.", 1.0);
  const auto [va, vs] = vp_alpha_sigma(1.0, s.dc.beta_min, s.dc.beta_max);
  EXPECT_NEAR(a1.item(), va, 1e-12);
  EXPECT_NEAR(s1.item(), vs, 1e-12);
  double prev = 0.0;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const double sig = ev.gamma_alpha_sigma("gamma.r.", t).second.item();
    EXPECT_GE(sig, prev - 1e-12);  // monotone noise
    EXPECT_NEAR(std::pow(ev.gamma_alpha_sigma("gamma.r.", t).first.item(), 2) + sig * sig, 1.0, 1e-12);
    prev = sig;
  }
}

TEST(Diffusion, ConditionPresenceIsChecked) {
  Rig c(ForwardKind::kEnd, 3);
  const BoundParams p = c.store.bind(nullptr);
  EXPECT_THROW(Evaluator(c.dc, c.nc, p), ConfigError);
  Rig u(ForwardKind::kEnd);
  const BoundParams q = u.store.bind(nullptr);
  EXPECT_THROW(Evaluator(u.dc, u.nc, q, std::vector<int>{1, 1, 1}), ConfigError);
  Evaluator ok(c.dc, c.nc, p, std::vector<int>{1, 2, 0});
  RandomSource r(8);
  const Datapoint x = ok.predict(Var(random_centered(r, 3)), Var(random_matrix(r, 3, 3)), 0.5);
  EXPECT_TRUE(x.r.value().allFinite());
}

TEST(Diffusion, MuOnlyKindUsesFixedVpNoise) {
  Rig s(ForwardKind::kEndMuOnly);
  const BoundParams p = s.store.bind(nullptr);
  Evaluator ev(s.dc, s.nc, p);
  RandomSource r(9);
  const double t = 0.5;
  const AffinePath path = ev.path(Var(random_centered(r, 3)), Var(random_matrix(r, 3, 3)), t);
  const double sigma = vp_alpha_sigma(t, s.dc.beta_min, s.dc.beta_max).second;
  EXPECT_LT(max_abs(path.u.value() - sigma * ad::identity_block_row().replicate(3, 1)), 1e-12);
  EXPECT_LT(max_abs(path.sigma_h.value() - Matrix::Constant(3, 3, sigma)), 1e-12);
}

TEST(Diffusion, LossGradientMatchesFiniteDifferences) {
  Rig s(ForwardKind::kEnd, 0, GSchedule::kLearned);
  RandomSource r(10);
  const Matrix xr = random_centered(r, 3), xh = random_matrix(r, 3, 3);
  const Matrix er = random_centered(r, 3), eh = random_matrix(r, 3, 3);
  auto loss = [&](const BoundParams& p) {
    Evaluator ev(s.dc, s.nc, p);
    return loss_term(ev, pair(xr, xh), 0.45, pair(er, eh));
  };
  const std::vector<double> g = gradient(loss, s.store);
  RandomSource pick(11);
  int checked = 0;
  for (int k = 0; k < 30; ++k) {
    const std::size_t i = pick.uniform_index(s.store.size());
    ParamStore plus = s.store, minus = s.store;
    plus.flat()[i] += 1e-5;
    minus.flat()[i] -= 1e-5;
    const double fd = (loss(plus.bind(nullptr)).item() - loss(minus.bind(nullptr)).item()) / 2e-5;
    EXPECT_LT(std::abs(g[i] - fd), 1e-3 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
    ++checked;
  }
  EXPECT_EQ(checked, 30);
}
