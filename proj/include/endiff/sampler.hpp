#pragma once

// Euler-Maruyama integration of the generative SDE from t = 1 - t_min down
// to t_min on a uniform grid, followed by a deterministic decode.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "endiff/diffusion.hpp"
#include "endiff/errors.hpp"
#include "endiff/geom.hpp"
#include "endiff/model.hpp"
#include "endiff/molecule.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct Latent {
  Matrix r;
  Matrix h;
};

using DriftFn = std::function<Latent(const Latent& z, double t)>;
using DiffusionFn = std::function<double(double t)>;

struct StepInfo {
  int step = 0;
  double t = 0.0;  // time after the step
  const Latent* z = nullptr;
};

/// z <- z - f(z, t) dt + g(t) sqrt(dt) w, with w invariant noise (positions
/// projected). Starts at t = 1 - t_min and stops at t_min.
inline Latent integrate_reverse(Latent z, const DriftFn& drift, const DiffusionFn& g, int steps,
                                double t_min, RandomSource& rng,
                                const std::function<void(const StepInfo&)>& observer = {}) {
  if (steps < 1) throw ConfigError("integrate_reverse: steps must be positive");
  const double dt = (1.0 - 2.0 * t_min) / steps;
  const double sq = std::sqrt(dt);
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - t_min - k * dt;
    const Latent f = drift(z, t);
    const double gt = g(t);
    const InvariantNoise w = sample_invariant_noise(z.r.rows(), z.h.cols(), rng);
    z.r = z.r - f.r * dt + gt * sq * w.positions;
    z.h = z.h - f.h * dt + gt * sq * w.features;
    if (!z.r.allFinite() || !z.h.allFinite())
      throw NumericError("sampler", "non-finite latent at step " + std::to_string(k));
    if (observer) observer({k, t - dt, &z});
  }
  return z;
}

struct SampleOptions {
  int count = 1;
  int steps = 100;
  std::uint64_t seed = 0;
  /// Per-chain compositions; chain i uses prompts[i % size]. Required for
  /// conditional models, where N = sum(c).
  std::vector<std::vector<int>> prompts;
};

struct SampleBatch {
  std::vector<MoleculeRecord> molecules;
  std::vector<int> chain_of;  // chain index of each molecule
  std::vector<int> failed_chains;
  std::vector<std::string> failures;
  double max_com_drift = 0.0;  // largest |column mean| of z_r seen at any step
};

/// Generative drift and g of a model with plain (untracked) parameters.
struct ModelDynamics {
  const Model& model;
  BoundParams params;
  std::optional<std::vector<int>> condition;

  ModelDynamics(const Model& m, std::optional<std::vector<int>> c)
      : model(m), params(m.params.bind(nullptr)), condition(std::move(c)) {}

  Latent drift(const Latent& z, double t) const {
    Evaluator ev(model.diffusion, model.net, params, condition);
    const StatePair f = generative_drift(ev, {Var(z.r), Var(z.h)}, t, ev.g(t));
    return {f.r.value(), f.h.value()};
  }

  double g(double t) const {
    Evaluator ev(model.diffusion, model.net, params, condition);
    return ev.g(t).item();
  }

  Latent predict(const Latent& z, double t) const {
    Evaluator ev(model.diffusion, model.net, params, condition);
    const Datapoint x = ev.predict(Var(z.r), Var(z.h), t);
    return {x.r.value(), x.h.value()};
  }
};

/// One chain: N atoms, z ~ invariant unit Gaussian, integrate, decode with
/// the predictor at t_min and argmax over the type channels.
inline MoleculeRecord sample_chain(const Model& model, int n_atoms,
                                   const std::optional<std::vector<int>>& condition, int steps,
                                   RandomSource& rng, double* max_com_drift = nullptr) {
  const ModelDynamics dyn(model, condition);
  RandomSource prior_rng = rng.split(streams::kNoise);
  RandomSource path_rng = rng.split(streams::kTime);
  const InvariantNoise z1 = sample_invariant_noise(n_atoms, model.net.feature_dim, prior_rng);
  double drift_seen = max_abs_column_mean(z1.positions);
  const Latent z0 = integrate_reverse(
      {z1.positions, z1.features}, [&](const Latent& z, double t) { return dyn.drift(z, t); },
      [&](double t) { return dyn.g(t); }, steps, model.diffusion.t_min, path_rng,
      [&](const StepInfo& s) { drift_seen = std::max(drift_seen, max_abs_column_mean(s.z->r)); });
  if (max_com_drift) *max_com_drift = std::max(*max_com_drift, drift_seen);
  const Latent x = dyn.predict(z0, model.diffusion.t_min);
  if (!x.r.allFinite() || !x.h.allFinite()) throw NumericError("decode", "non-finite prediction");
  MoleculeRecord rec = decode_graph(x.r, x.h, model.vocab, model.diffusion.feature_scale);
  if (condition) rec.tag = format_composition(*condition, model.vocab);
  return rec;
}

inline SampleBatch sample(const Model& model, const SampleOptions& opt) {
  if (opt.count < 0) throw ConfigError("sample count must be non-negative");
  if (opt.steps < 2) throw ConfigError("sampling needs at least 2 steps");
  if (model.conditional() && opt.prompts.empty())
    throw ConfigError("conditional model needs composition prompts");
  if (!model.conditional() && !opt.prompts.empty())
    throw ConfigError("composition prompts given to an unconditional model");
  const RandomSource base = RandomSource(opt.seed).split(streams::kNoise);
  SampleBatch out;
  for (int i = 0; i < opt.count; ++i) {
    RandomSource chain = base.split(static_cast<std::uint64_t>(i));
    std::optional<std::vector<int>> cond;
    int n = 0;
    if (model.conditional()) {
      cond = opt.prompts[static_cast<std::size_t>(i) % opt.prompts.size()];
      for (int c : *cond) n += c;
      if (n < 1) throw InvalidInput("empty composition prompt");
    } else {
      RandomSource size_rng = chain.split(streams::kSize);
      n = model.sizes.sample(size_rng);
    }
    try {
      out.molecules.push_back(sample_chain(model, n, cond, opt.steps, chain, &out.max_com_drift));
      out.chain_of.push_back(i);
    } catch (const NumericError& e) {
      out.failed_chains.push_back(i);
      out.failures.push_back("chain " + std::to_string(i) + ": " + e.what());
    } catch (const SingularTransform& e) {
      out.failed_chains.push_back(i);
      out.failures.push_back("chain " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace endiff
