#pragma once

// Minibatch training on the drift-matching loss with Adam and global
// gradient-norm clipping.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "endiff/diffusion.hpp"
#include "endiff/errors.hpp"
#include "endiff/geom.hpp"
#include "endiff/model.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct TrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw ConfigError("train steps must be non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  }
};

class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg) : m_(n, 0.0), v_(n, 0.0), cfg_(cfg) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_eps);
    }
  }

 private:
  std::vector<double> m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

/// Scales `grad` in place so that its norm is at most `max_norm`; returns
/// the norm before clipping.
inline double clip_gradient(std::vector<double>& grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

struct TrainStep {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<TrainStep> trace;
  bool diverged = false;
  std::string divergence;
};

/// Random draws for one batch element: data index, time, noise.
struct TrainDraw {
  std::size_t index = 0;
  double t = 0.5;
  InvariantNoise eps;
};

inline TrainDraw draw_training_tuple(const RandomSource& base, int step, int element,
                                     const std::vector<GeometricGraph>& data, double t_min) {
  RandomSource rng = base.split(static_cast<std::uint64_t>(step)).split(static_cast<std::uint64_t>(element));
  RandomSource data_rng = rng.split(streams::kData);
  RandomSource time_rng = rng.split(streams::kTime);
  RandomSource noise_rng = rng.split(streams::kNoise);
  TrainDraw d;
  d.index = data_rng.uniform_index(data.size());
  d.t = t_min + (1.0 - 2.0 * t_min) * time_rng.uniform();
  const GeometricGraph& x = data[d.index];
  d.eps = sample_invariant_noise(x.node_count(), x.feature_dim(), noise_rng);
  return d;
}

/// Loss of one (x, t, eps) tuple as a function of the bound parameters.
inline Var tuple_loss(const Model& model, const BoundParams& p, const GeometricGraph& x, double t,
                      const InvariantNoise& eps) {
  Evaluator ev(model.diffusion, model.net, p,
               model.conditional() ? x.condition : std::optional<std::vector<int>>{});
  return loss_term(ev, {Var(x.positions), Var(x.features)}, t,
                   {Var(eps.positions), Var(eps.features)});
}

/// Runs `cfg.steps` optimizer steps. On a non-finite loss or gradient the
/// loop stops and the parameters keep their last finite values.
inline TrainResult train(Model& model, const std::vector<GeometricGraph>& data, const TrainConfig& cfg,
                         const std::function<void(const TrainStep&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw InvalidInput("train: empty dataset");
  for (const auto& x : data) {
    if (x.feature_dim() != model.net.feature_dim)
      throw InvalidInput("train: dataset features do not match the model vocabulary");
    if (model.conditional() && !x.condition)
      throw InvalidInput("train: conditional model needs compositions in the dataset");
  }
  const RandomSource base = RandomSource(cfg.seed).split(streams::kTime);
  Adam adam(model.params.size(), cfg);
  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const double inv_b = 1.0 / cfg.batch_size;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<double> grad(model.params.size(), 0.0);
    double loss = 0.0;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const TrainDraw d = draw_training_tuple(base, step, b, data, model.diffusion.t_min);
        double l = 0.0;
        const auto g = gradient(
            [&](const BoundParams& p) { return tuple_loss(model, p, data[d.index], d.t, d.eps); },
            model.params, &l);
        loss += l * inv_b;
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i] * inv_b;
      }
    } catch (const NumericError& e) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": " + e.what();
      break;
    } catch (const SingularTransform& e) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    const double norm = clip_gradient(grad, cfg.clip_norm);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": non-finite loss or gradient";
      break;
    }
    std::vector<double> before = model.params.flat();
    adam.step(model.params.flat(), grad);
    if (!model.params.all_finite()) {
      model.params.flat() = std::move(before);
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": non-finite parameters after update";
      break;
    }
    TrainStep rec;
    rec.step = step;
    rec.loss = loss;
    rec.grad_norm = norm;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.trace.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

}  // namespace endiff
