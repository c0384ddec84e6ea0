#pragma once

// Two-track E(3)-equivariant message passing on fully connected graphs.
//
// Hidden state per node: scalars s (H) and vector channels V (Hv vectors in
// R^3). Vectors are stored as a (3M x Hv) matrix, row 3m + k holding the k-th
// Cartesian component of node m, so channel mixing is V * W and a rotation
// acts on each 3-row group. Edge e = (i <- j) for every ordered pair i != j.
//
// Input:   s = [h, time(t)] W_in + b_in,  V = 0
// Layer:   phi   = MLP(s)                                -> [a_s | a_vv | a_vr]
//          filt  = rbf(|r_i - r_j|) W_f + b_f            (same split)
//          x_e   = phi_j * filt_e
//          s_i  += mean_j x_e[a_s]
//          V_i  += mean_j (x_e[a_vv] * V_j + x_e[a_vr] * (r_i - r_j) / (|r_i - r_j| + 1))
//          n     = sqrt(|V W_mix|^2 + 1e-8)              per node and channel
//          [u_s | u_v] = MLP([s, n])
//          s    += u_s,  V += u_v * (V W_v)
//          s    += silu(c W_c + b_c)                     when conditioned
//
// Only invariants (distances, channel norms, t, h, c) enter the scalar track
// and vectors are only ever scaled by invariants or mixed across channels, so
// scalars are O(3)-invariant and vectors O(3)-equivariant. Positions are
// never updated inside the layers.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "endiff/autodiff.hpp"
#include "endiff/errors.hpp"
#include "endiff/forward_transform.hpp"
#include "endiff/params.hpp"

namespace endiff {

struct EquiNetConfig {
  int layers = 3;
  int scalar_width = 64;
  int vector_width = 16;
  int rbf_count = 16;
  double rbf_max = 12.0;
  int time_dim = 16;
  int feature_dim = 5;     // D, width of h
  int condition_dim = 0;   // number of atom types in the condition; 0 disables it
  int condition_embed = 16;
  int condition_hidden = 64;
  double sigma_floor = 1e-6;

  bool conditioned() const { return condition_dim > 0; }

  void validate() const {
    if (layers < 1 || scalar_width < 1 || vector_width < 1 || rbf_count < 1 || time_dim < 2 ||
        feature_dim < 1 || condition_embed < 1 || condition_hidden < 1 || condition_dim < 0)
      throw ConfigError("EquiNetConfig: all widths must be >= 1");
    if (!(rbf_max > 0.0)) throw ConfigError("EquiNetConfig: rbf_max must be positive");
  }
};

/// k-th entry exp(-(d - c_k)^2 / (2 w^2)), c_k evenly spaced on [0, rbf_max],
/// w = spacing.
inline Eigen::RowVectorXd rbf_expand(double d, const EquiNetConfig& cfg) {
  const int k = cfg.rbf_count;
  const double spacing = k > 1 ? cfg.rbf_max / (k - 1) : cfg.rbf_max;
  Eigen::RowVectorXd out(k);
  for (int i = 0; i < k; ++i) {
    const double c = spacing * i;
    out(i) = std::exp(-(d - c) * (d - c) / (2.0 * spacing * spacing));
  }
  return out;
}

/// [sin(w_k t) ..., cos(w_k t) ...] with w_k geometric on [1, 16]. The top
/// frequency is kept low so central differences in t stay accurate.
inline Eigen::RowVectorXd embed_time(double t, int dim) {
  const int half = dim / 2;
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(dim);
  for (int k = 0; k < half; ++k) {
    const double w = half > 1 ? std::pow(16.0, static_cast<double>(k) / (half - 1)) : 1.0;
    out(k) = std::sin(w * t);
    out(half + k) = std::cos(w * t);
  }
  return out;
}

/// Hidden state; `vectors` is 3M x Hv.
struct HiddenState {
  Var scalars;
  Var vectors;

  Eigen::Index nodes() const { return scalars.rows(); }

  /// Vector channel c of node m as a 3-vector.
  Vector3 vector(Eigen::Index m, Eigen::Index c) const {
    return vectors.value().block(3 * m, c, 3, 1);
  }
};

struct Datapoint {
  Var r;  // M x 3, centered
  Var h;  // M x D
};

namespace net {

inline std::string seg(const std::string& prefix, const std::string& name) {
  return prefix + name;
}

inline Var linear(const Var& x, const BoundParams& p, const std::string& w, const std::string& b) {
  return ad::add_row(ad::matmul(x, p[w]), p[b]);
}

struct Edges {
  std::shared_ptr<const std::vector<Eigen::Index>> dst, src, dst3, src3;
  Eigen::Index count = 0;
};

inline Edges fully_connected(Eigen::Index m) {
  auto dst = std::make_shared<std::vector<Eigen::Index>>();
  auto src = std::make_shared<std::vector<Eigen::Index>>();
  auto dst3 = std::make_shared<std::vector<Eigen::Index>>();
  auto src3 = std::make_shared<std::vector<Eigen::Index>>();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j) continue;
      dst->push_back(i);
      src->push_back(j);
      for (int k = 0; k < 3; ++k) {
        dst3->push_back(3 * i + k);
        src3->push_back(3 * j + k);
      }
    }
  return {dst, src, dst3, src3, static_cast<Eigen::Index>(dst->size())};
}

}  // namespace net

/// Registers encoder segments under `prefix`.
inline void add_encoder_params(ParamStore& store, const std::string& prefix,
                               const EquiNetConfig& cfg, RandomSource& rng) {
  cfg.validate();
  const int h = cfg.scalar_width, hv = cfg.vector_width, k = cfg.rbf_count;
  const int split = h + 2 * hv;
  store.add(prefix + "in.w", cfg.feature_dim + cfg.time_dim, h, Init::kFanIn, rng);
  store.add(prefix + "in.b", 1, h, Init::kZero, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    store.add(p + "msg.w1", h, h, Init::kFanIn, rng);
    store.add(p + "msg.b1", 1, h, Init::kZero, rng);
    store.add(p + "msg.w2", h, split, Init::kFanIn, rng);
    store.add(p + "msg.b2", 1, split, Init::kZero, rng);
    store.add(p + "filt.w", k, split, Init::kFanIn, rng);
    store.add(p + "filt.b", 1, split, Init::kZero, rng);
    store.add(p + "upd.mix", hv, hv, Init::kFanIn, rng);
    store.add(p + "upd.w1", h + hv, h, Init::kFanIn, rng);
    store.add(p + "upd.b1", 1, h, Init::kZero, rng);
    store.add(p + "upd.w2", h, h + hv, Init::kFanIn, rng);
    store.add(p + "upd.b2", 1, h + hv, Init::kZero, rng);
    store.add(p + "upd.wv", hv, hv, Init::kFanIn, rng);
    if (cfg.conditioned()) {
      store.add(p + "cond.w", cfg.condition_hidden, h, Init::kFanIn, rng);
      store.add(p + "cond.b", 1, h, Init::kZero, rng);
    }
  }
  if (cfg.conditioned()) {
    store.add(prefix + "comp.types", cfg.condition_dim, cfg.condition_embed, Init::kConstant, rng, 0.0);
    // Per-type embeddings get unit-variance entries.
    RandomSource local = rng.split(prefix + "comp.types.init");
    Matrix emb(cfg.condition_dim, cfg.condition_embed);
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb(i) = local.normal();
    store.set(prefix + "comp.types", emb);
    store.add(prefix + "comp.w1", cfg.condition_dim * cfg.condition_embed, cfg.condition_hidden,
              Init::kFanIn, rng);
    store.add(prefix + "comp.b1", 1, cfg.condition_hidden, Init::kZero, rng);
    store.add(prefix + "comp.w2", cfg.condition_hidden, cfg.condition_hidden, Init::kFanIn, rng);
    store.add(prefix + "comp.b2", 1, cfg.condition_hidden, Init::kZero, rng);
  }
}

/// Heads readout. mu and U_bar factors start at zero, sigma_bar at exactly 1.
inline void add_heads_params(ParamStore& store, const std::string& prefix,
                             const EquiNetConfig& cfg, RandomSource& rng) {
  const int h = cfg.scalar_width, hv = cfg.vector_width, d = cfg.feature_dim;
  const double one = std::log(std::expm1(1.0 - cfg.sigma_floor));  // softplus^-1
  store.add(prefix + "heads.mu_r", hv, 1, Init::kZero, rng);
  store.add(prefix + "heads.ua", hv, 3, Init::kZero, rng);
  store.add(prefix + "heads.ub", hv, 3, Init::kFanIn, rng);
  store.add(prefix + "heads.sig_r.w", h, 1, Init::kZero, rng);
  store.add(prefix + "heads.sig_r.b", 1, 1, Init::kConstant, rng, one);
  store.add(prefix + "heads.sig_h.w", h, d, Init::kZero, rng);
  store.add(prefix + "heads.sig_h.b", 1, d, Init::kConstant, rng, one);
  store.add(prefix + "heads.mu_h.w", h, d, Init::kZero, rng);
  store.add(prefix + "heads.mu_h.b", 1, d, Init::kZero, rng);
}

inline void add_datapoint_params(ParamStore& store, const std::string& prefix,
                                 const EquiNetConfig& cfg, RandomSource& rng) {
  const int h = cfg.scalar_width, hv = cfg.vector_width, d = cfg.feature_dim;
  store.add(prefix + "out.r", hv, 1, Init::kZero, rng);
  store.add(prefix + "out.h.w1", h, h, Init::kFanIn, rng);
  store.add(prefix + "out.h.b1", 1, h, Init::kZero, rng);
  store.add(prefix + "out.h.w2", h, d, Init::kFanIn, rng);
  store.add(prefix + "out.h.b2", 1, d, Init::kZero, rng);
}

/// Invariant embedding of a composition: per-type embeddings weighted by
/// c_d / sum(c), concatenated, then a two-layer MLP. Returns 1 x hidden.
inline Var embed_composition(const std::vector<int>& c, const BoundParams& p,
                             const std::string& prefix, const EquiNetConfig& cfg) {
  if (static_cast<int>(c.size()) != cfg.condition_dim)
    throw InvalidInput("embed_composition: condition length mismatch");
  long total = 0;
  for (int v : c) {
    if (v < 0) throw InvalidInput("embed_composition: negative count");
    total += v;
  }
  if (total == 0) throw InvalidInput("embed_composition: empty composition");
  Matrix w(cfg.condition_dim, 1);
  for (int i = 0; i < cfg.condition_dim; ++i) w(i, 0) = static_cast<double>(c[i]) / total;
  const Var weighted = ad::mul_col(p[prefix + "comp.types"], Var(w));
  const Var flat = ad::reshape(weighted, 1, cfg.condition_dim * cfg.condition_embed);
  const Var hidden = ad::silu(net::linear(flat, p, prefix + "comp.w1", prefix + "comp.b1"));
  return net::linear(hidden, p, prefix + "comp.w2", prefix + "comp.b2");
}

/// Runs the message-passing stack on (positions, features) at time t.
inline HiddenState encode(const Var& positions, const Var& features, double t,
                          const std::optional<Var>& condition, const BoundParams& p,
                          const std::string& prefix, const EquiNetConfig& cfg) {
  const Eigen::Index m = positions.rows();
  if (positions.cols() != 3 || features.rows() != m || features.cols() != cfg.feature_dim)
    throw ConfigError("encode: input shape does not match the network configuration");
  if (cfg.conditioned() != condition.has_value())
    throw ConfigError("encode: condition presence does not match the network configuration");
  const int h = cfg.scalar_width, hv = cfg.vector_width;

  const Var temb(embed_time(t, cfg.time_dim).replicate(m, 1));
  Var s = net::linear(ad::concat_cols({features, temb}), p, prefix + "in.w", prefix + "in.b");
  Var v(Matrix::Zero(3 * m, hv));

  const net::Edges edges = net::fully_connected(m);
  Var rbf, dir_flat;
  if (edges.count > 0) {
    const Var rel = ad::sub(ad::gather_rows(positions, edges.dst), ad::gather_rows(positions, edges.src));
    const Var dist = ad::sqrt(ad::add_scalar(ad::row_sum(ad::square(rel)), 1e-12));
    const int k = cfg.rbf_count;
    const double spacing = k > 1 ? cfg.rbf_max / (k - 1) : cfg.rbf_max;
    Matrix centers(1, k);
    for (int i = 0; i < k; ++i) centers(0, i) = -spacing * i;
    const Var diff = ad::add_row(ad::matmul(dist, Var(Matrix::Ones(1, k))), Var(centers));
    rbf = ad::exp(ad::scale(ad::square(diff), -0.5 / (spacing * spacing)));
    const Var denom = ad::matmul(ad::add_scalar(dist, 1.0), Var(Matrix::Ones(1, 3)));
    dir_flat = ad::reshape(ad::div(rel, denom), 3 * edges.count, 1);
  }
  const double agg = m > 1 ? 1.0 / static_cast<double>(m - 1) : 0.0;

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = prefix + "layer" + std::to_string(l) + ".";
    if (edges.count > 0) {
      const Var phi = net::linear(ad::silu(net::linear(s, p, lp + "msg.w1", lp + "msg.b1")), p,
                                  lp + "msg.w2", lp + "msg.b2");
      const Var filt = net::linear(rbf, p, lp + "filt.w", lp + "filt.b");
      const Var x = ad::mul(ad::gather_rows(phi, edges.src), filt);
      const Var ds = ad::scatter_add_rows(ad::slice_cols(x, 0, h), edges.dst, m);
      const Var gvv = ad::repeat_rows(ad::slice_cols(x, h, hv), 3);
      const Var gvr = ad::repeat_rows(ad::slice_cols(x, h + hv, hv), 3);
      const Var mv = ad::add(ad::mul(gvv, ad::gather_rows(v, edges.src3)), ad::mul_col(gvr, dir_flat));
      const Var dv = ad::scatter_add_rows(mv, edges.dst3, 3 * m);
      s = ad::add(s, ad::scale(ds, agg));
      v = ad::add(v, ad::scale(dv, agg));
    }
    const Var mixed = ad::matmul(v, p[lp + "upd.mix"]);
    const Var norms = ad::sqrt(ad::add_scalar(ad::group_sum_rows(ad::square(mixed), 3), 1e-8));
    const Var u = net::linear(
        ad::silu(net::linear(ad::concat_cols({s, norms}), p, lp + "upd.w1", lp + "upd.b1")), p,
        lp + "upd.w2", lp + "upd.b2");
    s = ad::add(s, ad::slice_cols(u, 0, h));
    v = ad::add(v, ad::mul(ad::repeat_rows(ad::slice_cols(u, h, hv), 3), ad::matmul(v, p[lp + "upd.wv"])));
    if (condition) {
      const Var c = ad::silu(net::linear(*condition, p, lp + "cond.w", lp + "cond.b"));
      s = ad::add(s, ad::broadcast_rows(c, m));
    }
  }
  return {s, v};
}

/// mu_bar_r from one linear map of the vectors; U_bar^m = sum_c a_c b_c^T
/// with a, b two sets of three linear maps of the vectors; sigma_bar via
/// softplus + floor of scalar readouts; mu_bar_h linear in the scalars.
inline ForwardHeads readout_forward_heads(const HiddenState& state, const BoundParams& p,
                                          const std::string& prefix, const EquiNetConfig& cfg) {
  const Eigen::Index m = state.nodes();
  ForwardHeads heads;
  heads.mu_bar_r = ad::project_com(ad::reshape(ad::matmul(state.vectors, p[prefix + "heads.mu_r"]), m, 3));
  heads.u_bar = ad::block_outer(ad::matmul(state.vectors, p[prefix + "heads.ua"]),
                                ad::matmul(state.vectors, p[prefix + "heads.ub"]));
  heads.sigma_bar_r = ad::add_scalar(
      ad::softplus(net::linear(state.scalars, p, prefix + "heads.sig_r.w", prefix + "heads.sig_r.b")),
      cfg.sigma_floor);
  heads.sigma_bar_h = ad::add_scalar(
      ad::softplus(net::linear(state.scalars, p, prefix + "heads.sig_h.w", prefix + "heads.sig_h.b")),
      cfg.sigma_floor);
  heads.mu_bar_h = net::linear(state.scalars, p, prefix + "heads.mu_h.w", prefix + "heads.mu_h.b");
  return heads;
}

/// r_hat = P(z_r + linear(vectors)), h_hat from an MLP on the scalars.
inline Datapoint readout_datapoint(const HiddenState& state, const Var& z_r, const BoundParams& p,
                                   const std::string& prefix) {
  const Eigen::Index m = state.nodes();
  const Var shift = ad::reshape(ad::matmul(state.vectors, p[prefix + "out.r"]), m, 3);
  const Var r = ad::project_com(ad::add(z_r, shift));
  const Var hidden = ad::silu(net::linear(state.scalars, p, prefix + "out.h.w1", prefix + "out.h.b1"));
  return {r, net::linear(hidden, p, prefix + "out.h.w2", prefix + "out.h.b2")};
}

/// Exact gradient of a scalar loss with respect to every parameter.
/// `loss_fn` maps bound parameters to a 1x1 Var.
template <class LossFn>
std::vector<double> gradient(LossFn&& loss_fn, const ParamStore& store, double* loss_out = nullptr) {
  ad::Tape tape;
  const BoundParams bound = store.bind(&tape);
  const Var loss = loss_fn(bound);
  if (!std::isfinite(loss.item())) throw NumericError("loss", "non-finite loss value");
  if (loss_out) *loss_out = loss.item();
  if (!loss.tracked()) return std::vector<double>(store.size(), 0.0);
  tape.backward(loss);
  return bound.gradient();
}

}  // namespace endiff
