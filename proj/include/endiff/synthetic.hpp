#pragma once

// Built-in template geometries and the jittered, randomly rotated synthetic
// datasets drawn from them.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "endiff/errors.hpp"
#include "endiff/geom.hpp"
#include "endiff/molecule.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct Template {
  std::string name;
  std::vector<std::string> elements;
  Matrix positions;  // centered
};

namespace detail {

/// Unit vectors to the corners of a regular tetrahedron.
inline Matrix tetra_dirs() {
  Matrix d(4, 3);
  d << 1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1;
  return d / std::sqrt(3.0);
}

inline Template make_template(std::string name, std::vector<std::string> elements, Matrix pos) {
  return {std::move(name), std::move(elements), zero_com_project(pos)};
}

}  // namespace detail

/// tetra:   C4 regular tetrahedron, edge 1.54
/// chain5:  C-C-C-C-O planar zigzag, C-C 1.54, C-O 1.43, angles 109.5 deg
/// methane: CH4, C-H 1.09, tetrahedral
/// ammonia: NH3, N-H 1.01, three tetrahedral directions
/// water:   H2O, O-H 0.96, angle 104.5 deg
inline Template builtin_template(const std::string& name) {
  using detail::make_template;
  if (name == "tetra") {
    const double r = 1.54 / std::sqrt(8.0 / 3.0);  // circumradius for edge 1.54
    return make_template(name, {"C", "C", "C", "C"}, detail::tetra_dirs() * r);
  }
  if (name == "chain5") {
    const double half = 0.5 * 109.5 * std::numbers::pi / 180.0;
    const std::vector<double> bonds = {1.54, 1.54, 1.54, 1.43};
    Matrix p = Matrix::Zero(5, 3);
    for (int i = 0; i < 4; ++i) {
      const double sign = i % 2 == 0 ? 1.0 : -1.0;
      p(i + 1, 0) = p(i, 0) + bonds[static_cast<std::size_t>(i)] * std::sin(half);
      p(i + 1, 1) = p(i, 1) + sign * bonds[static_cast<std::size_t>(i)] * std::cos(half);
    }
    return make_template(name, {"C", "C", "C", "C", "O"}, p);
  }
  if (name == "methane") {
    Matrix p = Matrix::Zero(5, 3);
    p.bottomRows(4) = detail::tetra_dirs() * 1.09;
    return make_template(name, {"C", "H", "H", "H", "H"}, p);
  }
  if (name == "ammonia") {
    Matrix p = Matrix::Zero(4, 3);
    p.bottomRows(3) = detail::tetra_dirs().topRows(3) * 1.01;
    return make_template(name, {"N", "H", "H", "H"}, p);
  }
  if (name == "water") {
    const double half = 0.5 * 104.5 * std::numbers::pi / 180.0;
    Matrix p(3, 3);
    p << 0, 0, 0, 0.96 * std::sin(half), 0.96 * std::cos(half), 0, -0.96 * std::sin(half),
        0.96 * std::cos(half), 0;
    return make_template(name, {"O", "H", "H"}, p);
  }
  throw ConfigError("unknown template '" + name + "'");
}

inline std::vector<std::string> builtin_template_names() {
  return {"tetra", "chain5", "methane", "ammonia", "water"};
}

inline MoleculeRecord template_record(const Template& t, const AtomVocabulary& vocab) {
  MoleculeRecord rec;
  rec.positions = t.positions;
  rec.tag = t.name;
  for (const auto& e : t.elements) rec.types.push_back(vocab.index(e));
  return rec;
}

/// Each sample: uniformly chosen template, random O(3) element, i.i.d.
/// N(0, jitter^2) positional noise, recentered. Each sample draws from its
/// own stream so the dataset prefix does not depend on `count`.
inline std::vector<MoleculeRecord> gen_synthetic(const std::vector<Template>& templates, double jitter,
                                                 int count, const RandomSource& rng,
                                                 const AtomVocabulary& vocab) {
  if (templates.empty()) throw ConfigError("gen_synthetic: no templates");
  if (count < 1) throw ConfigError("gen_synthetic: count must be positive");
  if (!(jitter >= 0.0)) throw ConfigError("gen_synthetic: jitter must be non-negative");
  std::vector<MoleculeRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  const RandomSource base = rng.split(streams::kData);
  for (int i = 0; i < count; ++i) {
    RandomSource local = base.split(static_cast<std::uint64_t>(i));
    const Template& t = templates[local.uniform_index(templates.size())];
    RandomSource rot_rng = local.split(streams::kRotation);
    const Rotation rot = random_rotation(rot_rng, true);
    MoleculeRecord rec = template_record(t, vocab);
    rec.positions = rotate_positions(rot, t.positions);
    if (jitter > 0.0) {
      RandomSource noise = local.split(streams::kNoise);
      for (Eigen::Index a = 0; a < rec.positions.rows(); ++a)
        for (int k = 0; k < 3; ++k) rec.positions(a, k) += jitter * noise.normal();
    }
    rec.positions = zero_com_project(rec.positions);
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<Template> templates_by_name(const std::vector<std::string>& names) {
  std::vector<Template> out;
  for (const auto& n : names) out.push_back(builtin_template(n));
  return out;
}

}  // namespace endiff
