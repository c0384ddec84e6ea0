#pragma once

// Everything a trained model carries: configuration, vocabulary, the
// empirical size distribution and the parameter store.

#include <cstdint>

#include "endiff/diffusion.hpp"
#include "endiff/equinet.hpp"
#include "endiff/molecule.hpp"
#include "endiff/params.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct Model {
  DiffusionConfig diffusion;
  EquiNetConfig net;
  AtomVocabulary vocab;
  SizeDistribution sizes;
  ParamStore params;

  bool conditional() const { return net.conditioned(); }

  /// Fresh parameters. `net.feature_dim` and `net.condition_dim` are derived
  /// from the vocabulary.
  static Model create(const DiffusionConfig& dc, EquiNetConfig nc, const AtomVocabulary& vocab,
                      const SizeDistribution& sizes, bool conditional, std::uint64_t seed) {
    nc.feature_dim = vocab.size();
    nc.condition_dim = conditional ? vocab.size() : 0;
    Model m{dc, nc, vocab, sizes, {}};
    RandomSource rng = RandomSource(seed).split(streams::kInit);
    init_model_params(m.params, dc, nc, rng);
    return m;
  }
};

}  // namespace endiff
