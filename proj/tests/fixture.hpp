#pragma once

// A tiny assembled model and dataset for engine-level tests.

#include "dnpg/engine.hpp"
#include "fd.hpp"

namespace dnpg::testing {

struct Tiny {
  Dataset data = make_synthetic_dataset(20, 6, 12, 0.2, 3);
  ClassSplit split = make_contiguous_split(10, 5, 5);
  int ways = 3, shots = 2, queries = 4;

  DnpgModel model(const AblationFlags& flags, int num_generators = 3, std::uint64_t seed = 1) const {
    Rng rng(seed);
    Rng enc_rng = rng.split(0), w_rng = rng.split(1), init = rng.split(2);
    Encoder enc = Encoder::init({6, 8, 5}, enc_rng);
    Matrix base = random_matrix(10, 5, w_rng);
    OpenWeightBank bank{random_matrix(10, 5, w_rng), true};
    ModelConfig cfg;
    cfg.num_generators = num_generators;
    cfg.rpc_identity_scale = 1.0;
    DnpgModel m = DnpgModel::assemble(std::move(enc), std::move(base), std::move(bank), cfg, flags, init);
    // Move the value projection and bias off their neutral starts so every
    // parameter has a generic gradient.
    m.rpc.wv = random_matrix(5, 5, w_rng, 0.3);
    m.head.bias(0, 0) = 0.2;
    return m;
  }

  MetaTrainConfig meta(int steps) const {
    MetaTrainConfig c;
    c.steps = steps;
    c.ways = ways, c.shots = shots, c.queries = queries;
    return c;
  }
};

inline AblationFlags all_on() { return {true, true, true, true, false}; }
inline AblationFlags baseline_flags() { return {false, false, false, false, false}; }

}  // namespace dnpg::testing
