#pragma once

#include <cstdint>
#include <vector>

#include "tlens/model.hpp"
#include "tlens/numerics.hpp"

namespace tlens::testing {

inline ModelConfig micro_config(int layers = 3, int heads = 2, int vocab = 24) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_head = 4;
  c.d_model = heads * 4;
  c.d_mlp = 16;
  c.vocab = vocab;
  c.ctx = 32;
  return c;
}

// Weights with entries large enough that attention is far from uniform.
template <typename Scalar>
WeightSet<Scalar> random_weights(const ModelConfig& config, std::uint64_t seed, double std = 0.4) {
  auto w = WeightSet<Scalar>::zeros(config);
  Rng rng(seed);
  w.visit([&](const std::string& name, auto& a) {
    const bool gain = name.ends_with("norm");
    for (Eigen::Index i = 0; i < a.size(); ++i)
      a.data()[i] = static_cast<Scalar>(gain ? 1.0 + 0.2 * rng.normal() : std * rng.normal());
  });
  return w;
}

inline std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
  std::vector<int> t(static_cast<std::size_t>(len));
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace tlens::testing
