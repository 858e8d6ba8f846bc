#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tlens/lens.hpp"

namespace tlens {

/// Sever attention from the query position to `span` keys.
struct KnockoutSpec {
  TokenSpanSet span;
  std::vector<int> layers;  // empty: every layer
  int query = -1;           // -1: last position
  bool renormalize = false; // off: weights are zeroed and left as is
};

/// Gaussian noise N(0, noise^2) added to the embedding rows of `span`.
struct CorruptionSpec {
  TokenSpanSet span;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

/// Component::Embedding restores the clean embedding row; `layer` is ignored.
struct RestorationSite {
  int layer = 0;
  int position = 0;
  Component component = Component::MlpOut;
};

template <typename Scalar>
struct TracingGrid {
  Component component = Component::MlpOut;
  int target = 0;
  Matrix<Scalar> values;  // [n_layers x seq_len] probability differences
  int seeds = 0;
  double noise = 0.0;
  std::vector<int> span;
};

struct TracingOptions {
  int seeds = 3;
  int window = 1;  // restore layers [l, l + window) at the same position
};

template <typename Scalar>
ActivationTrace<Scalar> knockout_forward(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                         const KnockoutSpec& spec, const CaptureSpec& capture = {});

/// Row l: decode(m^(l)) - decode(m'^(l)) on the tracked tokens, each side
/// normalised with its own run's final residual.
template <typename Scalar>
LayerLogitSeries<Scalar> mlp_logit_diff(const ActivationTrace<Scalar>& clean, const ActivationTrace<Scalar>& knocked,
                                        const WeightSet<Scalar>& weights, const std::vector<TrackedToken>& tracked);

template <typename Scalar>
Matrix<Scalar> corrupt_embeddings(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                  const CorruptionSpec& spec);

/// 3x the standard deviation of all token-embedding entries.
template <typename Scalar>
double default_noise_scale(const WeightSet<Scalar>& weights);

/// Probability of `target` at the last position of the corrupted run, with the
/// given sites restored to their clean values.
template <typename Scalar>
Scalar traced_probability(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                          const CorruptionSpec& corruption, std::span<const RestorationSite> restore,
                          const ActivationTrace<Scalar>& clean, int target, int window = 1);

/// grid(l, p) = P(restore (l, p)) - P(no restore), averaged over seeds
/// corruption.seed, corruption.seed + 1, ...
template <typename Scalar>
TracingGrid<Scalar> causal_trace_grid(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                      const CorruptionSpec& corruption, Component component, int target,
                                      const ActivationTrace<Scalar>& clean, const TracingOptions& options = {});

}  // namespace tlens
