#pragma once

#include <span>
#include <vector>

#include "tlens/lens.hpp"

namespace tlens {

enum class HeadBehavior { Promotion, Suppression, None };
const char* to_string(HeadBehavior b);

struct LayerStats {
  double mean = 0.0;
  double stddev = 0.0;  // population form (divide by count)
};

struct HeadFunction {
  bool promotes = false;
  bool suppresses = false;
};

/// How the per-layer baseline is formed.
enum class StatsMode {
  PerToken,  // mu, sigma over the layer's heads for each tracked token
  Pooled,    // mu, sigma over the layer's heads and all tracked tokens together
};
const char* to_string(StatsMode m);

/// [n_layers x n_heads] head functions for one instance.
struct HeadFunctionGrid {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<HeadFunction> cells;

  HeadFunction& at(int layer, int head) { return cells[static_cast<std::size_t>(layer * n_heads + head)]; }
  const HeadFunction& at(int layer, int head) const {
    return cells[static_cast<std::size_t>(layer * n_heads + head)];
  }
};

struct HeadRateTable {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> promotion;    // [layer * n_heads + head]
  std::vector<double> suppression;
  int instances = 0;

  double promotion_rate(int layer, int head) const { return promotion[static_cast<std::size_t>(layer * n_heads + head)]; }
  double suppression_rate(int layer, int head) const {
    return suppression[static_cast<std::size_t>(layer * n_heads + head)];
  }
};

/// Early-decoded logit of `token` from one head's output at the last position.
template <typename Scalar>
Scalar head_token_logit(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer, int head,
                        int token);

LayerStats layer_stats(std::span<const double> logits);

/// Promotion iff logit > mu + sigma; Suppression iff logit < mu - sigma.
HeadBehavior classify(double logit, double mean, double stddev);

HeadFunction head_function(std::span<const HeadBehavior> behaviors);

/// Steps 1-4 for one instance: decode every head on every tracked token,
/// form the layer baselines and fold the behaviors into head functions.
template <typename Scalar>
HeadFunctionGrid classify_heads(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                const std::vector<TrackedToken>& tracked, StatsMode mode = StatsMode::PerToken);

/// Per-head mean of the indicator flags.
HeadRateTable aggregate_rates(std::span<const HeadFunctionGrid> instances);

}  // namespace tlens
