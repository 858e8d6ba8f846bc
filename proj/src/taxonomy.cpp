#include "tlens/taxonomy.hpp"

#include <cmath>

namespace tlens {

const char* to_string(HeadBehavior b) {
  switch (b) {
    case HeadBehavior::Promotion: return "promotion";
    case HeadBehavior::Suppression: return "suppression";
    case HeadBehavior::None: return "none";
  }
  return "?";
}

const char* to_string(StatsMode m) { return m == StatsMode::PerToken ? "per_token" : "pooled"; }

template <typename Scalar>
Scalar head_token_logit(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer, int head,
                        int token) {
  if (token < 0 || token >= weights.config.vocab) throw Error(ErrorKind::OutOfRange, "token id outside the vocabulary");
  const Vector<Scalar> z = per_head_output(trace, weights, layer, head, trace.last());
  const Vector<Scalar> final_hidden = trace.final_resid.row(trace.last()).transpose();
  return early_decode<Scalar>(weights, z, final_hidden)[token];
}

LayerStats layer_stats(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorKind::OutOfRange, "layer_stats needs at least one head");
  double sum = 0.0;
  for (double x : logits) sum += x;
  const double mean = sum / static_cast<double>(logits.size());
  double ss = 0.0;
  for (double x : logits) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(logits.size()))};
}

HeadBehavior classify(double logit, double mean, double stddev) {
  if (logit > mean + stddev) return HeadBehavior::Promotion;
  if (logit < mean - stddev) return HeadBehavior::Suppression;
  return HeadBehavior::None;
}

HeadFunction head_function(std::span<const HeadBehavior> behaviors) {
  if (behaviors.empty()) throw Error(ErrorKind::OutOfRange, "head_function needs at least one behavior");
  HeadFunction f;
  for (auto b : behaviors) {
    f.promotes = f.promotes || b == HeadBehavior::Promotion;
    f.suppresses = f.suppresses || b == HeadBehavior::Suppression;
  }
  return f;
}

template <typename Scalar>
HeadFunctionGrid classify_heads(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                const std::vector<TrackedToken>& tracked, StatsMode mode) {
  if (tracked.empty()) throw Error(ErrorKind::OutOfRange, "classify_heads needs tracked tokens");
  const int L = weights.config.n_layers;
  const int H = weights.config.n_heads;
  const std::size_t K = tracked.size();
  HeadFunctionGrid grid{L, H, std::vector<HeadFunction>(static_cast<std::size_t>(L * H))};
  const Vector<Scalar> final_hidden = trace.final_resid.row(trace.last()).transpose();

  for (int l = 0; l < L; ++l) {
    // logits[h * K + k]
    std::vector<double> logits(static_cast<std::size_t>(H) * K);
    for (int h = 0; h < H; ++h) {
      const Vector<Scalar> z = per_head_output(trace, weights, l, h, trace.last());
      const Vector<Scalar> decoded = early_decode<Scalar>(weights, z, final_hidden);
      for (std::size_t k = 0; k < K; ++k) logits[static_cast<std::size_t>(h) * K + k] = decoded[tracked[k].id];
    }
    std::vector<LayerStats> stats(K);
    if (mode == StatsMode::Pooled) {
      const LayerStats pooled = layer_stats(logits);
      std::fill(stats.begin(), stats.end(), pooled);
    } else {
      std::vector<double> column(static_cast<std::size_t>(H));
      for (std::size_t k = 0; k < K; ++k) {
        for (int h = 0; h < H; ++h) column[static_cast<std::size_t>(h)] = logits[static_cast<std::size_t>(h) * K + k];
        stats[k] = layer_stats(column);
      }
    }
    std::vector<HeadBehavior> behaviors(K);
    for (int h = 0; h < H; ++h) {
      for (std::size_t k = 0; k < K; ++k)
        behaviors[k] = classify(logits[static_cast<std::size_t>(h) * K + k], stats[k].mean, stats[k].stddev);
      grid.at(l, h) = head_function(behaviors);
    }
  }
  return grid;
}

HeadRateTable aggregate_rates(std::span<const HeadFunctionGrid> instances) {
  if (instances.empty()) throw Error(ErrorKind::EmptyCohort, "aggregate_rates needs at least one instance");
  HeadRateTable t;
  t.n_layers = instances.front().n_layers;
  t.n_heads = instances.front().n_heads;
  const auto cells = static_cast<std::size_t>(t.n_layers * t.n_heads);
  std::vector<long> promo(cells, 0), supp(cells, 0);
  for (const auto& g : instances) {
    if (g.n_layers != t.n_layers || g.n_heads != t.n_heads || g.cells.size() != cells)
      throw Error(ErrorKind::Incompatible, "head grids from different model shapes");
    for (std::size_t i = 0; i < cells; ++i) {
      promo[i] += g.cells[i].promotes ? 1 : 0;
      supp[i] += g.cells[i].suppresses ? 1 : 0;
    }
  }
  t.instances = static_cast<int>(instances.size());
  t.promotion.resize(cells);
  t.suppression.resize(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    t.promotion[i] = static_cast<double>(promo[i]) / t.instances;
    t.suppression[i] = static_cast<double>(supp[i]) / t.instances;
  }
  return t;
}

template float head_token_logit<float>(const ActivationTrace<float>&, const WeightSet<float>&, int, int, int);
template double head_token_logit<double>(const ActivationTrace<double>&, const WeightSet<double>&, int, int, int);
template HeadFunctionGrid classify_heads<float>(const ActivationTrace<float>&, const WeightSet<float>&,
                                                const std::vector<TrackedToken>&, StatsMode);
template HeadFunctionGrid classify_heads<double>(const ActivationTrace<double>&, const WeightSet<double>&,
                                                 const std::vector<TrackedToken>&, StatsMode);

}  // namespace tlens
