#include "tlens/interventions.hpp"

#include <cmath>

namespace tlens {

namespace {

template <typename Scalar>
Scalar target_probability(const Vector<Scalar>& logits, int target) {
  if (target < 0 || target >= logits.size()) throw Error(ErrorKind::OutOfRange, "target id outside the vocabulary");
  return softmax_row<Scalar>(logits)[target];
}

template <typename Scalar>
const Matrix<Scalar>& clean_component(const ActivationTrace<Scalar>& clean, int layer, Component component) {
  if (layer < 0 || layer >= static_cast<int>(clean.layers.size()))
    throw Error(ErrorKind::OutOfRange, "restoration layer out of range");
  const auto& lt = clean.layers[static_cast<std::size_t>(layer)];
  const auto& m = component == Component::AttentionOut ? lt.attn_out
                  : component == Component::MlpOut    ? lt.mlp_out
                                                       : lt.resid_pre;
  if (m.rows() != clean.seq_len())
    throw Error(ErrorKind::CaptureMiss, "clean trace lacks the restored component at layer " + std::to_string(layer));
  return m;
}

template <typename Scalar>
void add_patches(std::vector<ComponentPatch<Scalar>>& patches, const ActivationTrace<Scalar>& clean,
                 const RestorationSite& site, int window) {
  const int L = clean.config.n_layers;
  if (site.position < 0 || site.position >= clean.seq_len())
    throw Error(ErrorKind::OutOfRange, "restoration position outside the sequence");
  if (site.component == Component::Embedding) {
    const auto& emb = clean_component(clean, 0, Component::Embedding);
    patches.push_back({0, site.position, Component::Embedding, emb.row(site.position).transpose()});
    return;
  }
  for (int l = site.layer; l < std::min(L, site.layer + window); ++l) {
    const auto& m = clean_component(clean, l, site.component);
    patches.push_back({l, site.position, site.component, m.row(site.position).transpose()});
  }
}

}  // namespace

template <typename Scalar>
ActivationTrace<Scalar> knockout_forward(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                         const KnockoutSpec& spec, const CaptureSpec& capture) {
  spec.span.check(static_cast<int>(tokens.size()));
  ForwardEdits<Scalar> edits;
  if (!spec.span.indices.empty())
    edits.knockout = AttentionKnockout{spec.query, spec.span.indices, spec.layers, spec.renormalize};
  return forward(weights, tokens, capture, edits);
}

template <typename Scalar>
LayerLogitSeries<Scalar> mlp_logit_diff(const ActivationTrace<Scalar>& clean, const ActivationTrace<Scalar>& knocked,
                                        const WeightSet<Scalar>& weights, const std::vector<TrackedToken>& tracked) {
  if (clean.tokens != knocked.tokens || !(clean.config == knocked.config) || !(clean.config == weights.config))
    throw Error(ErrorKind::Incompatible, "mlp_logit_diff: traces come from different inputs or models");
  auto a = component_logit_series(clean, weights, Component::MlpOut, tracked);
  const auto b = component_logit_series(knocked, weights, Component::MlpOut, tracked);
  a.values -= b.values;
  a.kind = ValueKind::LogitDiff;
  a.analysis = "knockout_mlp";
  return a;
}

template <typename Scalar>
Matrix<Scalar> corrupt_embeddings(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                  const CorruptionSpec& spec) {
  if (!(spec.noise >= 0.0)) throw Error(ErrorKind::NumericDomain, "noise scale must be non-negative");
  spec.span.check(static_cast<int>(tokens.size()));
  Matrix<Scalar> x = embed(weights, tokens);
  Rng rng(spec.seed);
  for (int p : spec.span.indices) {
    const VectorXd noise = gaussian_draw(rng, weights.config.d_model, 0.0, spec.noise);
    x.row(p) += noise.cast<Scalar>().transpose();
  }
  return x;
}

template <typename Scalar>
double default_noise_scale(const WeightSet<Scalar>& weights) {
  const auto& e = weights.embedding;
  const double n = static_cast<double>(e.size());
  const double mean = e.template cast<double>().sum() / n;
  const double var = (e.template cast<double>().array() - mean).square().sum() / n;
  return 3.0 * std::sqrt(var);
}

template <typename Scalar>
Scalar traced_probability(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                          const CorruptionSpec& corruption, std::span<const RestorationSite> restore,
                          const ActivationTrace<Scalar>& clean, int target, int window) {
  if (clean.tokens.size() != tokens.size() || !std::equal(tokens.begin(), tokens.end(), clean.tokens.begin()))
    throw Error(ErrorKind::Incompatible, "clean trace was captured on a different input");
  ForwardEdits<Scalar> edits;
  edits.embedded = corrupt_embeddings(weights, tokens, corruption);
  for (const auto& site : restore) add_patches(edits.patches, clean, site, window);
  const CaptureSpec light{{}, false};
  return target_probability(forward(weights, tokens, light, edits).logits, target);
}

template <typename Scalar>
TracingGrid<Scalar> causal_trace_grid(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                      const CorruptionSpec& corruption, Component component, int target,
                                      const ActivationTrace<Scalar>& clean, const TracingOptions& options) {
  if (component == Component::Embedding)
    throw Error(ErrorKind::Config, "tracing grids restore attention or MLP outputs");
  if (options.seeds < 1 || options.window < 1) throw Error(ErrorKind::Config, "seeds and window must be >= 1");
  if (clean.tokens.size() != tokens.size() || !std::equal(tokens.begin(), tokens.end(), clean.tokens.begin()))
    throw Error(ErrorKind::Incompatible, "clean trace was captured on a different input");
  const int L = weights.config.n_layers;
  const int T = static_cast<int>(tokens.size());
  TracingGrid<Scalar> grid;
  grid.component = component;
  grid.target = target;
  grid.values = Matrix<Scalar>::Zero(L, T);
  grid.seeds = options.seeds;
  grid.noise = corruption.noise;
  grid.span = corruption.span.indices;

  const CaptureSpec light{{}, false};
  const Scalar inv_seeds = Scalar(1) / static_cast<Scalar>(options.seeds);
  for (int s = 0; s < options.seeds; ++s) {
    CorruptionSpec seeded = corruption;
    seeded.seed = corruption.seed + static_cast<std::uint64_t>(s);
    ForwardEdits<Scalar> base;
    base.embedded = corrupt_embeddings(weights, tokens, seeded);
    const auto corrupted = forward(weights, tokens, light, base);
    const Scalar p_none = target_probability(corrupted.logits, target);

    for (int l = 0; l < L; ++l) {
      for (int p = 0; p < T; ++p) {
        std::vector<ComponentPatch<Scalar>> patches;
        add_patches(patches, clean, RestorationSite{l, p, component}, options.window);
        // A site whose corrupted value already equals the clean value restores
        // nothing, so its difference is exactly zero.
        bool changes = false;
        for (const auto& patch : patches) {
          const auto& lt = corrupted.layers[static_cast<std::size_t>(patch.layer)];
          const auto& cur = component == Component::AttentionOut ? lt.attn_out : lt.mlp_out;
          if (!(cur.row(p).transpose().array() == patch.value.array()).all()) changes = true;
        }
        if (!changes) continue;
        ForwardEdits<Scalar> edits;
        edits.resume_layer = l;
        edits.resume_resid = corrupted.layers[static_cast<std::size_t>(l)].resid_pre;
        edits.patches = std::move(patches);
        const Scalar p_restored = target_probability(forward(weights, tokens, light, edits).logits, target);
        grid.values(l, p) += (p_restored - p_none) * inv_seeds;
      }
    }
  }
  return grid;
}

#define TLENS_INSTANTIATE(S)                                                                                       \
  template ActivationTrace<S> knockout_forward<S>(const WeightSet<S>&, std::span<const int>, const KnockoutSpec&,  \
                                                  const CaptureSpec&);                                             \
  template LayerLogitSeries<S> mlp_logit_diff<S>(const ActivationTrace<S>&, const ActivationTrace<S>&,             \
                                                 const WeightSet<S>&, const std::vector<TrackedToken>&);           \
  template Matrix<S> corrupt_embeddings<S>(const WeightSet<S>&, std::span<const int>, const CorruptionSpec&);      \
  template double default_noise_scale<S>(const WeightSet<S>&);                                                     \
  template S traced_probability<S>(const WeightSet<S>&, std::span<const int>, const CorruptionSpec&,               \
                                   std::span<const RestorationSite>, const ActivationTrace<S>&, int, int);         \
  template TracingGrid<S> causal_trace_grid<S>(const WeightSet<S>&, std::span<const int>, const CorruptionSpec&,   \
                                               Component, int, const ActivationTrace<S>&, const TracingOptions&);

TLENS_INSTANTIATE(float)
TLENS_INSTANTIATE(double)

}  // namespace tlens
