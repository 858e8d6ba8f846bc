#include "tlens/lens.hpp"

namespace tlens {

TokenSpanSet TokenSpanSet::subject(std::vector<int> indices) { return {SpanRole::Subject, 0, std::move(indices)}; }

TokenSpanSet TokenSpanSet::answer_span(int answer, std::vector<int> indices) {
  return {SpanRole::Answer, answer, std::move(indices)};
}

TokenSpanSet TokenSpanSet::last_token(int seq_len) { return {SpanRole::LastToken, 0, {seq_len - 1}}; }

TokenSpanSet TokenSpanSet::custom(std::vector<int> indices) { return {SpanRole::Custom, 0, std::move(indices)}; }

std::string TokenSpanSet::label() const {
  switch (role) {
    case SpanRole::Subject: return "subject";
    case SpanRole::Answer: return "answer_" + std::to_string(answer);
    case SpanRole::LastToken: return "last_token";
    case SpanRole::Custom: return "custom";
  }
  return "custom";
}

void TokenSpanSet::check(int seq_len) const {
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= seq_len)
      throw Error(ErrorKind::OutOfRange, "span index " + std::to_string(indices[i]) + " beyond key range");
    if (i > 0 && indices[i] <= indices[i - 1])
      throw Error(ErrorKind::OutOfRange, "span indices must be strictly increasing");
  }
}

const char* to_string(ValueKind k) {
  switch (k) {
    case ValueKind::Logit: return "logit";
    case ValueKind::LogitDiff: return "logit_diff";
    case ValueKind::ProbDiff: return "prob_diff";
  }
  return "?";
}

template <typename Scalar>
Vector<Scalar> early_decode(const WeightSet<Scalar>& weights, const VectorRef<Scalar>& z,
                            const VectorRef<Scalar>& final_hidden) {
  return decode_with_final_norm<Scalar>(weights, z, final_hidden);
}

namespace {

void check_tracked(const std::vector<TrackedToken>& tracked, int vocab) {
  for (const auto& t : tracked)
    if (t.id < 0 || t.id >= vocab)
      throw Error(ErrorKind::OutOfRange, "tracked token " + t.label + " has vocab id outside the vocabulary");
}

template <typename Scalar>
LayerLogitSeries<Scalar> empty_series(const ActivationTrace<Scalar>& trace, const std::vector<TrackedToken>& tracked,
                                      ValueKind kind) {
  LayerLogitSeries<Scalar> s;
  s.kind = kind;
  s.tracked = tracked;
  s.values = Matrix<Scalar>::Zero(trace.config.n_layers, static_cast<Eigen::Index>(tracked.size()));
  return s;
}

}  // namespace

template <typename Scalar>
LayerLogitSeries<Scalar> component_logit_series(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                                Component component, const std::vector<TrackedToken>& tracked) {
  check_tracked(tracked, weights.config.vocab);
  if (component == Component::Embedding)
    throw Error(ErrorKind::Config, "component series are defined for attention or MLP outputs");
  auto s = empty_series(trace, tracked, ValueKind::Logit);
  s.analysis = component == Component::AttentionOut ? "logit_lens_attn" : "logit_lens_mlp";
  const int last = trace.last();
  const Vector<Scalar> final_hidden = trace.final_resid.row(last).transpose();
  for (int l = 0; l < trace.config.n_layers; ++l) {
    const auto& lt = trace.layers[static_cast<std::size_t>(l)];
    const auto& src = component == Component::AttentionOut ? lt.attn_out : lt.mlp_out;
    if (src.rows() != trace.seq_len()) throw Error(ErrorKind::CaptureMiss, "layer output not captured");
    const Vector<Scalar> z = src.row(last).transpose();
    const Vector<Scalar> logits = early_decode<Scalar>(weights, z, final_hidden);
    for (std::size_t j = 0; j < tracked.size(); ++j) s.values(l, static_cast<Eigen::Index>(j)) = logits[tracked[j].id];
  }
  return s;
}

template <typename Scalar>
Vector<Scalar> token_lens_head(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer,
                               int head, const TokenSpanSet& span) {
  span.check(trace.seq_len());
  const int dh = weights.config.d_head;
  if (head < 0 || head >= weights.config.n_heads) throw Error(ErrorKind::OutOfRange, "head index out of range");
  const auto& rows = trace.attention_rows(layer, trace.last());
  const auto& values = trace.value_vectors(layer);
  Vector<Scalar> out = Vector<Scalar>::Zero(dh);
  for (int j : span.indices) out += rows(head, j) * values.row(j).segment(head * dh, dh).transpose();
  return out;
}

template <typename Scalar>
Vector<Scalar> token_lens_layer(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer,
                                const TokenSpanSet& span) {
  const int dh = weights.config.d_head;
  const int H = weights.config.n_heads;
  Vector<Scalar> concat(H * dh);
  for (int h = 0; h < H; ++h) concat.segment(h * dh, dh) = token_lens_head(trace, weights, layer, h, span);
  return weights.layers[static_cast<std::size_t>(layer)].wo * concat;
}

template <typename Scalar>
LayerLogitSeries<Scalar> token_lens_series(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                           const TokenSpanSet& span, const std::vector<TrackedToken>& tracked) {
  check_tracked(tracked, weights.config.vocab);
  auto s = empty_series(trace, tracked, ValueKind::Logit);
  s.analysis = "token_lens_" + span.label();
  const Vector<Scalar> final_hidden = trace.final_resid.row(trace.last()).transpose();
  for (int l = 0; l < trace.config.n_layers; ++l) {
    const Vector<Scalar> z = token_lens_layer(trace, weights, l, span);
    const Vector<Scalar> logits = early_decode<Scalar>(weights, z, final_hidden);
    for (std::size_t j = 0; j < tracked.size(); ++j) s.values(l, static_cast<Eigen::Index>(j)) = logits[tracked[j].id];
  }
  return s;
}

#define TLENS_INSTANTIATE(S)                                                                                       \
  template Vector<S> early_decode<S>(const WeightSet<S>&, const VectorRef<S>&, const VectorRef<S>&);               \
  template LayerLogitSeries<S> component_logit_series<S>(const ActivationTrace<S>&, const WeightSet<S>&, Component, \
                                                         const std::vector<TrackedToken>&);                        \
  template Vector<S> token_lens_head<S>(const ActivationTrace<S>&, const WeightSet<S>&, int, int,                  \
                                        const TokenSpanSet&);                                                      \
  template Vector<S> token_lens_layer<S>(const ActivationTrace<S>&, const WeightSet<S>&, int, const TokenSpanSet&); \
  template LayerLogitSeries<S> token_lens_series<S>(const ActivationTrace<S>&, const WeightSet<S>&,                \
                                                    const TokenSpanSet&, const std::vector<TrackedToken>&);

TLENS_INSTANTIATE(float)
TLENS_INSTANTIATE(double)

}  // namespace tlens
