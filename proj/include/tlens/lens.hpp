#pragma once

#include <string>
#include <vector>

#include "tlens/model.hpp"

namespace tlens {

enum class SpanRole { Subject, Answer, LastToken, Custom };

/// A set of input positions t = {t_1..t_k}, strictly increasing.
struct TokenSpanSet {
  SpanRole role = SpanRole::Custom;
  int answer = 0;  // 1-based answer index when role == Answer
  std::vector<int> indices;

  static TokenSpanSet subject(std::vector<int> indices);
  static TokenSpanSet answer_span(int answer, std::vector<int> indices);
  static TokenSpanSet last_token(int seq_len);
  static TokenSpanSet custom(std::vector<int> indices);
  static TokenSpanSet empty() { return {}; }

  /// "subject", "answer_2", "last_token" or "custom".
  std::string label() const;
  /// Throws out-of-range unless indices are strictly increasing and < seq_len.
  void check(int seq_len) const;
};

enum class ValueKind { Logit, LogitDiff, ProbDiff };
const char* to_string(ValueKind k);

struct TrackedToken {
  std::string label;  // "subject", "answer_1", ...
  int id = 0;
};

/// Per-layer values for a set of tracked vocabulary tokens: values(l, j).
template <typename Scalar>
struct LayerLogitSeries {
  ValueKind kind = ValueKind::Logit;
  std::vector<TrackedToken> tracked;
  Matrix<Scalar> values;  // [n_layers x tracked]
  std::string analysis;
  int instance = -1;
  int step = 0;
  int cohort = 1;  // number of per-instance series aggregated into this one
  std::string aggregation = "none";
};

/// Logit lens with the final norm's statistic taken from `final_hidden`.
template <typename Scalar>
Vector<Scalar> early_decode(const WeightSet<Scalar>& weights, const VectorRef<Scalar>& z,
                            const VectorRef<Scalar>& final_hidden);

/// Early-decoded attention or MLP contribution at the last position, per layer.
template <typename Scalar>
LayerLogitSeries<Scalar> component_logit_series(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                                Component component, const std::vector<TrackedToken>& tracked);

/// sum_{j in span} p_j v_j for one head, query fixed at the last position. [d_head]
template <typename Scalar>
Vector<Scalar> token_lens_head(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer,
                               int head, const TokenSpanSet& span);

/// W_o * concat_h(token_lens_head(h)); the part of the layer's attention output
/// that flows from the span. [d]
template <typename Scalar>
Vector<Scalar> token_lens_layer(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer,
                                const TokenSpanSet& span);

template <typename Scalar>
LayerLogitSeries<Scalar> token_lens_series(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights,
                                           const TokenSpanSet& span, const std::vector<TrackedToken>& tracked);

}  // namespace tlens
