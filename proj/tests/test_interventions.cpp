#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fixtures.hpp"
#include "tlens/interventions.hpp"

using namespace tlens;
using namespace tlens::testing;

namespace {

template <typename M>
bool same_bits(const M& a, const M& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(*a.data()) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_trace(const ActivationTrace<float>& a, const ActivationTrace<float>& b) {
  if (!same_bits(a.logits, b.logits) || !same_bits(a.final_resid, b.final_resid)) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto &x = a.layers[l], &y = b.layers[l];
    if (!same_bits(x.resid_pre, y.resid_pre) || !same_bits(x.attn_out, y.attn_out) ||
        !same_bits(x.mlp_out, y.mlp_out) || !same_bits(x.values, y.values))
      return false;
    for (const auto& [q, rows] : x.attention)
      if (!same_bits(rows, y.attention.at(q))) return false;
  }
  return true;
}

const std::vector<TrackedToken> kTracked{{"subject", 2}, {"answer_1", 11}, {"answer_2", 17}};

float probability(const VectorXf& logits, int target) {
  const VectorXd l = logits.cast<double>();
  return static_cast<float>(std::exp(l(target) - l.maxCoeff()) / (l.array() - l.maxCoeff()).exp().sum());
}

}  // namespace

TEST_CASE("empty knockout leaves the trace untouched") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 31);
  const std::vector<int> tokens{1, 4, 6, 9, 2};
  const auto clean = forward(w, tokens);
  const auto knocked = knockout_forward(w, tokens, KnockoutSpec{TokenSpanSet::empty()});
  CHECK(same_trace(clean, knocked));
  const auto diff = mlp_logit_diff(clean, knocked, w, kTracked);
  CHECK(diff.values.isZero(0));
  CHECK(diff.kind == ValueKind::LogitDiff);
  CHECK(mlp_logit_diff(clean, clean, w, kTracked).values.isZero(0));
}

TEST_CASE("knocking out every key silences attention at the query") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 32);
  const std::vector<int> tokens{1, 4, 6, 9, 2};
  const auto knocked = knockout_forward(w, tokens, KnockoutSpec{TokenSpanSet::custom({0, 1, 2, 3, 4})});
  for (int l = 0; l < c.n_layers; ++l) CHECK(knocked.layers[l].attn_out.row(4).isZero(0));
}

TEST_CASE("token lens over a knocked-out span is zero") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 33);
  const std::vector<int> tokens{1, 4, 6, 9, 2, 3};
  const auto span = TokenSpanSet::custom({1, 2});
  const auto knocked = knockout_forward(w, tokens, KnockoutSpec{span});
  CHECK(token_lens_series(knocked, w, span, kTracked).values.isZero(0));
  const auto clean = forward(w, tokens);
  CHECK_FALSE(mlp_logit_diff(clean, knocked, w, kTracked).values.isZero(0));
}

TEST_CASE("knockout preserves earlier positions and untouched layers") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 34);
  const std::vector<int> tokens{5, 4, 6, 9, 2, 3, 7};
  const auto clean = forward(w, tokens);
  const auto knocked = knockout_forward(w, tokens, KnockoutSpec{TokenSpanSet::custom({0, 3}), {1}});
  CHECK(same_bits(clean.layers[0].attn_out, knocked.layers[0].attn_out));
  for (int l = 0; l < c.n_layers; ++l) {
    CHECK(same_bits(MatrixXf(clean.layers[l].resid_pre.topRows(6)), MatrixXf(knocked.layers[l].resid_pre.topRows(6))));
    CHECK(same_bits(MatrixXf(clean.layers[l].mlp_out.topRows(6)), MatrixXf(knocked.layers[l].mlp_out.topRows(6))));
  }
  CHECK_FALSE(same_bits(clean.layers[1].attn_out, knocked.layers[1].attn_out));
}

TEST_CASE("renormalized knockout keeps rows stochastic") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<float>(c, 35);
  const std::vector<int> tokens{5, 4, 6, 9};
  const auto plain = knockout_forward(w, tokens, KnockoutSpec{TokenSpanSet::custom({1}), {}, -1, false});
  const auto renorm = knockout_forward(w, tokens, KnockoutSpec{TokenSpanSet::custom({1}), {}, -1, true});
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) {
      CHECK(plain.attention_rows(l, 3).row(h).sum() < 1.0f);
      CHECK(renorm.attention_rows(l, 3).row(h).sum() == doctest::Approx(1.0f));
      CHECK(renorm.attention_rows(l, 3)(h, 1) == 0.0f);
    }
}

TEST_CASE("mlp_logit_diff rejects mismatched traces") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<float>(c, 36);
  const std::vector<int> a{1, 2, 3}, b{1, 2, 4};
  try {
    mlp_logit_diff(forward(w, a), forward(w, b), w, kTracked);
    FAIL("expected incompatibility");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Incompatible);
  }
}

TEST_CASE("corruption touches only span rows with the seeded noise") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<float>(c, 37);
  const std::vector<int> tokens{1, 2, 3, 4, 5};
  const auto clean = embed(w, tokens);
  CHECK(same_bits(corrupt_embeddings(w, tokens, CorruptionSpec{TokenSpanSet::custom({1, 2}), 0.0, 5}), clean));
  CHECK(same_bits(corrupt_embeddings(w, tokens, CorruptionSpec{TokenSpanSet::empty(), 1.0, 5}), clean));

  const CorruptionSpec spec{TokenSpanSet::custom({1, 3}), 0.5, 77};
  const auto noisy = corrupt_embeddings(w, tokens, spec);
  CHECK(same_bits(noisy, corrupt_embeddings(w, tokens, spec)));
  Rng rng(77);
  for (int p : {1, 3}) {
    const VectorXd noise = gaussian_draw(rng, c.d_model, 0.0, 0.5);
    for (int i = 0; i < c.d_model; ++i)
      CHECK(noisy(p, i) == static_cast<float>(clean(p, i) + static_cast<float>(noise(i))));
  }
  for (int p : {0, 2, 4}) CHECK(noisy.row(p) == clean.row(p));
  CHECK_THROWS_AS(corrupt_embeddings(w, tokens, CorruptionSpec{TokenSpanSet::custom({1}), -1.0, 1}), Error);
}

TEST_CASE("default noise is three embedding standard deviations") {
  const auto c = micro_config(1, 2);
  const auto w = random_weights<float>(c, 38);
  const VectorXd e = Eigen::Map<const Eigen::VectorXf>(w.embedding.data(), w.embedding.size()).cast<double>();
  const double sd = std::sqrt((e.array() - e.mean()).square().mean());
  CHECK(default_noise_scale(w) == doctest::Approx(3 * sd).epsilon(1e-6));
}

TEST_CASE("traced probability sanities") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 39);
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  const auto clean = forward(w, tokens);
  const int target = 11;
  const float p_clean = probability(clean.logits, target);

  const RestorationSite some[] = {{1, 2, Component::MlpOut}};
  const CorruptionSpec silent{TokenSpanSet::custom({1, 2}), 0.0, 3};
  CHECK(traced_probability(w, tokens, silent, some, clean, target) == doctest::Approx(p_clean).epsilon(1e-6));

  const CorruptionSpec loud{TokenSpanSet::custom({1, 2}), 3.0, 3};
  const RestorationSite rows[] = {{0, 1, Component::Embedding}, {0, 2, Component::Embedding}};
  CHECK(std::abs(traced_probability(w, tokens, loud, rows, clean, target) - p_clean) <= 1e-5f);
  const float p_corrupt = traced_probability(w, tokens, loud, std::span<const RestorationSite>{}, clean, target);
  CHECK(std::abs(p_corrupt - p_clean) > 1e-4f);
}

TEST_CASE("tracing grids are bounded, deterministic and vanish without noise") {
  const auto c = micro_config(3, 2);
  const auto w = random_weights<float>(c, 40);
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  const auto clean = forward(w, tokens);
  const CorruptionSpec loud{TokenSpanSet::custom({1, 2}), 2.0, 9};
  for (auto comp : {Component::AttentionOut, Component::MlpOut}) {
    const auto g = causal_trace_grid(w, tokens, loud, comp, 7, clean);
    CHECK(g.values.rows() == c.n_layers);
    CHECK(g.values.cols() == 6);
    CHECK(g.values.maxCoeff() <= 1.0f);
    CHECK(g.values.minCoeff() >= -1.0f);
    CHECK(g.seeds == 3);
    CHECK(same_bits(g.values, causal_trace_grid(w, tokens, loud, comp, 7, clean).values));
    // Positions before the first corrupted token are untouched, so restoring them changes nothing.
    CHECK(g.values.col(0).isZero(0));
    const auto zero = causal_trace_grid(w, tokens, CorruptionSpec{loud.span, 0.0, 9}, comp, 7, clean);
    CHECK(zero.values.isZero(0));
  }
  const auto wide = causal_trace_grid(w, tokens, loud, Component::MlpOut, 7, clean, TracingOptions{2, 2});
  CHECK(wide.seeds == 2);
  CHECK(wide.values.maxCoeff() <= 1.0f);
}

TEST_CASE("single-seed grid cell equals an explicit restoration run") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<float>(c, 41);
  const std::vector<int> tokens{1, 2, 3, 4, 5};
  const auto clean = forward(w, tokens);
  const CorruptionSpec loud{TokenSpanSet::custom({1}), 2.0, 4};
  const auto g = causal_trace_grid(w, tokens, loud, Component::MlpOut, 3, clean, TracingOptions{1, 1});
  const float base = traced_probability(w, tokens, loud, std::span<const RestorationSite>{}, clean, 3);
  for (int l = 0; l < c.n_layers; ++l)
    for (int p = 1; p < 5; ++p) {
      const RestorationSite site[] = {{l, p, Component::MlpOut}};
      const float restored = traced_probability(w, tokens, loud, site, clean, 3);
      CHECK(g.values(l, p) == doctest::Approx(restored - base).epsilon(1e-4));
    }
}
