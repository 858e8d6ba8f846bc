#include "tlens/model.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace tlens {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab < 1 || ctx < 1)
    throw Error(ErrorKind::Config, "model config extents must all be >= 1");
  if (n_heads * d_head != d_model) throw Error(ErrorKind::Config, "d_model must equal n_heads * d_head");
  if (d_head % 2 != 0) throw Error(ErrorKind::Config, "d_head must be even for rotary encoding");
  if (!(eps >= 0.0f) || !(rope_base > 0.0f)) throw Error(ErrorKind::Config, "eps must be >= 0 and rope_base > 0");
}

const char* to_string(Component c) {
  switch (c) {
    case Component::AttentionOut: return "attn";
    case Component::MlpOut: return "mlp";
    case Component::Embedding: return "embedding";
  }
  return "?";
}

template <typename Scalar>
WeightSet<Scalar> WeightSet<Scalar>::zeros(const ModelConfig& c) {
  c.validate();
  WeightSet w;
  w.config = c;
  const int d = c.d_model;
  w.embedding = Matrix<Scalar>::Zero(c.vocab, d);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : w.layers) {
    l.attn_norm = Vector<Scalar>::Zero(d);
    l.wq = Matrix<Scalar>::Zero(d, d);
    l.wk = Matrix<Scalar>::Zero(d, d);
    l.wv = Matrix<Scalar>::Zero(d, d);
    l.wo = Matrix<Scalar>::Zero(d, c.n_heads * c.d_head);
    l.mlp_norm = Vector<Scalar>::Zero(d);
    l.w_gate = Matrix<Scalar>::Zero(c.d_mlp, d);
    l.w_up = Matrix<Scalar>::Zero(c.d_mlp, d);
    l.w_down = Matrix<Scalar>::Zero(d, c.d_mlp);
  }
  w.final_norm = Vector<Scalar>::Zero(d);
  w.unembed = Matrix<Scalar>::Zero(c.vocab, d);
  return w;
}

template <typename Scalar>
template <typename To>
WeightSet<To> WeightSet<Scalar>::cast() const {
  WeightSet<To> out = WeightSet<To>::zeros(config);
  std::vector<const Scalar*> sources;
  visit([&](const std::string&, const auto& a) { sources.push_back(a.data()); });
  std::size_t i = 0;
  out.visit([&](const std::string&, auto& a) {
    const Scalar* src = sources[i++];
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = static_cast<To>(src[k]);
  });
  return out;
}

template <typename Scalar>
std::size_t WeightSet<Scalar>::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const auto& a) { n += static_cast<std::size_t>(a.size()); });
  return n;
}

template <typename Scalar>
void WeightSet<Scalar>::check_shapes() const {
  config.validate();
  const WeightSet ref = zeros(config);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> expected;
  ref.visit([&](const std::string&, const auto& a) { expected.emplace_back(a.rows(), a.cols()); });
  if (layers.size() != ref.layers.size()) throw Error(ErrorKind::Incompatible, "layer count differs from config");
  std::size_t i = 0;
  visit([&](const std::string& name, const auto& a) {
    if (a.rows() != expected[i].first || a.cols() != expected[i].second)
      throw Error(ErrorKind::Incompatible, "array " + name + " has the wrong shape");
    ++i;
  });
}

template <typename Scalar>
const Matrix<Scalar>& ActivationTrace<Scalar>::resid_after(int layer) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size()))
    throw Error(ErrorKind::OutOfRange, "resid_after: layer out of range");
  if (layer + 1 == static_cast<int>(layers.size())) return final_resid;
  return layers[static_cast<std::size_t>(layer) + 1].resid_pre;
}

template <typename Scalar>
const Matrix<Scalar>& ActivationTrace<Scalar>::attention_rows(int layer, int query) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size()))
    throw Error(ErrorKind::OutOfRange, "attention_rows: layer out of range");
  const auto& m = layers[static_cast<std::size_t>(layer)].attention;
  auto it = m.find(query);
  if (it == m.end())
    throw Error(ErrorKind::CaptureMiss, "attention row for query " + std::to_string(query) + " at layer " +
                                            std::to_string(layer) + " was not captured");
  return it->second;
}

template <typename Scalar>
const Matrix<Scalar>& ActivationTrace<Scalar>::value_vectors(int layer) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size()))
    throw Error(ErrorKind::OutOfRange, "value_vectors: layer out of range");
  const auto& v = layers[static_cast<std::size_t>(layer)].values;
  if (v.size() == 0) throw Error(ErrorKind::CaptureMiss, "value vectors were not captured");
  return v;
}

template <typename Scalar>
RopeTable<Scalar>::RopeTable(int len, int d_head, float base) : cos(len, d_head / 2), sin(len, d_head / 2) {
  for (int p = 0; p < len; ++p) {
    for (int i = 0; i < d_head / 2; ++i) {
      const double freq = std::pow(static_cast<double>(base), -2.0 * i / d_head);
      const double angle = p * freq;
      cos(p, i) = static_cast<Scalar>(std::cos(angle));
      sin(p, i) = static_cast<Scalar>(std::sin(angle));
    }
  }
}

template <typename Scalar>
void apply_rope(Eigen::Ref<Matrix<Scalar>> m, const RopeTable<Scalar>& table, int n_heads, int d_head, bool inverse) {
  const int half = d_head / 2;
  for (Eigen::Index p = 0; p < m.rows(); ++p) {
    for (int h = 0; h < n_heads; ++h) {
      Scalar* x = &m(p, h * d_head);
      for (int i = 0; i < half; ++i) {
        const Scalar c = table.cos(p, i);
        const Scalar s = inverse ? -table.sin(p, i) : table.sin(p, i);
        const Scalar a = x[2 * i];
        const Scalar b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

template <typename Scalar>
void apply_rope(Matrix<Scalar>& m, const RopeTable<Scalar>& table, int n_heads, int d_head, bool inverse) {
  apply_rope<Scalar>(Eigen::Ref<Matrix<Scalar>>(m), table, n_heads, d_head, inverse);
}

template <typename Scalar>
Matrix<Scalar> embed(const WeightSet<Scalar>& w, std::span<const int> tokens) {
  Matrix<Scalar> x(static_cast<Eigen::Index>(tokens.size()), w.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= w.config.vocab)
      throw Error(ErrorKind::OutOfRange, "token id " + std::to_string(tokens[t]) + " outside the vocabulary");
    x.row(static_cast<Eigen::Index>(t)) = w.embedding.row(tokens[t]);
  }
  return x;
}

template <typename Scalar>
Vector<Scalar> decode_with_final_norm(const WeightSet<Scalar>& w, const VectorRef<Scalar>& z,
                                      const VectorRef<Scalar>& final_hidden) {
  require_finite(z, "decoded vector");
  require_finite(final_hidden, "final hidden state");
  const Scalar eps = static_cast<Scalar>(w.config.eps);
  const Scalar mean_sq = final_hidden.squaredNorm() / static_cast<Scalar>(final_hidden.size());
  if (mean_sq + eps == Scalar(0))
    throw Error(ErrorKind::NumericDomain, "final hidden state is zero and eps is 0; its RMS is undefined");
  const Scalar r = Scalar(1) / std::sqrt(mean_sq + eps);
  const Vector<Scalar> normed = w.final_norm.cwiseProduct(z) * r;
  return w.unembed * normed;
}

template <typename Scalar>
int argmax_lowest(const VectorRef<Scalar>& logits) {
  int best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  return best;
}

template <typename Scalar>
ActivationTrace<Scalar> forward(const WeightSet<Scalar>& w, std::span<const int> tokens, const CaptureSpec& capture,
                                const ForwardEdits<Scalar>& edits) {
  const ModelConfig& c = w.config;
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw Error(ErrorKind::OutOfRange, "forward: empty input");
  if (T > c.ctx)
    throw Error(ErrorKind::OutOfRange,
                "forward: input length " + std::to_string(T) + " exceeds context " + std::to_string(c.ctx));
  const int H = c.n_heads;
  const int dh = c.d_head;
  const Scalar eps = static_cast<Scalar>(c.eps);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  ActivationTrace<Scalar> trace;
  trace.config = c;
  trace.tokens.assign(tokens.begin(), tokens.end());
  trace.layers.resize(static_cast<std::size_t>(c.n_layers));

  std::vector<int> queries = capture.queries;
  if (queries.empty()) queries.push_back(T - 1);
  for (int q : queries)
    if (q < 0 || q >= T) throw Error(ErrorKind::OutOfRange, "capture query position outside the sequence");

  int start = 0;
  Matrix<Scalar> x;
  if (edits.resume_resid) {
    start = edits.resume_layer;
    if (start < 0 || start >= c.n_layers) throw Error(ErrorKind::OutOfRange, "resume layer out of range");
    x = *edits.resume_resid;
    for (int t : tokens)
      if (t < 0 || t >= c.vocab) throw Error(ErrorKind::OutOfRange, "token id outside the vocabulary");
  } else if (edits.embedded) {
    x = *edits.embedded;
  } else {
    x = embed(w, tokens);
  }
  if (x.rows() != T || x.cols() != c.d_model) throw Error(ErrorKind::Incompatible, "forward: residual shape mismatch");

  auto patch = [&](Matrix<Scalar>& out, int layer, Component comp) {
    for (const auto& p : edits.patches) {
      if (p.component != comp || (comp != Component::Embedding && p.layer != layer)) continue;
      if (p.position < 0 || p.position >= T || p.value.size() != c.d_model)
        throw Error(ErrorKind::OutOfRange, "patch site outside the sequence");
      out.row(p.position) = p.value.transpose();
    }
  };
  if (start == 0) patch(x, 0, Component::Embedding);

  int ko_query = -1;
  std::vector<bool> ko_layer(static_cast<std::size_t>(c.n_layers), false);
  if (edits.knockout) {
    const auto& ko = *edits.knockout;
    ko_query = ko.query < 0 ? T - 1 : ko.query;
    if (ko_query >= T) throw Error(ErrorKind::OutOfRange, "knockout query outside the sequence");
    for (int k : ko.keys)
      if (k < 0 || k >= T) throw Error(ErrorKind::OutOfRange, "knockout key outside the sequence");
    if (ko.layers.empty()) {
      std::fill(ko_layer.begin(), ko_layer.end(), true);
    } else {
      for (int l : ko.layers) {
        if (l < 0 || l >= c.n_layers) throw Error(ErrorKind::OutOfRange, "knockout layer out of range");
        ko_layer[static_cast<std::size_t>(l)] = true;
      }
    }
  }

  const RopeTable<Scalar> rope(T, dh, c.rope_base);
  Matrix<Scalar> xn, q, k, v, heads(T, H * dh), probs(T, T), a, g, u, m;
  Vector<Scalar> inv;

  for (int l = start; l < c.n_layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lt = trace.layers[static_cast<std::size_t>(l)];
    lt.resid_pre = x;

    detail::rms_rows(x, lw.attn_norm, eps, xn, inv);
    q.noalias() = xn * lw.wq.transpose();
    k.noalias() = xn * lw.wk.transpose();
    v.noalias() = xn * lw.wv.transpose();
    apply_rope(q, rope, H, dh);
    apply_rope(k, rope, H, dh);

    for (int qp : queries) lt.attention[qp] = Matrix<Scalar>::Zero(H, T);
    for (int h = 0; h < H; ++h) {
      probs.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
      probs *= scale;
      for (int r = 0; r < T; ++r) causal_softmax_inplace(probs.row(r).data(), T, r);
      if (ko_query >= 0 && ko_layer[static_cast<std::size_t>(l)]) {
        for (int key : edits.knockout->keys) probs(ko_query, key) = Scalar(0);
        if (edits.knockout->renormalize) {
          const Scalar total = probs.row(ko_query).sum();
          if (total > Scalar(0)) probs.row(ko_query) /= total;
        }
      }
      for (int qp : queries) lt.attention[qp].row(h) = probs.row(qp);
      heads.middleCols(h * dh, dh).noalias() = probs * v.middleCols(h * dh, dh);
    }
    if (capture.values) lt.values = v;

    a.noalias() = heads * lw.wo.transpose();
    patch(a, l, Component::AttentionOut);
    x += a;
    lt.attn_out = std::move(a);

    detail::rms_rows(x, lw.mlp_norm, eps, xn, inv);
    g.noalias() = xn * lw.w_gate.transpose();
    u.noalias() = xn * lw.w_up.transpose();
    g = g.unaryExpr([](Scalar s) { return detail::silu(s); }).cwiseProduct(u);
    m.noalias() = g * lw.w_down.transpose();
    patch(m, l, Component::MlpOut);
    x += m;
    lt.mlp_out = std::move(m);
  }

  trace.final_resid = std::move(x);
  const Vector<Scalar> last = trace.final_resid.row(T - 1).transpose();
  trace.logits = decode_with_final_norm<Scalar>(w, last, last);
  require_finite(trace.logits, "forward logits");
  return trace;
}

template <typename Scalar>
std::vector<int> generate_greedy(const WeightSet<Scalar>& w, std::span<const int> prompt, int max_new,
                                 std::span<const int> stop) {
  if (prompt.empty()) throw Error(ErrorKind::OutOfRange, "generate_greedy: empty prompt");
  if (static_cast<int>(prompt.size()) > w.config.ctx)
    throw Error(ErrorKind::OutOfRange, "generate_greedy: prompt longer than the context");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  const CaptureSpec light{{}, false};
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(seq.size()) >= w.config.ctx)
      throw TruncationError("generation reached the context limit of " + std::to_string(w.config.ctx), out);
    const auto trace = forward(w, seq, light);
    const int next = argmax_lowest<Scalar>(trace.logits);
    if (std::find(stop.begin(), stop.end(), next) != stop.end()) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> per_head_output(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& w, int layer, int head,
                               int position) {
  const int dh = w.config.d_head;
  if (head < 0 || head >= w.config.n_heads) throw Error(ErrorKind::OutOfRange, "head index out of range");
  const auto& rows = trace.attention_rows(layer, position);
  const auto& values = trace.value_vectors(layer);
  const Vector<Scalar> mixed = values.middleCols(head * dh, dh).transpose() * rows.row(head).transpose();
  return w.layers[static_cast<std::size_t>(layer)].wo.middleCols(head * dh, dh) * mixed;
}

#define TLENS_INSTANTIATE(S)                                                                                     \
  template struct WeightSet<S>;                                                                                  \
  template struct ActivationTrace<S>;                                                                            \
  template struct RopeTable<S>;                                                                                  \
  template void apply_rope<S>(Eigen::Ref<Matrix<S>>, const RopeTable<S>&, int, int, bool);                       \
  template void apply_rope<S>(Matrix<S>&, const RopeTable<S>&, int, int, bool);                                  \
  template Matrix<S> embed<S>(const WeightSet<S>&, std::span<const int>);                                        \
  template Vector<S> decode_with_final_norm<S>(const WeightSet<S>&, const VectorRef<S>&, const VectorRef<S>&);   \
  template int argmax_lowest<S>(const VectorRef<S>&);                                                            \
  template ActivationTrace<S> forward<S>(const WeightSet<S>&, std::span<const int>, const CaptureSpec&,          \
                                         const ForwardEdits<S>&);                                                \
  template std::vector<int> generate_greedy<S>(const WeightSet<S>&, std::span<const int>, int,                   \
                                               std::span<const int>);                                            \
  template Vector<S> per_head_output<S>(const ActivationTrace<S>&, const WeightSet<S>&, int, int, int);

TLENS_INSTANTIATE(float)
TLENS_INSTANTIATE(double)

template WeightSet<double> WeightSet<float>::cast<double>() const;
template WeightSet<float> WeightSet<double>::cast<float>() const;
template WeightSet<float> WeightSet<float>::cast<float>() const;
template WeightSet<double> WeightSet<double>::cast<double>() const;

}  // namespace tlens
