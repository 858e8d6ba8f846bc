#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tlens/numerics.hpp"

namespace tlens {

/// Architecture hyperparameters. `n_heads * d_head` must equal `d_model`.
struct ModelConfig {
  int n_layers = 8;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 256;
  int vocab = 512;
  int ctx = 64;
  float eps = 1e-5f;
  float rope_base = 10000.0f;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One pre-norm block. Projections map column vectors: y = W x.
template <typename Scalar>
struct LayerWeights {
  Vector<Scalar> attn_norm;  // [d]
  Matrix<Scalar> wq;         // [d x d]
  Matrix<Scalar> wk;         // [d x d]
  Matrix<Scalar> wv;         // [d x d]
  Matrix<Scalar> wo;         // [d x n_heads*d_head]
  Vector<Scalar> mlp_norm;   // [d]
  Matrix<Scalar> w_gate;     // [d_mlp x d]
  Matrix<Scalar> w_up;       // [d_mlp x d]
  Matrix<Scalar> w_down;     // [d x d_mlp]
};

/// Every learnable array. There are no biases anywhere, so each layer's
/// attention output splits exactly into per-head and per-key contributions.
template <typename Scalar>
struct WeightSet {
  ModelConfig config;
  Matrix<Scalar> embedding;  // [vocab x d]
  std::vector<LayerWeights<Scalar>> layers;
  Vector<Scalar> final_norm;  // [d]
  Matrix<Scalar> unembed;     // [vocab x d]

  /// All arrays allocated and zero, norm gains included.
  static WeightSet zeros(const ModelConfig& config);

  /// Calls f(name, array) for each array in the declared file order.
  template <typename F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& w = layers[l];
      f(p + "attn_norm", w.attn_norm);
      f(p + "wq", w.wq);
      f(p + "wk", w.wk);
      f(p + "wv", w.wv);
      f(p + "wo", w.wo);
      f(p + "mlp_norm", w.mlp_norm);
      f(p + "w_gate", w.w_gate);
      f(p + "w_up", w.w_up);
      f(p + "w_down", w.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("unembed"), unembed);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<WeightSet*>(this)->visit([&](const std::string& name, const auto& a) { f(name, a); });
  }

  template <typename To>
  WeightSet<To> cast() const;

  std::size_t parameter_count() const;
  void check_shapes() const;
};

template <typename Scalar>
using GradientSet = WeightSet<Scalar>;

/// Activations of one layer, indexed by position in the rows.
template <typename Scalar>
struct LayerTrace {
  Matrix<Scalar> resid_pre;  // residual entering the layer [T x d]
  Matrix<Scalar> attn_out;   // attention contribution added to the residual
  Matrix<Scalar> mlp_out;    // MLP contribution added to the residual
  Matrix<Scalar> values;     // [T x n_heads*d_head]; head h owns columns [h*d_head, (h+1)*d_head)
  std::map<int, Matrix<Scalar>> attention;  // query position -> [n_heads x T] weights
};

template <typename Scalar>
struct ActivationTrace {
  ModelConfig config;
  std::vector<int> tokens;
  std::vector<LayerTrace<Scalar>> layers;
  Matrix<Scalar> final_resid;  // residual after the last layer [T x d]
  Vector<Scalar> logits;       // next-token logits at the last position

  int seq_len() const { return static_cast<int>(tokens.size()); }
  int last() const { return seq_len() - 1; }

  /// Residual after `layer` (the next layer's input, or the final residual).
  const Matrix<Scalar>& resid_after(int layer) const;
  /// [n_heads x T] attention weights from `query`; throws capture-miss.
  const Matrix<Scalar>& attention_rows(int layer, int query) const;
  /// Throws capture-miss when values were not recorded.
  const Matrix<Scalar>& value_vectors(int layer) const;
};

struct CaptureSpec {
  std::vector<int> queries;  // empty: last position only
  bool values = true;
};

enum class Component { AttentionOut, MlpOut, Embedding };

const char* to_string(Component c);

/// Zero post-softmax weights from `query` to `keys` in the listed layers.
struct AttentionKnockout {
  int query = -1;             // -1: last position
  std::vector<int> keys;
  std::vector<int> layers;    // empty: all layers
  bool renormalize = false;
};

/// Overwrite one component's contribution at (layer, position) before it
/// enters the residual.
template <typename Scalar>
struct ComponentPatch {
  int layer = 0;
  int position = 0;
  Component component = Component::MlpOut;
  Vector<Scalar> value;
};

template <typename Scalar>
struct ForwardEdits {
  std::optional<Matrix<Scalar>> embedded;  // replaces the embedding lookup [T x d]
  std::optional<AttentionKnockout> knockout;
  std::vector<ComponentPatch<Scalar>> patches;
  // Resume from the residual entering `resume_layer`; earlier layers are
  // left empty in the trace.
  int resume_layer = 0;
  std::optional<Matrix<Scalar>> resume_resid;
};

/// Pre-norm decoder forward pass over one token sequence.
template <typename Scalar>
ActivationTrace<Scalar> forward(const WeightSet<Scalar>& weights, std::span<const int> tokens,
                                const CaptureSpec& capture = {}, const ForwardEdits<Scalar>& edits = {});

/// Token embedding rows for `tokens` [T x d].
template <typename Scalar>
Matrix<Scalar> embed(const WeightSet<Scalar>& weights, std::span<const int> tokens);

/// U * (final_gain .* z) / rms(final_hidden). The norm statistic always comes
/// from `final_hidden`; the model's own logits are decode(x, x).
template <typename Scalar>
Vector<Scalar> decode_with_final_norm(const WeightSet<Scalar>& weights, const VectorRef<Scalar>& z,
                                      const VectorRef<Scalar>& final_hidden);

/// Lowest index among maximal entries.
template <typename Scalar>
int argmax_lowest(const VectorRef<Scalar>& logits);

/// Greedy continuation of `prompt`; the stop token is not included.
/// Throws TruncationError (with the partial continuation) when the context fills.
template <typename Scalar>
std::vector<int> generate_greedy(const WeightSet<Scalar>& weights, std::span<const int> prompt, int max_new,
                                 std::span<const int> stop);

/// One head's contribution to the layer's attention output at `position`:
/// W_o[:, head block] * sum_j p_j v_j.
template <typename Scalar>
Vector<Scalar> per_head_output(const ActivationTrace<Scalar>& trace, const WeightSet<Scalar>& weights, int layer,
                               int head, int position);

/// Rotary tables for positions [0, len): angle(p, i) = p * base^(-2i / d_head).
template <typename Scalar>
struct RopeTable {
  Matrix<Scalar> cos;  // [len x d_head/2]
  Matrix<Scalar> sin;
  RopeTable(int len, int d_head, float base);
};

/// Rotates each head block of `m` (rows are positions starting at 0).
/// `inverse` applies the transpose rotation, used by the backward pass.
template <typename Scalar>
void apply_rope(Eigen::Ref<Matrix<Scalar>> m, const RopeTable<Scalar>& table, int n_heads, int d_head,
                bool inverse = false);
template <typename Scalar>
void apply_rope(Matrix<Scalar>& m, const RopeTable<Scalar>& table, int n_heads, int d_head, bool inverse = false);

// Weight file I/O. Files are always little-endian float32.
void save_weights(const std::string& path, const WeightSet<float>& weights);
WeightSet<float> load_weights(const std::string& path);
/// JSON mirror of the binary header plus the array table.
void write_weight_manifest(const std::string& path, const WeightSet<float>& weights);

}  // namespace tlens
