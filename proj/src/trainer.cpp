#include "tlens/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "binary_io.hpp"
#include "kernels.hpp"

namespace tlens {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw Error(ErrorKind::Config, "learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw Error(ErrorKind::Config, "moment decays must lie in [0, 1)");
  if (!(eps > 0.0)) throw Error(ErrorKind::Config, "adam epsilon must be > 0");
  if (batch < 1 || steps < 0 || workers < 1 || eval_every < 0)
    throw Error(ErrorKind::Config, "batch and workers must be >= 1, steps and eval_every >= 0");
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros(const ModelConfig& config) {
  return {GradientSet<Scalar>::zeros(config), GradientSet<Scalar>::zeros(config), 0};
}

template <typename Scalar>
WeightSet<Scalar> init_weights(const ModelConfig& config, std::uint64_t seed) {
  auto w = WeightSet<Scalar>::zeros(config);
  Rng rng(seed);
  w.visit([&](const std::string& name, auto& a) {
    const bool gain = name.ends_with("norm");
    for (Eigen::Index i = 0; i < a.size(); ++i)
      a.data()[i] = gain ? Scalar(1) : static_cast<Scalar>(0.02 * rng.normal());
  });
  return w;
}

namespace {

using detail::rms_rows;

// Caches for one layer over the concatenated batch (rows = all positions).
template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> x_in, xn1, q, k, v, heads, x_mid, xn2, g, u, hmid;
  Vector<Scalar> inv1, inv2;
  std::vector<Matrix<Scalar>> probs;  // [doc * n_heads + head], each [T_b x T_b]
};

// dx += d(rms_norm)/dx given upstream dy; accumulates the gain gradient.
template <typename Scalar>
void rms_backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& x, const Vector<Scalar>& gain,
                  const Vector<Scalar>& inv, Matrix<Scalar>& dx, Vector<Scalar>& dgain) {
  const auto d = static_cast<Scalar>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar ri = inv[r];
    dgain += (dy.row(r).cwiseProduct(x.row(r)) * ri).transpose();
    const auto gdy = dy.row(r).cwiseProduct(gain.transpose());
    const Scalar dot = gdy.dot(x.row(r));
    dx.row(r) += gdy * ri - x.row(r) * (ri * ri * ri * dot / d);
  }
}

// Sum of -log p(next token) over the shard. When `grads` is non-null the
// gradient of (sum * scale) is accumulated into it.
template <typename Scalar>
double shard_loss(const WeightSet<Scalar>& w, std::span<const std::vector<int>> docs, GradientSet<Scalar>* grads,
                  Scalar scale) {
  const ModelConfig& c = w.config;
  const int L = c.n_layers, H = c.n_heads, dh = c.d_head, V = c.vocab;
  const Scalar eps = static_cast<Scalar>(c.eps);
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto B = docs.size();

  std::vector<int> offset(B + 1, 0);
  int max_len = 1;
  for (std::size_t b = 0; b < B; ++b) {
    const int len = static_cast<int>(docs[b].size());
    if (len < 2) throw Error(ErrorKind::OutOfRange, "training documents need at least two tokens");
    if (len > c.ctx) throw Error(ErrorKind::OutOfRange, "training document longer than the context");
    offset[b + 1] = offset[b] + len;
    max_len = std::max(max_len, len);
  }
  const int N = offset[B];
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(N));
  for (const auto& d : docs) tokens.insert(tokens.end(), d.begin(), d.end());

  const RopeTable<Scalar> rope(max_len, dh, c.rope_base);
  std::vector<LayerCache<Scalar>> cache(static_cast<std::size_t>(L));
  Matrix<Scalar> x = embed(w, tokens);

  for (int l = 0; l < L; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lc = cache[static_cast<std::size_t>(l)];
    lc.x_in = x;
    rms_rows(x, lw.attn_norm, eps, lc.xn1, lc.inv1);
    lc.q.noalias() = lc.xn1 * lw.wq.transpose();
    lc.k.noalias() = lc.xn1 * lw.wk.transpose();
    lc.v.noalias() = lc.xn1 * lw.wv.transpose();
    lc.heads.resize(N, H * dh);
    lc.probs.resize(B * static_cast<std::size_t>(H));
    for (std::size_t b = 0; b < B; ++b) {
      const int o = offset[b], T = offset[b + 1] - offset[b];
      apply_rope<Scalar>(lc.q.middleRows(o, T), rope, H, dh, false);
      apply_rope<Scalar>(lc.k.middleRows(o, T), rope, H, dh, false);
      for (int h = 0; h < H; ++h) {
        auto& p = lc.probs[b * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        p.noalias() = lc.q.block(o, h * dh, T, dh) * lc.k.block(o, h * dh, T, dh).transpose();
        p *= att_scale;
        for (int r = 0; r < T; ++r) causal_softmax_inplace(p.row(r).data(), T, r);
        lc.heads.block(o, h * dh, T, dh).noalias() = p * lc.v.block(o, h * dh, T, dh);
      }
    }
    x.noalias() += lc.heads * lw.wo.transpose();
    lc.x_mid = x;
    rms_rows(x, lw.mlp_norm, eps, lc.xn2, lc.inv2);
    lc.g.noalias() = lc.xn2 * lw.w_gate.transpose();
    lc.u.noalias() = lc.xn2 * lw.w_up.transpose();
    lc.hmid = lc.g.unaryExpr([](Scalar s) { return detail::silu(s); }).cwiseProduct(lc.u);
    x.noalias() += lc.hmid * lw.w_down.transpose();
  }

  Matrix<Scalar> xnf;
  Vector<Scalar> invf;
  rms_rows(x, w.final_norm, eps, xnf, invf);
  Matrix<Scalar> logits = xnf * w.unembed.transpose();  // becomes dlogits below

  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (int r = offset[b]; r < offset[b + 1]; ++r) {
      auto row = logits.row(r);
      if (r == offset[b + 1] - 1) {
        row.setZero();
        continue;
      }
      const int target = tokens[static_cast<std::size_t>(r) + 1];
      const Scalar mx = row.maxCoeff();
      row.array() = (row.array() - mx).exp();
      const Scalar total = row.sum();
      const double p_target = static_cast<double>(row[target] / total);
      loss -= std::log(p_target);
      row *= scale / total;
      row[target] -= scale;
    }
  }
  if (!std::isfinite(loss) || grads == nullptr) return loss;

  auto& g = *grads;
  Matrix<Scalar>& dlogits = logits;
  g.unembed.noalias() += dlogits.transpose() * xnf;
  const Matrix<Scalar> dxnf = dlogits * w.unembed;
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(N, c.d_model);
  rms_backward(dxnf, x, w.final_norm, invf, dx, g.final_norm);

  Matrix<Scalar> dh_mid, dgate, dup, dxn, dheads, dq, dk, dv, dp, ds;
  for (int l = L - 1; l >= 0; --l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lg = g.layers[static_cast<std::size_t>(l)];
    const auto& lc = cache[static_cast<std::size_t>(l)];

    // MLP branch: x_out = x_mid + W_down (silu(gate) * up)
    lg.w_down.noalias() += dx.transpose() * lc.hmid;
    dh_mid.noalias() = dx * lw.w_down;
    dgate.resize(N, c.d_mlp);
    dup.resize(N, c.d_mlp);
    for (Eigen::Index i = 0; i < dh_mid.size(); ++i) {
      const Scalar gv = lc.g.data()[i];
      const Scalar sig = detail::sigmoid(gv);
      dup.data()[i] = dh_mid.data()[i] * gv * sig;
      dgate.data()[i] = dh_mid.data()[i] * lc.u.data()[i] * sig * (Scalar(1) + gv * (Scalar(1) - sig));
    }
    lg.w_gate.noalias() += dgate.transpose() * lc.xn2;
    lg.w_up.noalias() += dup.transpose() * lc.xn2;
    dxn.noalias() = dgate * lw.w_gate;
    dxn.noalias() += dup * lw.w_up;
    rms_backward(dxn, lc.x_mid, lw.mlp_norm, lc.inv2, dx, lg.mlp_norm);

    // Attention branch: x_mid = x_in + W_o concat_h(P_h V_h)
    lg.wo.noalias() += dx.transpose() * lc.heads;
    dheads.noalias() = dx * lw.wo;
    dq.setZero(N, H * dh);
    dk.setZero(N, H * dh);
    dv.setZero(N, H * dh);
    for (std::size_t b = 0; b < B; ++b) {
      const int o = offset[b], T = offset[b + 1] - offset[b];
      for (int h = 0; h < H; ++h) {
        const auto& p = lc.probs[b * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        const auto d_o = dheads.block(o, h * dh, T, dh);
        dp.noalias() = d_o * lc.v.block(o, h * dh, T, dh).transpose();
        dv.block(o, h * dh, T, dh).noalias() = p.transpose() * d_o;
        ds = p.cwiseProduct(dp);
        for (int r = 0; r < T; ++r) {
          const Scalar rowdot = ds.row(r).sum();
          ds.row(r) -= p.row(r) * rowdot;
        }
        ds *= att_scale;
        dq.block(o, h * dh, T, dh).noalias() = ds * lc.k.block(o, h * dh, T, dh);
        dk.block(o, h * dh, T, dh).noalias() = ds.transpose() * lc.q.block(o, h * dh, T, dh);
      }
      apply_rope<Scalar>(dq.middleRows(o, T), rope, H, dh, true);
      apply_rope<Scalar>(dk.middleRows(o, T), rope, H, dh, true);
    }
    lg.wq.noalias() += dq.transpose() * lc.xn1;
    lg.wk.noalias() += dk.transpose() * lc.xn1;
    lg.wv.noalias() += dv.transpose() * lc.xn1;
    dxn.noalias() = dq * lw.wq;
    dxn.noalias() += dk * lw.wk;
    dxn.noalias() += dv * lw.wv;
    rms_backward(dxn, lc.x_in, lw.attn_norm, lc.inv1, dx, lg.attn_norm);
  }
  for (int r = 0; r < N; ++r) g.embedding.row(tokens[static_cast<std::size_t>(r)]) += dx.row(r);
  (void)V;
  return loss;
}

long predicted_positions(std::span<const std::vector<int>> docs) {
  long n = 0;
  for (const auto& d : docs) n += static_cast<long>(d.size()) - 1;
  return n;
}

template <typename Scalar>
void add_into(GradientSet<Scalar>& dst, const GradientSet<Scalar>& src) {
  std::vector<const Scalar*> s;
  src.visit([&](const std::string&, const auto& a) { s.push_back(a.data()); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, auto& a) {
    const Scalar* p = s[i++];
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] += p[k];
  });
}

}  // namespace

template <typename Scalar>
double loss_and_grads(const WeightSet<Scalar>& w, std::span<const std::vector<int>> batch, GradientSet<Scalar>& grads,
                      int workers) {
  if (batch.empty()) throw Error(ErrorKind::OutOfRange, "empty batch");
  const long positions = predicted_positions(batch);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(positions);
  grads = GradientSet<Scalar>::zeros(w.config);
  workers = std::max(1, std::min<int>(workers, static_cast<int>(batch.size())));
  double total = 0.0;
  if (workers == 1) {
    total = shard_loss(w, batch, &grads, scale);
  } else {
    std::vector<GradientSet<Scalar>> shard_grads(static_cast<std::size_t>(workers), GradientSet<Scalar>::zeros(w.config));
    std::vector<double> shard_sums(static_cast<std::size_t>(workers), 0.0);
    std::vector<std::thread> threads;
    const std::size_t per = (batch.size() + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
    for (int t = 0; t < workers; ++t) {
      const std::size_t lo = std::min(batch.size(), per * static_cast<std::size_t>(t));
      const std::size_t hi = std::min(batch.size(), lo + per);
      if (lo == hi) continue;
      threads.emplace_back([&, t, lo, hi] {
        shard_sums[static_cast<std::size_t>(t)] =
            shard_loss(w, batch.subspan(lo, hi - lo), &shard_grads[static_cast<std::size_t>(t)], scale);
      });
    }
    for (auto& th : threads) th.join();
    for (int t = 0; t < workers; ++t) {
      total += shard_sums[static_cast<std::size_t>(t)];
      add_into(grads, shard_grads[static_cast<std::size_t>(t)]);
    }
  }
  const double mean = total / static_cast<double>(positions);
  if (!std::isfinite(mean)) throw Error(ErrorKind::Divergence, "non-finite loss");
  return mean;
}

template <typename Scalar>
double batch_loss(const WeightSet<Scalar>& w, std::span<const std::vector<int>> batch) {
  if (batch.empty()) throw Error(ErrorKind::OutOfRange, "empty batch");
  const long positions = predicted_positions(batch);
  return shard_loss<Scalar>(w, batch, nullptr, Scalar(1)) / static_cast<double>(positions);
}

template <typename Scalar>
void adam_update(WeightSet<Scalar>& w, const GradientSet<Scalar>& g, AdamState<Scalar>& st, const TrainConfig& cfg) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar step_size = static_cast<Scalar>(cfg.lr / bc1);
  const Scalar inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
  const Scalar eps = static_cast<Scalar>(cfg.eps);

  std::vector<const Scalar*> gp;
  std::vector<Scalar*> mp, vp;
  g.visit([&](const std::string&, const auto& a) { gp.push_back(a.data()); });
  st.m.visit([&](const std::string&, auto& a) { mp.push_back(a.data()); });
  st.v.visit([&](const std::string&, auto& a) { vp.push_back(a.data()); });
  std::size_t i = 0;
  w.visit([&](const std::string&, auto& a) {
    const Scalar* gr = gp[i];
    Scalar* m = mp[i];
    Scalar* v = vp[i];
    ++i;
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      m[k] = b1 * m[k] + (Scalar(1) - b1) * gr[k];
      v[k] = b2 * v[k] + (Scalar(1) - b2) * gr[k] * gr[k];
      a.data()[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
  });
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const SynthWorld& world,
                  std::span<const std::vector<int>> corpus, std::uint64_t init_seed, const TrainProgress& progress) {
  cfg.validate();
  model.validate();
  if (corpus.empty()) throw Error(ErrorKind::Config, "training corpus is empty");
  if (model.vocab < world.vocab.size()) throw Error(ErrorKind::Config, "model vocabulary smaller than the world's");

  TrainResult result{init_weights<float>(model, init_seed), AdamState<float>::zeros(model), {}};
  Rng sampler(cfg.seed);
  GradientSet<float> grads;
  std::vector<std::vector<int>> batch(static_cast<std::size_t>(cfg.batch));
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& doc : batch) doc = corpus[sampler.below(corpus.size())];
    double loss = 0.0;
    try {
      loss = loss_and_grads(result.weights, std::span<const std::vector<int>>(batch), grads, cfg.workers);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Divergence) throw;
      throw DivergenceError(step, std::nan(""), result.weights);
    }
    adam_update(result.weights, grads, result.optimizer, cfg);

    TrainLogEntry entry{step, loss, -1.0, 0.0};
    const bool eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
    if (eval_now) {
      const auto instances = evaluate_queries(result.weights, world);
      entry.accuracy = exact_match_accuracy(instances);
    }
    entry.seconds = elapsed();
    result.log.push_back(entry);
    if (progress) progress(entry);
    if (eval_now && cfg.stop_accuracy > 0 && entry.accuracy >= cfg.stop_accuracy) break;
  }
  return result;
}

namespace {
constexpr char kOptMagic[9] = "TLENSOPT";
}

void save_optimizer_state(const std::string& path, const AdamState<float>& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  detail::write_magic(os, kOptMagic);
  detail::write_u32(os, 1);
  detail::write_u64(os, static_cast<std::uint64_t>(st.step));
  for (const auto* set : {&st.m, &st.v})
    set->visit([&](const std::string&, const auto& a) {
      for (Eigen::Index i = 0; i < a.size(); ++i) detail::write_f32(os, a.data()[i]);
    });
  if (!os) throw Error(ErrorKind::Io, "write failed for " + path);
}

AdamState<float> load_optimizer_state(const std::string& path, const ModelConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path);
  detail::expect_magic(is, kOptMagic, path);
  if (detail::read_u32(is) != 1) throw Error(ErrorKind::Format, path + ": unsupported optimizer state version");
  auto st = AdamState<float>::zeros(config);
  st.step = static_cast<long>(detail::read_u64(is));
  for (auto* set : {&st.m, &st.v})
    set->visit([&](const std::string&, auto& a) {
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = detail::read_f32(is);
    });
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, path + ": trailing bytes");
  return st;
}

#define TLENS_INSTANTIATE(S)                                                                                \
  template struct AdamState<S>;                                                                             \
  template WeightSet<S> init_weights<S>(const ModelConfig&, std::uint64_t);                                 \
  template double loss_and_grads<S>(const WeightSet<S>&, std::span<const std::vector<int>>, GradientSet<S>&, \
                                    int);                                                                   \
  template double batch_loss<S>(const WeightSet<S>&, std::span<const std::vector<int>>);                    \
  template void adam_update<S>(WeightSet<S>&, const GradientSet<S>&, AdamState<S>&, const TrainConfig&);

TLENS_INSTANTIATE(float)
TLENS_INSTANTIATE(double)

}  // namespace tlens
