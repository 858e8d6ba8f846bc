#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tlens/model.hpp"
#include "tlens/world.hpp"

namespace tlens {

// Corpus and initialization defaults shared by the CLI and the acceptance run.
inline constexpr int kDefaultDocsPerFact = 20;
inline constexpr std::uint64_t kDefaultCorpusSeed = 11;
inline constexpr std::uint64_t kDefaultInitSeed = 3;

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch = 32;
  int steps = 6000;
  std::uint64_t seed = 7;   // batch sampling
  int eval_every = 500;     // 0 disables periodic accuracy
  int workers = 1;          // gradient shards computed in parallel
  double stop_accuracy = 0; // stop at an evaluation reaching this accuracy; 0 never stops early

  void validate() const;
};

/// Adaptive-moment accumulators, one per weight array.
template <typename Scalar>
struct AdamState {
  GradientSet<Scalar> m;
  GradientSet<Scalar> v;
  long step = 0;

  static AdamState zeros(const ModelConfig& config);
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double accuracy = -1.0;  // -1 when not evaluated at this step
  double seconds = 0.0;
};

/// Non-finite loss. Carries the weights from before the failing step.
class DivergenceError : public Error {
 public:
  DivergenceError(int step, double loss, WeightSet<float> last_good)
      : Error(ErrorKind::Divergence,
              "loss became non-finite (" + std::to_string(loss) + ") at step " + std::to_string(step)),
        step_(step),
        last_good_(std::move(last_good)) {}

  int step() const noexcept { return step_; }
  const WeightSet<float>& last_good() const noexcept { return last_good_; }

 private:
  int step_;
  WeightSet<float> last_good_;
};

/// Gaussian(0, 0.02) for embeddings, projections and unembedding; norm gains 1.
template <typename Scalar>
WeightSet<Scalar> init_weights(const ModelConfig& config, std::uint64_t seed);

/// Mean next-token cross-entropy over every predicted position of the batch,
/// and its exact gradient. `grads` is overwritten.
template <typename Scalar>
double loss_and_grads(const WeightSet<Scalar>& weights, std::span<const std::vector<int>> batch,
                      GradientSet<Scalar>& grads, int workers = 1);

/// Loss only, same arithmetic as loss_and_grads.
template <typename Scalar>
double batch_loss(const WeightSet<Scalar>& weights, std::span<const std::vector<int>> batch);

template <typename Scalar>
void adam_update(WeightSet<Scalar>& weights, const GradientSet<Scalar>& grads, AdamState<Scalar>& state,
                 const TrainConfig& config);

struct TrainResult {
  WeightSet<float> weights;
  AdamState<float> optimizer;
  std::vector<TrainLogEntry> log;
};

using TrainProgress = std::function<void(const TrainLogEntry&)>;

/// Trains from `init_seed` on batches drawn from `corpus`. Deterministic for
/// a fixed worker count.
TrainResult train(const TrainConfig& config, const ModelConfig& model, const SynthWorld& world,
                  std::span<const std::vector<int>> corpus, std::uint64_t init_seed,
                  const TrainProgress& progress = {});

// Optimizer sidecar: magic "TLENSOPT", u32 version, u64 step, then m and v
// arrays (float32, WeightSet::visit order).
void save_optimizer_state(const std::string& path, const AdamState<float>& state);
AdamState<float> load_optimizer_state(const std::string& path, const ModelConfig& config);

}  // namespace tlens
