#pragma once

#include <cstdint>
#include <span>

#include <Eigen/Core>

#include "tlens/errors.hpp"

namespace tlens {

// Dense types. Storage is row-major so that a sequence of residual vectors
// [seq_len x d] keeps each position contiguous.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXf = Matrix<float>;
using MatrixXd = Matrix<double>;
using VectorXf = Vector<float>;
using VectorXd = Vector<double>;

template <typename Scalar>
using VectorRef = Eigen::Ref<const Vector<Scalar>>;

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* where) {
  if (!x.allFinite()) throw Error(ErrorKind::NumericDomain, std::string("non-finite value in ") + where);
}

/// gain * x / sqrt(mean(x^2) + eps). With eps == 0 the zero vector maps to itself.
template <typename Scalar>
Vector<Scalar> rms_norm(const VectorRef<Scalar>& x, const VectorRef<Scalar>& gain, Scalar eps);

/// 1 / sqrt(mean(x^2) + eps); the scale factor rms_norm applies.
template <typename Scalar>
Scalar inverse_rms(const VectorRef<Scalar>& x, Scalar eps);

/// Softmax over the unmasked entries. Masked entries come back as exactly 0.
/// `masked` is either empty (nothing masked) or has one flag per score.
template <typename Scalar>
Vector<Scalar> softmax_row(const VectorRef<Scalar>& scores, std::span<const bool> masked = {});

/// In-place causal softmax of row[0..=last]; entries after `last` are zeroed.
template <typename Scalar>
void causal_softmax_inplace(Scalar* row, int len, int last);

/// Counter-based generator: draw k is SplitMix64's finalizer applied to
/// seed + (k + 1) * 0x9E3779B97F4A7C15. The state is just (seed, position),
/// so equal states give identical draws on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t position = 0) : seed_(seed), position_(position) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) noexcept;
  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

/// `count` draws of N(mean, std^2). std == 0 returns the mean exactly and
/// still advances the generator.
VectorXd gaussian_draw(Rng& rng, int count, double mean, double std);

}  // namespace tlens
