#include "tlens/numerics.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace tlens {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NumericDomain: return "numeric-domain error";
    case ErrorKind::DegenerateMask: return "degenerate-mask error";
    case ErrorKind::OutOfRange: return "out-of-range error";
    case ErrorKind::CaptureMiss: return "capture-miss error";
    case ErrorKind::Truncation: return "truncation error";
    case ErrorKind::Incompatible: return "incompatibility error";
    case ErrorKind::Divergence: return "divergence error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::EmptyCohort: return "empty-cohort error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

template <typename Scalar>
Scalar inverse_rms(const VectorRef<Scalar>& x, Scalar eps) {
  require_finite(x, "rms_norm input");
  const Scalar mean_sq = x.squaredNorm() / static_cast<Scalar>(x.size());
  const Scalar denom = std::sqrt(mean_sq + eps);
  if (denom == Scalar(0)) return Scalar(0);
  return Scalar(1) / denom;
}

template <typename Scalar>
Vector<Scalar> rms_norm(const VectorRef<Scalar>& x, const VectorRef<Scalar>& gain, Scalar eps) {
  if (x.size() < 1 || gain.size() != x.size())
    throw Error(ErrorKind::OutOfRange, "rms_norm: gain and input extents differ");
  if (!(eps >= Scalar(0))) throw Error(ErrorKind::NumericDomain, "rms_norm: eps must be non-negative");
  const Scalar r = inverse_rms<Scalar>(x, eps);
  return gain.cwiseProduct(x) * r;
}

template <typename Scalar>
Vector<Scalar> softmax_row(const VectorRef<Scalar>& scores, std::span<const bool> masked) {
  const auto n = scores.size();
  if (!masked.empty() && static_cast<Eigen::Index>(masked.size()) != n)
    throw Error(ErrorKind::OutOfRange, "softmax_row: mask length differs from score length");
  auto is_masked = [&](Eigen::Index i) { return !masked.empty() && masked[static_cast<std::size_t>(i)]; };

  Scalar max_score = -std::numeric_limits<Scalar>::infinity();
  bool any = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (is_masked(i)) continue;
    if (!std::isfinite(scores[i])) throw Error(ErrorKind::NumericDomain, "softmax_row: non-finite score");
    max_score = any ? std::max(max_score, scores[i]) : scores[i];
    any = true;
  }
  if (!any) throw Error(ErrorKind::DegenerateMask, "softmax_row: every index is masked");

  Vector<Scalar> out = Vector<Scalar>::Zero(n);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (is_masked(i)) continue;
    out[i] = std::exp(scores[i] - max_score);
    total += out[i];
  }
  out /= total;
  return out;
}

template <typename Scalar>
void causal_softmax_inplace(Scalar* row, int len, int last) {
  Scalar max_score = row[0];
  for (int j = 1; j <= last; ++j) max_score = std::max(max_score, row[j]);
  Scalar total = 0;
  for (int j = 0; j <= last; ++j) {
    row[j] = std::exp(row[j] - max_score);
    total += row[j];
  }
  const Scalar inv = Scalar(1) / total;
  for (int j = 0; j <= last; ++j) row[j] *= inv;
  for (int j = last + 1; j < len; ++j) row[j] = Scalar(0);
}

std::uint64_t Rng::next_u64() noexcept {
  ++position_;
  std::uint64_t z = seed_ + position_ * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t bound) noexcept {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % bound;
}

double Rng::normal() noexcept {
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

VectorXd gaussian_draw(Rng& rng, int count, double mean, double std) {
  if (std < 0) throw Error(ErrorKind::NumericDomain, "gaussian_draw: negative standard deviation");
  VectorXd out(count);
  for (int i = 0; i < count; ++i) out[i] = mean + std * rng.normal();
  return out;
}

template float inverse_rms<float>(const VectorRef<float>&, float);
template double inverse_rms<double>(const VectorRef<double>&, double);
template Vector<float> rms_norm<float>(const VectorRef<float>&, const VectorRef<float>&, float);
template Vector<double> rms_norm<double>(const VectorRef<double>&, const VectorRef<double>&, double);
template Vector<float> softmax_row<float>(const VectorRef<float>&, std::span<const bool>);
template Vector<double> softmax_row<double>(const VectorRef<double>&, std::span<const bool>);
template void causal_softmax_inplace<float>(float*, int, int);
template void causal_softmax_inplace<double>(double*, int, int);

}  // namespace tlens
