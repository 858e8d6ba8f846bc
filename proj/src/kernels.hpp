#pragma once

// Row-wise kernels shared by the inference forward pass and the training
// forward/backward pass so both compute the same function.

#include <cmath>

#include "tlens/numerics.hpp"

namespace tlens::detail {

/// out.row(r) = gain .* x.row(r) / sqrt(mean(x.row(r)^2) + eps); inv[r] keeps the scale.
template <typename Scalar>
void rms_rows(const Matrix<Scalar>& x, const Vector<Scalar>& gain, Scalar eps, Matrix<Scalar>& out,
              Vector<Scalar>& inv) {
  const auto rows = x.rows();
  const auto d = static_cast<Scalar>(x.cols());
  out.resize(rows, x.cols());
  inv.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Scalar ms = x.row(r).squaredNorm() / d;
    inv[r] = Scalar(1) / std::sqrt(ms + eps);
    out.row(r) = x.row(r).cwiseProduct(gain.transpose()) * inv[r];
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return x * sigmoid(x);
}

}  // namespace tlens::detail
