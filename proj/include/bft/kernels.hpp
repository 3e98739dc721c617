#pragma once

// Dense numeric kernels shared by the autodiff ops and the confidence
// profiler. Expression-friendly: every function accepts any Eigen dense
// expression and returns a plain object of the same scalar type.

#include <cmath>

#include <Eigen/Dense>

#include "bft/errors.hpp"

namespace bft::kernels {

/// Row-wise max-shifted softmax.
template <class Derived>
auto softmax_rows(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  using Plain = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Plain out = z;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return out;
}

/// Row-wise log-softmax, z - max - log(sum(exp(z - max))).
template <class Derived>
auto log_softmax_rows(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  using Plain = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Plain out = z;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row.array() -= std::log(row.array().exp().sum());
  }
  return out;
}

/// Stride-1 sliding-window means of a sequence. A sequence shorter than the
/// window yields a single mean over the whole sequence.
template <class Derived>
auto window_means(const Eigen::MatrixBase<Derived>& x, Eigen::Index window) {
  using Scalar = typename Derived::Scalar;
  using Plain = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (window < 1) throw ConfigError("window length must be >= 1, got " + std::to_string(window));
  const Eigen::Index length = x.size();
  if (length == 0) throw ContractError("window_means: empty sequence");
  const Eigen::Index width = length < window ? length : window;
  Plain out(length - width + 1);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    Scalar acc(0);
    for (Eigen::Index j = i; j < i + width; ++j) acc += x(j);
    out(i) = acc / static_cast<Scalar>(width);
  }
  return out;
}

template <class Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

/// d/dx of gelu(x) = Phi(x) + x * phi(x).
template <class Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014327);
  return cdf + x * pdf;
}

}  // namespace bft::kernels
