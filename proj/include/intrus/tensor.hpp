#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace intrus {

// Dense values are row-major Eigen matrices; a rank-1 value is a 1 x n row.
template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorR = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixR<double>;
using RowVector = RowVectorR<double>;
using Shape = std::vector<Eigen::Index>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Derived>
std::string shape_string(const Eigen::DenseBase<Derived>& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

template <typename Derived>
Shape shape_of(const Eigen::DenseBase<Derived>& m) {
  return {m.rows(), m.cols()};
}

// Numerically stable softmax along rows (axis 1) or columns (axis 0).
template <typename Derived>
MatrixR<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x, int axis = 1) {
  using Scalar = typename Derived::Scalar;
  MatrixR<Scalar> out(x.rows(), x.cols());
  if (axis == 1) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      out.row(r) = (x.row(r).array() - m).exp();
      out.row(r) /= out.row(r).sum();
    }
  } else {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const Scalar m = x.col(c).maxCoeff();
      out.col(c) = (x.col(c).array() - m).exp();
      out.col(c) /= out.col(c).sum();
    }
  }
  return out;
}

template <typename Derived>
MatrixR<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& x, int axis = 1) {
  using Scalar = typename Derived::Scalar;
  MatrixR<Scalar> out(x.rows(), x.cols());
  if (axis == 1) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
      out.row(r) = x.row(r).array() - lse;
    }
  } else {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const Scalar m = x.col(c).maxCoeff();
      const Scalar lse = m + std::log((x.col(c).array() - m).exp().sum());
      out.col(c) = x.col(c).array() - lse;
    }
  }
  return out;
}

// log sum exp over the entries selected by a 0/1 mask; -inf for an empty selection.
template <typename DerivedX, typename DerivedM>
typename DerivedX::Scalar masked_logsumexp(const Eigen::MatrixBase<DerivedX>& x,
                                           const Eigen::MatrixBase<DerivedM>& mask) {
  using Scalar = typename DerivedX::Scalar;
  Scalar m = -std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (mask(r, c) != 0 && x(r, c) > m) m = x(r, c);
  if (!std::isfinite(m)) return m;
  Scalar s = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (mask(r, c) != 0) s += std::exp(x(r, c) - m);
  return m + std::log(s);
}

// Absolute sinusoidal encodings for positions [0, n).
template <typename Scalar = double>
MatrixR<Scalar> sinusoidal_positions(Eigen::Index n, Eigen::Index dim) {
  MatrixR<Scalar> pe(n, dim);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index i = 0; i < dim; i += 2) {
      const Scalar freq = std::pow(Scalar(10000), -Scalar(i) / Scalar(dim));
      pe(p, i) = std::sin(Scalar(p) * freq);
      if (i + 1 < dim) pe(p, i + 1) = std::cos(Scalar(p) * freq);
    }
  }
  return pe;
}

}  // namespace intrus
