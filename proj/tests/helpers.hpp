#pragma once

// Dense reference implementations and a finite-difference harness. Everything
// here recomputes results the slow, obvious way so library output can be
// checked against independently materialized matrices and tensors.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/kronecker.hpp"
#include "ttgp/tt_vector.hpp"
#include "ttgp/weights.hpp"

namespace ttgp::testing {

/// Materialize a Kronecker matrix factor by factor.
inline Eigen::MatrixXd dense_from_kron(const KroneckerMatrix& A) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Ones(1, 1);
  for (int d = 0; d < A.order(); ++d) {
    const Eigen::MatrixXd& F = A.factor(d);
    Eigen::MatrixXd next(out.rows() * F.rows(), out.cols() * F.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        next.block(i * F.rows(), j * F.cols(), F.rows(), F.cols()) = out(i, j) * F;
    out = std::move(next);
  }
  return out;
}

/// Flatten a TT tensor to the dense vector it represents (row-major ordering,
/// matching tt_to_dense), via explicit slice products per multi-index.
inline Eigen::VectorXd dense_from_tt(const TTVector& tt) {
  const int D = tt.order();
  std::size_t total = 1;
  for (int n : tt.mode_sizes()) total *= static_cast<std::size_t>(n);
  Eigen::VectorXd out(total);
  std::vector<int> idx(D, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    Eigen::MatrixXd prod = Eigen::MatrixXd::Ones(1, 1);
    for (int d = 0; d < D; ++d) prod = prod * tt.core_slice(d, idx[d]);
    out(flat) = prod(0, 0);
    for (int d = D - 1; d >= 0; --d) {
      if (++idx[d] < tt.mode_sizes()[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

/// Materialize the Kronecker product of windowed per-dimension weights as a
/// full dense vector over the given mode sizes.
inline Eigen::VectorXd dense_from_weights(const KronWeights& w, const std::vector<int>& modes) {
  Eigen::VectorXd out = Eigen::VectorXd::Ones(1);
  for (std::size_t d = 0; d < w.size(); ++d) {
    Eigen::VectorXd full = Eigen::VectorXd::Zero(modes[d]);
    full.segment(w[d].start, w[d].w.size()) = w[d].w;
    Eigen::VectorXd next(out.size() * modes[d]);
    for (Eigen::Index i = 0; i < out.size(); ++i)
      next.segment(i * modes[d], modes[d]) = out(i) * full;
    out = std::move(next);
  }
  return out;
}

/// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x0, double h = 1e-5) {
  return (f(x0 + h) - f(x0 - h)) / (2.0 * h);
}

/// Relative error with an absolute floor so near-zero references don't blow up.
inline double rel_err(double got, double want, double floor = 1e-9) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

inline Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng, double diag_boost = 0.5) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd B(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) B(i, j) = gauss(rng);
  return B * B.transpose() / n + diag_boost * Eigen::MatrixXd::Identity(n, n);
}

inline Eigen::VectorXd random_vector(int n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> gauss(0.0, sd);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = gauss(rng);
  return v;
}

inline std::vector<double> random_dense_tensor(const std::vector<int>& shape,
                                               std::mt19937_64& rng, double sd = 1.0) {
  std::size_t total = 1;
  for (int n : shape) total *= static_cast<std::size_t>(n);
  std::normal_distribution<double> gauss(0.0, sd);
  std::vector<double> values(total);
  for (auto& v : values) v = gauss(rng);
  return values;
}

}  // namespace ttgp::testing
