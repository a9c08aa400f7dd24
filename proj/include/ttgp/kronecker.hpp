#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "ttgp/errors.hpp"
#include "ttgp/weights.hpp"

namespace ttgp {

/// A square matrix of side Π n_d stored as D per-dimension factors, never
/// materialized. Used for K_mm (kernel matrix over a grid) and Σ (variational
/// covariance).
class KroneckerMatrix {
public:
  KroneckerMatrix() = default;

  explicit KroneckerMatrix(std::vector<Eigen::MatrixXd> factors)
      : factors_(std::move(factors)) {
    for (std::size_t d = 0; d < factors_.size(); ++d) {
      if (factors_[d].rows() != factors_[d].cols())
        throw ShapeError("Kronecker factor " + std::to_string(d) + " is not square");
      if (factors_[d].rows() == 0)
        throw InvalidInputError("Kronecker factor " + std::to_string(d) + " is empty");
    }
    if (factors_.empty()) throw InvalidInputError("Kronecker matrix needs at least one factor");
  }

  int order() const { return static_cast<int>(factors_.size()); }
  const Eigen::MatrixXd& factor(int d) const { return factors_[d]; }
  Eigen::MatrixXd& factor(int d) { return factors_[d]; }
  const std::vector<Eigen::MatrixXd>& factors() const { return factors_; }

  std::vector<int> dims() const {
    std::vector<int> out(factors_.size());
    for (std::size_t d = 0; d < factors_.size(); ++d)
      out[d] = static_cast<int>(factors_[d].rows());
    return out;
  }

  /// Side length of the represented matrix, as a double to avoid overflow
  /// for large grids.
  double side() const {
    double s = 1.0;
    for (const auto& f : factors_) s *= static_cast<double>(f.rows());
    return s;
  }

private:
  std::vector<Eigen::MatrixXd> factors_;
};

/// Per-factor lower-triangular Cholesky factors; the Kronecker product of the
/// factors is a Cholesky factor of the full matrix.
class KroneckerChol {
public:
  KroneckerChol() = default;

  explicit KroneckerChol(std::vector<Eigen::MatrixXd> lower)
      : lower_(std::move(lower)) {
    for (std::size_t d = 0; d < lower_.size(); ++d) {
      const auto& L = lower_[d];
      if (L.rows() != L.cols())
        throw ShapeError("Cholesky factor " + std::to_string(d) + " is not square");
      for (Eigen::Index i = 0; i < L.rows(); ++i)
        if (!(L(i, i) > 0.0))
          throw InvalidInputError("Cholesky factor " + std::to_string(d) +
                                  " has a non-positive diagonal");
    }
  }

  int order() const { return static_cast<int>(lower_.size()); }
  const Eigen::MatrixXd& lower(int d) const { return lower_[d]; }
  const std::vector<Eigen::MatrixXd>& lowers() const { return lower_; }

  /// Rebuild the represented Kronecker matrix (L_d · L_dᵀ per factor).
  KroneckerMatrix reconstruct() const {
    std::vector<Eigen::MatrixXd> fs;
    fs.reserve(lower_.size());
    for (const auto& L : lower_) fs.push_back(L * L.transpose());
    return KroneckerMatrix(std::move(fs));
  }

private:
  std::vector<Eigen::MatrixXd> lower_;
};

namespace detail {
inline void check_symmetric(const Eigen::MatrixXd& A, int dim) {
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale)
    throw InvalidInputError("Kronecker factor " + std::to_string(dim) +
                            " is not symmetric (asymmetry " + std::to_string(asym) + ")");
}
}  // namespace detail

/// Factor-wise Cholesky decomposition. Throws DecompositionError naming the
/// offending dimension if a factor is not positive-definite.
inline KroneckerChol chol_factorwise(const KroneckerMatrix& A) {
  std::vector<Eigen::MatrixXd> lowers;
  lowers.reserve(A.order());
  for (int d = 0; d < A.order(); ++d) {
    detail::check_symmetric(A.factor(d), d);
    Eigen::LLT<Eigen::MatrixXd> llt(A.factor(d));
    if (llt.info() != Eigen::Success)
      throw DecompositionError("Kronecker factor for dimension " + std::to_string(d) +
                               " is not positive-definite");
    lowers.push_back(llt.matrixL());
  }
  return KroneckerChol(std::move(lowers));
}

/// log|A_1 ⊗ … ⊗ A_D| = Σ_d c_d · log|A_d| with c_d = Π_{e≠d} n_e, evaluated
/// from Cholesky diagonals so only logs of positive numbers appear.
inline double logdet_kron(const KroneckerChol& chol) {
  const int D = chol.order();
  std::vector<double> sizes(D);
  for (int d = 0; d < D; ++d) sizes[d] = static_cast<double>(chol.lower(d).rows());
  double total = 0.0;
  for (int d = 0; d < D; ++d) {
    double c = 1.0;
    for (int e = 0; e < D; ++e)
      if (e != d) c *= sizes[e];
    double ld = 0.0;
    for (Eigen::Index i = 0; i < chol.lower(d).rows(); ++i)
      ld += std::log(chol.lower(d)(i, i));
    total += c * 2.0 * ld;
  }
  return total;
}

inline double logdet_kron(const KroneckerMatrix& A) { return logdet_kron(chol_factorwise(A)); }

/// tr(AB) = Π_d tr(A_d B_d) for Kronecker matrices with matching factor shapes.
inline double trace_product_kron(const KroneckerMatrix& A, const KroneckerMatrix& B) {
  if (A.order() != B.order())
    throw ShapeError("trace_product_kron: operand orders differ");
  double prod = 1.0;
  for (int d = 0; d < A.order(); ++d) {
    if (A.factor(d).rows() != B.factor(d).rows())
      throw ShapeError("trace_product_kron: factor " + std::to_string(d) + " shapes differ");
    prod *= A.factor(d).cwiseProduct(B.factor(d)).sum();
  }
  return prod;
}

/// Per-factor inverses via triangular solves; the Kronecker product of the
/// results inverts the original matrix.
inline KroneckerMatrix inv_factors(const KroneckerChol& chol) {
  std::vector<Eigen::MatrixXd> inv;
  inv.reserve(chol.order());
  for (int d = 0; d < chol.order(); ++d) {
    const auto& L = chol.lower(d);
    Eigen::MatrixXd Linv =
        L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(L.rows(), L.rows()));
    inv.push_back(Linv.transpose() * Linv);
  }
  return KroneckerMatrix(std::move(inv));
}

/// Per-dimension values ρ_d = w_dᵀ A_d w_d restricted to each weight window.
inline std::vector<double> rank1_quad_form_per_dim(const KroneckerMatrix& A,
                                                   const KronWeights& w) {
  if (static_cast<int>(w.size()) != A.order())
    throw ShapeError("rank1_quad_form: weight count does not match factor count");
  std::vector<double> vals(w.size());
  for (int d = 0; d < A.order(); ++d) {
    const int n = static_cast<int>(A.factor(d).rows());
    check_window(w[d], n, d);
    const int len = static_cast<int>(w[d].w.size());
    const auto block = A.factor(d).block(w[d].start, w[d].start, len, len);
    vals[d] = w[d].w.dot(block * w[d].w);
  }
  return vals;
}

/// wᵀ A w for the rank-1 Kronecker vector w = w_1 ⊗ … ⊗ w_D:
/// the product over dimensions of the per-factor quadratic forms.
inline double rank1_quad_form(const KroneckerMatrix& A, const KronWeights& w) {
  double prod = 1.0;
  for (double v : rank1_quad_form_per_dim(A, w)) prod *= v;
  return prod;
}

inline double rank1_quad_form(const KroneckerMatrix& A, const std::vector<Eigen::VectorXd>& w) {
  return rank1_quad_form(A, as_kron_weights(w));
}

}  // namespace ttgp
