#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/errors.hpp"

namespace ttgp {

/// Relative jitter added to the diagonal of per-dimension kernel matrices.
/// The jitter is proportional to the factor's mean diagonal (= sf²ᐟᴰ), so the
/// jittered matrix still scales exactly like the kernel under changes of the
/// variance parameter.
inline constexpr double kKernelJitter = 1e-6;

/// Squared-exponential kernel hyperparameters, factorized over dimensions.
/// The full kernel is k(x, x') = σ_f² · Π_d exp(−(x_d − x'_d)²/(2 l_d²)); each
/// per-dimension factor carries an equal share σ_f^{2/D} of the variance so
/// the product of factors reproduces the full kernel exactly.
///
/// All parameters are stored as logs, which is also the space the optimizer
/// works in. Lengthscales are per-dimension by default; `tied` collapses them
/// to a single shared value (log_lengthscales then has one entry).
struct RBFParams {
  Eigen::VectorXd log_lengthscales;
  double log_variance = 0.0;  ///< log σ_f²
  double log_noise = 0.0;     ///< log ν² (regression observation noise)
  bool tied = false;
  int dims = 0;

  static RBFParams make(int D, double lengthscale, double variance, double noise_variance,
                        bool tied_lengthscales = false) {
    if (D < 1) throw InvalidInputError("kernel needs at least one dimension");
    if (!(lengthscale > 0.0) || !(variance > 0.0) || !(noise_variance > 0.0))
      throw InvalidInputError("kernel hyperparameters must be strictly positive");
    RBFParams p;
    p.dims = D;
    p.tied = tied_lengthscales;
    p.log_lengthscales =
        Eigen::VectorXd::Constant(tied_lengthscales ? 1 : D, std::log(lengthscale));
    p.log_variance = std::log(variance);
    p.log_noise = std::log(noise_variance);
    return p;
  }

  double lengthscale(int d) const {
    return std::exp(log_lengthscales[tied ? 0 : d]);
  }
  double variance() const { return std::exp(log_variance); }
  double noise_variance() const { return std::exp(log_noise); }
  /// The per-dimension share of the variance, σ_f^{2/D}.
  double dim_variance() const { return std::exp(log_variance / dims); }
  /// Index into log_lengthscales that dimension d reads (0 when tied).
  int lengthscale_index(int d) const { return tied ? 0 : d; }
};

/// One dimension's kernel factor value: σ_f^{2/D} · exp(−(a−b)²/(2 l_d²)).
inline double k_dim_eval(const RBFParams& p, int dim, double a, double b) {
  const double l = p.lengthscale(dim);
  const double diff = a - b;
  return p.dim_variance() * std::exp(-diff * diff / (2.0 * l * l));
}

/// Kernel factor matrix over one dimension's grid points, with diagonal
/// jitter. Symmetric positive-definite for strictly increasing grids.
inline Eigen::MatrixXd k_dim_matrix(const RBFParams& p, int dim, const Eigen::VectorXd& grid) {
  const Eigen::Index m = grid.size();
  for (Eigen::Index i = 0; i + 1 < m; ++i)
    if (!(grid[i] < grid[i + 1]))
      throw InvalidInputError("kernel grid for dimension " + std::to_string(dim) +
                              " is not strictly increasing");
  const double l = p.lengthscale(dim);
  const double dv = p.dim_variance();
  Eigen::MatrixXd K(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    K(i, i) = dv * (1.0 + kKernelJitter);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double diff = grid[i] - grid[j];
      K(i, j) = K(j, i) = dv * std::exp(-diff * diff / (2.0 * l * l));
    }
  }
  return K;
}

/// Analytic derivatives of k_dim_matrix in log-parameter space.
/// d_log_lengthscale is with respect to the lengthscale this dimension reads
/// (the shared one when tied); d_log_variance is (K incl. jitter)/D since the
/// whole factor is proportional to σ_f^{2/D}.
struct KernelMatrixGrad {
  Eigen::MatrixXd d_log_lengthscale;
  Eigen::MatrixXd d_log_variance;
};

inline KernelMatrixGrad k_dim_matrix_grad(const RBFParams& p, int dim,
                                          const Eigen::VectorXd& grid) {
  const Eigen::MatrixXd K = k_dim_matrix(p, dim, grid);
  const Eigen::Index m = grid.size();
  const double l = p.lengthscale(dim);
  KernelMatrixGrad g;
  g.d_log_variance = K / static_cast<double>(p.dims);
  g.d_log_lengthscale = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < i; ++j) {
      const double diff = grid[i] - grid[j];
      const double v = K(i, j) * diff * diff / (l * l);
      g.d_log_lengthscale(i, j) = g.d_log_lengthscale(j, i) = v;
    }
  return g;
}

/// Post-projection outputs are rescaled to this standard deviation so nearly
/// all of them land inside the fixed [−1, 1] embedding grid (≈3 standard
/// deviations of headroom); points outside are clamped by the interpolator.
inline constexpr double kEmbedTargetStd = 1.0 / 3.0;

/// A learned linear map into a low-dimensional embedding space, followed by an
/// affine renormalization with running output statistics (no trainable shift
/// or scale). The statistics are state, not parameters: they are held fixed
/// during an objective evaluation and refreshed between optimizer steps, so
/// gradients treat them as constants.
struct LinearEmbedding {
  Eigen::MatrixXd projection;  ///< d×D
  Eigen::VectorXd run_mean;    ///< running mean of P·x per output dimension
  Eigen::VectorXd run_std;     ///< running standard deviation of P·x

  int output_dim() const { return static_cast<int>(projection.rows()); }
  int input_dim() const { return static_cast<int>(projection.cols()); }

  /// Entries drawn uniformly from [−1/√D, 1/√D]; statistics start neutral.
  static LinearEmbedding random(int out_dim, int in_dim, std::uint64_t seed) {
    if (out_dim < 1 || out_dim > in_dim)
      throw InvalidInputError("embedding output dimension must be in [1, D]");
    if (out_dim > 10) throw InvalidInputError("embedding dimension above 10 is not supported");
    LinearEmbedding emb;
    emb.projection.resize(out_dim, in_dim);
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (int j = 0; j < in_dim; ++j)
      for (int i = 0; i < out_dim; ++i) emb.projection(i, j) = uni(rng);
    emb.run_mean = Eigen::VectorXd::Zero(out_dim);
    emb.run_std = Eigen::VectorXd::Ones(out_dim);
    return emb;
  }

  /// Recompute running statistics from a set of raw inputs (rows of X). Used
  /// at initialization and to refresh between optimizer steps; `momentum`
  /// blends toward the batch statistics (1 = replace).
  void update_stats(const Eigen::MatrixXd& X, double momentum) {
    const Eigen::MatrixXd Z = X * projection.transpose();  // n×d
    const Eigen::VectorXd mean = Z.colwise().mean();
    Eigen::VectorXd sd(Z.cols());
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
      const double var = (Z.col(j).array() - mean[j]).square().mean();
      sd[j] = std::sqrt(std::max(var, 1e-12)) / kEmbedTargetStd;
    }
    run_mean = (1.0 - momentum) * run_mean + momentum * mean;
    run_std = (1.0 - momentum) * run_std + momentum * sd;
  }
};

/// Normalized embedding output x̃ = (P·x − mean)/std, the coordinates
/// interpolated on the embedding grid.
inline Eigen::VectorXd embed(const LinearEmbedding& emb, const Eigen::VectorXd& x) {
  if (x.size() != emb.projection.cols())
    throw ShapeError("embed: input has " + std::to_string(x.size()) + " features, expected " +
                     std::to_string(emb.projection.cols()));
  return ((emb.projection * x - emb.run_mean).array() / emb.run_std.array()).matrix();
}

/// Gradient with respect to P of upstreamᵀ·embed(x), statistics constant:
/// the outer product of the normalization-scaled upstream with x.
inline Eigen::MatrixXd embed_grad(const LinearEmbedding& emb, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& upstream) {
  if (upstream.size() != emb.projection.rows())
    throw ShapeError("embed_grad: upstream size does not match embedding dimension");
  return (upstream.array() / emb.run_std.array()).matrix() * x.transpose();
}

}  // namespace ttgp
