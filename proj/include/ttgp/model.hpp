#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/errors.hpp"
#include "ttgp/interpolation.hpp"
#include "ttgp/kernels.hpp"
#include "ttgp/kronecker.hpp"
#include "ttgp/tt_vector.hpp"
#include "ttgp/weights.hpp"

namespace ttgp {

enum class Task { kRegression, kClassification };

/// Map an unconstrained lower-triangular parameter block to a Cholesky factor:
/// strictly-lower entries pass through, diagonal entries are exponentiated so
/// the factor always has a positive diagonal.
inline Eigen::MatrixXd lower_from_unconstrained(const Eigen::MatrixXd& theta) {
  const Eigen::Index n = theta.rows();
  if (theta.cols() != n) throw ShapeError("covariance parameter block must be square");
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) L(i, j) = theta(i, j);
    L(i, i) = std::exp(theta(i, i));
  }
  return L;
}

inline Eigen::MatrixXd unconstrained_from_lower(const Eigen::MatrixXd& L) {
  const Eigen::Index n = L.rows();
  if (L.cols() != n) throw ShapeError("Cholesky factor must be square");
  Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) theta(i, j) = L(i, j);
    if (!(L(i, i) > 0.0))
      throw InvalidInputError("Cholesky factor needs a strictly positive diagonal");
    theta(i, i) = std::log(L(i, i));
  }
  return theta;
}

/// The variational Gaussian-process model. The posterior over inducing values
/// on the grid has mean `mu` in tensor-train form and covariance given per
/// class as a Kronecker product of per-dimension factors Σ_d = L_d L_dᵀ, with
/// L_d stored in unconstrained form (see lower_from_unconstrained).
///
/// Regression uses exactly one class slot; classification keeps an
/// independent mean and covariance per class over the shared kernel.
struct TTGPModel {
  Task task = Task::kRegression;
  Grid grid;
  RBFParams kernel;
  std::optional<LinearEmbedding> embedding;
  std::vector<TTVector> mu;
  std::vector<std::vector<Eigen::MatrixXd>> sigma_param;

  int num_classes() const { return static_cast<int>(mu.size()); }
  int latent_dims() const { return grid.dims(); }
  /// Number of raw input features expected per data row.
  int input_dims() const { return embedding ? embedding->input_dim() : grid.dims(); }

  void validate() const {
    grid.validate();
    if (mu.empty()) throw InvalidInputError("model has no mean tensors");
    if (task == Task::kRegression && mu.size() != 1)
      throw InvalidInputError("regression uses exactly one latent process");
    if (task == Task::kClassification && mu.size() < 2)
      throw InvalidInputError("classification needs at least two classes");
    if (sigma_param.size() != mu.size())
      throw ShapeError("covariance parameter count does not match class count");
    if (kernel.dims != grid.dims())
      throw ShapeError("kernel dimension count does not match the grid");
    if (embedding && embedding->output_dim() != grid.dims())
      throw ShapeError("embedding output dimension does not match the grid");
    const auto modes = grid.mode_sizes();
    for (std::size_t c = 0; c < mu.size(); ++c) {
      if (mu[c].mode_sizes() != modes)
        throw ShapeError("mean tensor modes do not match the grid");
      if (sigma_param[c].size() != modes.size())
        throw ShapeError("covariance factor count does not match the grid");
      for (std::size_t d = 0; d < modes.size(); ++d)
        if (sigma_param[c][d].rows() != modes[d] || sigma_param[c][d].cols() != modes[d])
          throw ShapeError("covariance factor " + std::to_string(d) + " has the wrong size");
    }
  }
};

/// Everything derived from the current parameters that evaluation needs:
/// kernel factor matrices with their Cholesky factors, inverses and
/// log-parameter derivatives, and per-class covariance factors with the
/// scalars the divergence term reads. Rebuilt whenever parameters change.
struct ModelWorkspace {
  KroneckerMatrix K;
  KroneckerChol K_chol;
  KroneckerMatrix K_inv;
  std::vector<KernelMatrixGrad> K_grads;
  double logdet_K = 0.0;
  double grid_size = 0.0;  ///< Π_d m_d as a double

  std::vector<std::vector<Eigen::MatrixXd>> sigma_L;       ///< [class][dim]
  std::vector<KroneckerMatrix> sigma;                      ///< Σ_d = L_d L_dᵀ
  std::vector<double> logdet_sigma;                        ///< per class
  std::vector<std::vector<double>> k_inv_sigma_trace;      ///< t_{c,d} = tr(K_d⁻¹ Σ_{c,d})

  explicit ModelWorkspace(const TTGPModel& m)
      : K(make_kernel_factors(m)), K_chol(chol_factorwise(K)), K_inv(inv_factors(K_chol)) {
    const int D = m.grid.dims();
    K_grads.reserve(D);
    grid_size = 1.0;
    for (int d = 0; d < D; ++d) {
      K_grads.push_back(k_dim_matrix_grad(m.kernel, d, m.grid.per_dim_points[d]));
      grid_size *= static_cast<double>(m.grid.per_dim_points[d].size());
    }
    logdet_K = logdet_kron(K_chol);

    const int C = m.num_classes();
    sigma_L.resize(C);
    sigma.reserve(C);
    logdet_sigma.resize(C);
    k_inv_sigma_trace.assign(C, std::vector<double>(D, 0.0));
    for (int c = 0; c < C; ++c) {
      std::vector<Eigen::MatrixXd> factors(D);
      sigma_L[c].resize(D);
      for (int d = 0; d < D; ++d) {
        sigma_L[c][d] = lower_from_unconstrained(m.sigma_param[c][d]);
        factors[d] = sigma_L[c][d] * sigma_L[c][d].transpose();
        k_inv_sigma_trace[c][d] = (K_inv.factor(d).array() * factors[d].array()).sum();
      }
      sigma.emplace_back(std::move(factors));
      logdet_sigma[c] = logdet_kron(KroneckerChol(sigma_L[c]));
    }
  }

 private:
  static KroneckerMatrix make_kernel_factors(const TTGPModel& m) {
    m.validate();
    std::vector<Eigen::MatrixXd> factors;
    factors.reserve(m.grid.dims());
    for (int d = 0; d < m.grid.dims(); ++d)
      factors.push_back(k_dim_matrix(m.kernel, d, m.grid.per_dim_points[d]));
    return KroneckerMatrix(std::move(factors));
  }
};

inline ModelWorkspace build_workspace(const TTGPModel& m) { return ModelWorkspace(m); }

/// Grid-space coordinates of a raw input row: the embedding output when the
/// model has one, the row itself otherwise.
inline Eigen::VectorXd to_grid_coords(const TTGPModel& m, const Eigen::VectorXd& x) {
  if (m.embedding) return embed(*m.embedding, x);
  if (x.size() != m.grid.dims())
    throw ShapeError("input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(m.grid.dims()));
  return x;
}

/// Moments of the latent function value at one input under the variational
/// posterior. `prior_gap` is the clipped conditional-prior remainder
/// max(σ_f² − wᵀKw, 0); the per-class variance is prior_gap + wᵀΣ_c w.
struct LatentMoments {
  Eigen::VectorXd mean;     ///< per class
  Eigen::VectorXd q_sigma;  ///< wᵀ Σ_c w per class
  Eigen::VectorXd var;      ///< prior_gap + q_sigma
  double q_prior = 0.0;     ///< wᵀ K w
  double prior_gap = 0.0;
  bool gap_active = false;  ///< σ_f² − wᵀKw > 0, i.e. the clip is not engaged
};

inline LatentMoments latent_moments(const TTGPModel& m, const ModelWorkspace& ws,
                                    const KronWeights& w) {
  const int C = m.num_classes();
  LatentMoments out;
  out.mean.resize(C);
  out.q_sigma.resize(C);
  out.var.resize(C);
  out.q_prior = rank1_quad_form(ws.K, w);
  const double gap = m.kernel.variance() - out.q_prior;
  out.gap_active = gap > 0.0;
  out.prior_gap = out.gap_active ? gap : 0.0;
  for (int c = 0; c < C; ++c) {
    out.mean[c] = tt_dot_kron(m.mu[c], w);
    out.q_sigma[c] = rank1_quad_form(ws.sigma[c], w);
    out.var[c] = out.prior_gap + out.q_sigma[c];
  }
  return out;
}

/// KL(q(u) ‖ p(u)) summed over classes, each term
/// ½ (log|K| − log|Σ| − M + tr(K⁻¹Σ) + μᵀK⁻¹μ) with M the grid size.
inline double kl_term(const TTGPModel& m, const ModelWorkspace& ws) {
  double total = 0.0;
  for (int c = 0; c < m.num_classes(); ++c) {
    double trace = 1.0;
    for (double t : ws.k_inv_sigma_trace[c]) trace *= t;
    const double quad = tt_quad_form_kron(m.mu[c], ws.K_inv);
    total += 0.5 * (ws.logdet_K - ws.logdet_sigma[c] - ws.grid_size + trace + quad);
  }
  return total;
}

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Σ_c exp(a_c) in a numerically safe way; returns log-sum-exp and softmax.
inline double softmax_stable(const Eigen::VectorXd& a, Eigen::VectorXd& p) {
  const double amax = a.maxCoeff();
  p = (a.array() - amax).exp();
  const double z = p.sum();
  p /= z;
  return amax + std::log(z);
}

inline void check_batch(const TTGPModel& m, Eigen::Index rows, Eigen::Index cols,
                        Eigen::Index targets, std::int64_t n_total) {
  if (rows == 0) throw InvalidInputError("objective needs a non-empty batch");
  if (targets != rows) throw ShapeError("target count does not match the batch rows");
  if (cols != m.input_dims())
    throw ShapeError("batch has " + std::to_string(cols) + " features, model expects " +
                     std::to_string(m.input_dims()));
  if (n_total < rows) throw InvalidInputError("total count cannot be below the batch size");
}

}  // namespace detail

/// Evidence lower bound for regression on a batch (targets standardized).
/// The data term is rescaled by n_total / batch so mini-batches estimate the
/// full-data objective.
inline double elbo_regression(const TTGPModel& m, const ModelWorkspace& ws,
                              const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              std::int64_t n_total) {
  if (m.task != Task::kRegression) throw InvalidInputError("model is not a regression model");
  detail::check_batch(m, X.rows(), X.cols(), y.size(), n_total);
  const double nu2 = m.kernel.noise_variance();
  double data = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const InterpWeights iw = weights_nd(m.grid, to_grid_coords(m, X.row(i).transpose()));
    const LatentMoments lm = latent_moments(m, ws, iw.factors);
    const double r = y[i] - lm.mean[0];
    data += -0.5 * (detail::kLog2Pi + std::log(nu2)) -
            (r * r + lm.prior_gap + lm.q_sigma[0]) / (2.0 * nu2);
  }
  const double scale = static_cast<double>(n_total) / static_cast<double>(X.rows());
  return scale * data - kl_term(m, ws);
}

/// Evidence lower bound for classification on a batch of class indices.
/// Per point: m_y − log Σ_c exp(m_c + s_c/2), a closed-form lower bound on
/// the expected log-softmax likelihood.
inline double elbo_classification(const TTGPModel& m, const ModelWorkspace& ws,
                                  const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                  std::int64_t n_total) {
  if (m.task != Task::kClassification)
    throw InvalidInputError("model is not a classification model");
  detail::check_batch(m, X.rows(), X.cols(), static_cast<Eigen::Index>(labels.size()), n_total);
  const int C = m.num_classes();
  double data = 0.0;
  Eigen::VectorXd p;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const int yi = labels[i];
    if (yi < 0 || yi >= C) throw InvalidInputError("class index out of range");
    const InterpWeights iw = weights_nd(m.grid, to_grid_coords(m, X.row(i).transpose()));
    const LatentMoments lm = latent_moments(m, ws, iw.factors);
    const Eigen::VectorXd a = lm.mean + 0.5 * lm.var;
    data += lm.mean[yi] - detail::softmax_stable(a, p);
  }
  const double scale = static_cast<double>(n_total) / static_cast<double>(X.rows());
  return scale * data - kl_term(m, ws);
}

/// Gradient of the evidence lower bound with respect to every trainable
/// block, in the same unconstrained coordinates the optimizer uses.
struct ElboGrad {
  double value = 0.0;
  std::vector<std::vector<Eigen::MatrixXd>> d_mu;     ///< [class][dim], core layout
  std::vector<std::vector<Eigen::MatrixXd>> d_sigma;  ///< [class][dim], unconstrained layout
  Eigen::VectorXd d_log_lengthscales;
  double d_log_variance = 0.0;
  double d_log_noise = 0.0;       ///< zero for classification
  Eigen::MatrixXd d_projection;   ///< 0×0 when the model has no embedding
  double clamped_fraction = 0.0;  ///< batch rows clipped to the grid interior
};

namespace detail {

/// d(wᵀ A w)/dx through one dimension's stencil: 2·wᵀ A_window dw, where
/// A_window is the 4×4 block the window selects.
inline double window_quad_dx(const Eigen::MatrixXd& A, const WeightWindow& win,
                             const Eigen::Vector4d& dw) {
  const Eigen::Matrix4d blk = A.block<4, 4>(win.start, win.start);
  return 2.0 * win.w.dot(blk * dw);
}

/// Chain a symmetric gradient in Σ = LLᵀ to the unconstrained parameter
/// block: d/dL = (G + Gᵀ)·L masked to the lower triangle, diagonal scaled by
/// L_ii for the log-diagonal storage.
inline Eigen::MatrixXd chol_param_chain(const Eigen::MatrixXd& G, const Eigen::MatrixXd& L) {
  const Eigen::Index n = L.rows();
  const Eigen::MatrixXd dL = (G + G.transpose()) * L;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) out(i, j) = dL(i, j);
    out(i, i) = dL(i, i) * L(i, i);
  }
  return out;
}

struct PointCoefficients {
  double value = 0.0;         ///< data-term contribution
  Eigen::VectorXd d_mean;     ///< per class
  Eigen::VectorXd d_q_sigma;  ///< per class
  double d_q_prior = 0.0;     ///< already includes the clip gate
  double d_log_noise = 0.0;
};

inline PointCoefficients regression_point(const LatentMoments& lm, double y, double nu2) {
  PointCoefficients pc;
  const double r = y - lm.mean[0];
  pc.value = -0.5 * (kLog2Pi + std::log(nu2)) -
             (r * r + lm.prior_gap + lm.q_sigma[0]) / (2.0 * nu2);
  pc.d_mean = Eigen::VectorXd::Constant(1, r / nu2);
  pc.d_q_sigma = Eigen::VectorXd::Constant(1, -1.0 / (2.0 * nu2));
  pc.d_q_prior = lm.gap_active ? 1.0 / (2.0 * nu2) : 0.0;
  pc.d_log_noise = -0.5 + (r * r + lm.prior_gap + lm.q_sigma[0]) / (2.0 * nu2);
  return pc;
}

inline PointCoefficients classification_point(const LatentMoments& lm, int y) {
  PointCoefficients pc;
  Eigen::VectorXd p;
  const Eigen::VectorXd a = lm.mean + 0.5 * lm.var;
  const double lse = softmax_stable(a, p);
  pc.value = lm.mean[y] - lse;
  pc.d_mean = -p;
  pc.d_mean[y] += 1.0;
  pc.d_q_sigma = -0.5 * p;
  // the gap feeds every class variance: d(gap)/d(q_prior) = −1 when active
  pc.d_q_prior = lm.gap_active ? 0.5 * p.sum() : 0.0;
  return pc;
}

}  // namespace detail

namespace detail {

/// Fold per-entry gradients in the Σ factors and kernel factor matrices into
/// the unconstrained coordinates the optimizer sees, scaled by `sign`.
inline void fold_matrix_grads(const TTGPModel& m, const ModelWorkspace& ws,
                              const std::vector<std::vector<Eigen::MatrixXd>>& g_sigma_mat,
                              const std::vector<Eigen::MatrixXd>& g_K, double sign, ElboGrad& g) {
  const int D = m.grid.dims();
  for (int c = 0; c < m.num_classes(); ++c)
    for (int d = 0; d < D; ++d)
      g.d_sigma[c][d] += sign * chol_param_chain(g_sigma_mat[c][d], ws.sigma_L[c][d]);
  for (int d = 0; d < D; ++d) {
    g.d_log_lengthscales[m.kernel.lengthscale_index(d)] +=
        sign * (g_K[d].array() * ws.K_grads[d].d_log_lengthscale.array()).sum();
    g.d_log_variance += sign * (g_K[d].array() * ws.K_grads[d].d_log_variance.array()).sum();
  }
}

}  // namespace detail

/// Data-term gradient over a batch, every point's contribution weighted by
/// `scale`. The divergence term is NOT included — callers either use
/// subtract_kl_grad once per evaluation or go through elbo_grad. Splitting the
/// two lets the training loop fan the batch out over fixed row blocks and
/// reduce them in a fixed order.
inline ElboGrad elbo_data_grad(const TTGPModel& m, const ModelWorkspace& ws,
                               const Eigen::MatrixXd& X, const Eigen::VectorXd* y,
                               const std::vector<int>* labels, double scale) {
  const bool classify = m.task == Task::kClassification;
  if (classify && labels == nullptr)
    throw InvalidInputError("classification gradients need class labels");
  if (!classify && y == nullptr) throw InvalidInputError("regression gradients need targets");
  detail::check_batch(m, X.rows(), X.cols(),
                      classify ? static_cast<Eigen::Index>(labels->size()) : y->size(),
                      X.rows());
  if (!(scale > 0.0)) throw InvalidInputError("batch scale must be positive");

  const int C = m.num_classes();
  if (classify)
    for (int yi : *labels)
      if (yi < 0 || yi >= C) throw InvalidInputError("class index out of range");
  const int D = m.grid.dims();
  const double nu2 = m.kernel.noise_variance();
  const double sf2 = m.kernel.variance();

  ElboGrad g;
  g.d_mu.resize(C);
  g.d_sigma.resize(C);
  std::vector<std::vector<Eigen::MatrixXd>> g_sigma_mat(C);  // gradient in Σ_{c,d} entries
  std::vector<Eigen::MatrixXd> g_K(D);                       // gradient in K_d entries
  for (int d = 0; d < D; ++d) {
    const int md = static_cast<int>(m.grid.per_dim_points[d].size());
    g_K[d] = Eigen::MatrixXd::Zero(md, md);
  }
  for (int c = 0; c < C; ++c) {
    g.d_mu[c].resize(D);
    g.d_sigma[c].resize(D);
    g_sigma_mat[c].resize(D);
    for (int d = 0; d < D; ++d) {
      g.d_mu[c][d] = Eigen::MatrixXd::Zero(m.mu[c].core(d).rows(), m.mu[c].core(d).cols());
      const int md = static_cast<int>(m.grid.per_dim_points[d].size());
      g.d_sigma[c][d] = Eigen::MatrixXd::Zero(md, md);
      g_sigma_mat[c][d] = Eigen::MatrixXd::Zero(md, md);
    }
  }
  g.d_log_lengthscales = Eigen::VectorXd::Zero(m.kernel.log_lengthscales.size());
  if (m.embedding)
    g.d_projection = Eigen::MatrixXd::Zero(m.embedding->output_dim(), m.embedding->input_dim());

  double data_value = 0.0;
  std::int64_t clamped = 0;
  std::vector<TTDotSweep> sweeps(C);
  Eigen::VectorXd grid_grad(D);

  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const Eigen::VectorXd xi = X.row(i).transpose();
    const InterpWeights iw = weights_nd(m.grid, to_grid_coords(m, xi));
    if (iw.clamped) ++clamped;
    const KronWeights& w = iw.factors;

    // per-dimension quadratic-form values and their products
    const std::vector<double> vK = rank1_quad_form_per_dim(ws.K, w);
    double q_prior = 1.0;
    for (double v : vK) q_prior *= v;
    std::vector<std::vector<double>> vS(C);
    LatentMoments lm;
    lm.mean.resize(C);
    lm.q_sigma.resize(C);
    lm.var.resize(C);
    lm.q_prior = q_prior;
    const double gap = sf2 - q_prior;
    lm.gap_active = gap > 0.0;
    lm.prior_gap = lm.gap_active ? gap : 0.0;
    for (int c = 0; c < C; ++c) {
      sweeps[c] = tt_dot_kron_cached(m.mu[c], w);
      lm.mean[c] = sweeps[c].value;
      vS[c] = rank1_quad_form_per_dim(ws.sigma[c], w);
      double q = 1.0;
      for (double v : vS[c]) q *= v;
      lm.q_sigma[c] = q;
      lm.var[c] = lm.prior_gap + q;
    }

    detail::PointCoefficients pc =
        classify ? detail::classification_point(lm, (*labels)[i])
                 : detail::regression_point(lm, (*y)[i], nu2);
    data_value += pc.value;
    g.d_log_noise += scale * pc.d_log_noise;
    // direct σ_f² dependence through the clipped gap: the gap contributes
    // −1/(2ν²) per unit in regression and −p_c/2 per class in classification,
    // mirrored by d_q_prior with the opposite sign.
    if (lm.gap_active) g.d_log_variance += scale * (-pc.d_q_prior) * sf2;

    for (int c = 0; c < C; ++c) {
      const double coef = scale * pc.d_mean[c];
      if (coef != 0.0) {
        for (int d = 0; d < D; ++d) {
          const int r_next = m.mu[c].ranks()[d + 1];
          const Eigen::MatrixXd outer =
              coef * (sweeps[c].left[d].transpose() * sweeps[c].right[d + 1].transpose());
          for (int j = 0; j < 4; ++j)
            g.d_mu[c][d].middleCols(static_cast<Eigen::Index>(w[d].start + j) * r_next, r_next) +=
                w[d].w[j] * outer;
        }
      }
    }

    for (int d = 0; d < D; ++d) {
      if (pc.d_q_prior != 0.0) {
        double rest = 1.0;
        for (int e = 0; e < D; ++e)
          if (e != d) rest *= vK[e];
        g_K[d].block<4, 4>(w[d].start, w[d].start) +=
            (scale * pc.d_q_prior * rest) * (w[d].w * w[d].w.transpose());
      }
      for (int c = 0; c < C; ++c) {
        if (pc.d_q_sigma[c] == 0.0) continue;
        double rest = 1.0;
        for (int e = 0; e < D; ++e)
          if (e != d) rest *= vS[c][e];
        g_sigma_mat[c][d].block<4, 4>(w[d].start, w[d].start) +=
            (scale * pc.d_q_sigma[c] * rest) * (w[d].w * w[d].w.transpose());
      }
    }

    if (m.embedding) {
      // chain through the stencil weights into the grid coordinates, then
      // into the projection; clamped dimensions carry zero weight derivatives
      grid_grad.setZero();
      for (int d = 0; d < D; ++d) {
        const Eigen::Vector4d& dw = iw.dfactors_dx[d];
        if (dw.cwiseAbs().maxCoeff() == 0.0) continue;
        double acc = 0.0;
        for (int c = 0; c < C; ++c) {
          if (pc.d_mean[c] == 0.0) continue;
          double dm = 0.0;
          for (int j = 0; j < 4; ++j)
            dm += dw[j] * (sweeps[c].left[d] * m.mu[c].core_slice(d, w[d].start + j))
                              .dot(sweeps[c].right[d + 1]);
          acc += pc.d_mean[c] * dm;
        }
        if (pc.d_q_prior != 0.0) {
          double rest = 1.0;
          for (int e = 0; e < D; ++e)
            if (e != d) rest *= vK[e];
          acc += pc.d_q_prior * rest * detail::window_quad_dx(ws.K.factor(d), w[d], dw);
        }
        for (int c = 0; c < C; ++c) {
          if (pc.d_q_sigma[c] == 0.0) continue;
          double rest = 1.0;
          for (int e = 0; e < D; ++e)
            if (e != d) rest *= vS[c][e];
          acc += pc.d_q_sigma[c] * rest * detail::window_quad_dx(ws.sigma[c].factor(d), w[d], dw);
        }
        grid_grad[d] = acc;
      }
      g.d_projection += scale * embed_grad(*m.embedding, xi, grid_grad);
    }
  }

  g.value = scale * data_value;
  g.clamped_fraction = static_cast<double>(clamped) / static_cast<double>(X.rows());
  detail::fold_matrix_grads(m, ws, g_sigma_mat, g_K, 1.0, g);
  if (classify) g.d_log_noise = 0.0;
  return g;
}

/// Subtract the divergence term and its gradients from an accumulated data
/// gradient (ELBO = data − KL).
inline void subtract_kl_grad(const TTGPModel& m, const ModelWorkspace& ws, ElboGrad& g) {
  const int C = m.num_classes();
  const int D = m.grid.dims();
  std::vector<std::vector<Eigen::MatrixXd>> g_sigma_mat(C);
  std::vector<Eigen::MatrixXd> g_K(D);
  for (int d = 0; d < D; ++d) {
    const int md = static_cast<int>(m.grid.per_dim_points[d].size());
    g_K[d] = Eigen::MatrixXd::Zero(md, md);
  }
  for (int c = 0; c < C; ++c) {
    g_sigma_mat[c].resize(D);
    for (int d = 0; d < D; ++d) {
      const int md = static_cast<int>(m.grid.per_dim_points[d].size());
      g_sigma_mat[c][d] = Eigen::MatrixXd::Zero(md, md);
    }
  }

  g.value -= kl_term(m, ws);

  for (int c = 0; c < C; ++c) {
    const TTQuadFormSweep qs = tt_quad_form_kron_cached(m.mu[c], ws.K_inv);
    const std::vector<Eigen::MatrixXd> quad_mu = tt_quad_form_kron_grad(m.mu[c], ws.K_inv, qs);
    const std::vector<Eigen::MatrixXd> quad_K = tt_quad_form_factor_grad(m.mu[c], ws.K_inv, qs);
    for (int d = 0; d < D; ++d) {
      g.d_mu[c][d] -= 0.5 * quad_mu[d];
      const double c_d = ws.grid_size / static_cast<double>(m.grid.per_dim_points[d].size());
      double rest_trace = 1.0;
      for (int e = 0; e < D; ++e)
        if (e != d) rest_trace *= ws.k_inv_sigma_trace[c][e];
      const Eigen::MatrixXd& Kinv_d = ws.K_inv.factor(d);
      // ∂KL/∂Σ_d = ½(−c_d Σ_d⁻¹ + (Π_{e≠d} t_e) K_d⁻¹)
      const Eigen::MatrixXd L = ws.sigma_L[c][d];
      const Eigen::MatrixXd Linv =
          L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(L.rows(), L.rows()));
      const Eigen::MatrixXd sigma_inv = Linv.transpose() * Linv;
      g_sigma_mat[c][d] -= 0.5 * (-c_d * sigma_inv + rest_trace * Kinv_d);
      // ∂KL/∂K_d = ½(c_d K_d⁻¹ − (Π_{e≠d} t_e) K_d⁻¹ Σ_d K_d⁻¹ − K_d⁻¹ M_d K_d⁻¹)
      const Eigen::MatrixXd KSK = Kinv_d * ws.sigma[c].factor(d) * Kinv_d;
      const Eigen::MatrixXd KMK = Kinv_d * quad_K[d] * Kinv_d;
      g_K[d] -= 0.5 * (c_d * Kinv_d - rest_trace * KSK - KMK);
    }
  }

  // the accumulators above already carry the minus sign
  detail::fold_matrix_grads(m, ws, g_sigma_mat, g_K, 1.0, g);
}

/// Full ELBO gradient over a batch: data term scaled to n_total plus the
/// divergence term once. Exactly one of (y, labels) is read.
inline ElboGrad elbo_grad(const TTGPModel& m, const ModelWorkspace& ws, const Eigen::MatrixXd& X,
                          const Eigen::VectorXd* y, const std::vector<int>* labels,
                          std::int64_t n_total) {
  const bool classify = m.task == Task::kClassification;
  if (classify && labels == nullptr)
    throw InvalidInputError("classification gradients need class labels");
  if (!classify && y == nullptr) throw InvalidInputError("regression gradients need targets");
  detail::check_batch(m, X.rows(), X.cols(),
                      classify ? static_cast<Eigen::Index>(labels->size()) : y->size(), n_total);
  const double scale = static_cast<double>(n_total) / static_cast<double>(X.rows());
  ElboGrad g = elbo_data_grad(m, ws, X, y, labels, scale);
  subtract_kl_grad(m, ws, g);
  return g;
}

inline ElboGrad elbo_grad_regression(const TTGPModel& m, const ModelWorkspace& ws,
                                     const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                     std::int64_t n_total) {
  return elbo_grad(m, ws, X, &y, nullptr, n_total);
}

inline ElboGrad elbo_grad_classification(const TTGPModel& m, const ModelWorkspace& ws,
                                         const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                         std::int64_t n_total) {
  return elbo_grad(m, ws, X, nullptr, &labels, n_total);
}

struct RegressionPrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  ///< latent variance plus observation noise
  double clamped_fraction = 0.0;
};

/// Posterior predictions in original target units given the standardization
/// that was applied to the training targets.
inline RegressionPrediction predict_regression(const TTGPModel& m, const ModelWorkspace& ws,
                                               const Eigen::MatrixXd& X, double y_mean = 0.0,
                                               double y_std = 1.0) {
  if (m.task != Task::kRegression) throw InvalidInputError("model is not a regression model");
  if (X.cols() != m.input_dims())
    throw ShapeError("prediction input has the wrong feature count");
  RegressionPrediction out;
  out.mean.resize(X.rows());
  out.variance.resize(X.rows());
  const double nu2 = m.kernel.noise_variance();
  std::int64_t clamped = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const InterpWeights iw = weights_nd(m.grid, to_grid_coords(m, X.row(i).transpose()));
    if (iw.clamped) ++clamped;
    const LatentMoments lm = latent_moments(m, ws, iw.factors);
    out.mean[i] = y_mean + y_std * lm.mean[0];
    out.variance[i] = (lm.var[0] + nu2) * y_std * y_std;
  }
  out.clamped_fraction =
      X.rows() == 0 ? 0.0 : static_cast<double>(clamped) / static_cast<double>(X.rows());
  return out;
}

struct ClassificationPrediction {
  std::vector<int> class_index;    ///< argmax of the mean; ties take the lowest index
  Eigen::MatrixXd probabilities;   ///< softmax over per-class posterior means
  double clamped_fraction = 0.0;
};

inline ClassificationPrediction predict_classification(const TTGPModel& m,
                                                       const ModelWorkspace& ws,
                                                       const Eigen::MatrixXd& X) {
  if (m.task != Task::kClassification)
    throw InvalidInputError("model is not a classification model");
  if (X.cols() != m.input_dims())
    throw ShapeError("prediction input has the wrong feature count");
  const int C = m.num_classes();
  ClassificationPrediction out;
  out.class_index.resize(X.rows());
  out.probabilities.resize(X.rows(), C);
  std::int64_t clamped = 0;
  Eigen::VectorXd p;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const InterpWeights iw = weights_nd(m.grid, to_grid_coords(m, X.row(i).transpose()));
    if (iw.clamped) ++clamped;
    Eigen::VectorXd means(C);
    for (int c = 0; c < C; ++c) means[c] = tt_dot_kron(m.mu[c], iw.factors);
    detail::softmax_stable(means, p);
    out.probabilities.row(i) = p.transpose();
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (means[c] > means[best]) best = c;
    out.class_index[i] = best;
  }
  out.clamped_fraction =
      X.rows() == 0 ? 0.0 : static_cast<double>(clamped) / static_cast<double>(X.rows());
  return out;
}

/// A fresh model: small random mean tensors and per-class covariance factors
/// initialized at the kernel factors' Cholesky (so q starts at the prior in
/// covariance and the divergence starts near zero).
///
/// The mean cores are not left as white noise across grid nodes: each core's
/// mode index is filtered through the kernel factor's Cholesky (rescaled to a
/// unit diagonal), which gives the initial mean the prior's smoothness along
/// every dimension. A white-noise mean has most of its energy in the prior's
/// smallest eigendirections, so its divergence quadratic blows up whenever
/// neighboring grid nodes are strongly correlated; the filtered draw keeps
/// that term bounded by the draw's norm for any lengthscale/spacing ratio.
inline TTGPModel init_model(Task task, Grid grid, RBFParams kernel, int tt_rank, int num_classes,
                            std::uint64_t seed,
                            std::optional<LinearEmbedding> embedding = std::nullopt) {
  if (task == Task::kRegression && num_classes != 1)
    throw InvalidInputError("regression uses exactly one class slot");
  if (task == Task::kClassification && num_classes < 2)
    throw InvalidInputError("classification needs at least two classes");
  TTGPModel m;
  m.task = task;
  m.grid = std::move(grid);
  m.kernel = std::move(kernel);
  m.embedding = std::move(embedding);

  const auto modes = m.grid.mode_sizes();
  const std::vector<int> ranks = TTVector::capped_ranks(modes, tt_rank);
  // choose the core scale so represented tensor entries come out near 0.1 RMS
  double rank_prod = 1.0;
  for (std::size_t d = 1; d + 1 < ranks.size(); ++d) rank_prod *= ranks[d];
  const double D = static_cast<double>(modes.size());
  const double stddev = std::pow(0.01 / rank_prod, 1.0 / (2.0 * D));

  std::vector<Eigen::MatrixXd> chol(modes.size());
  for (std::size_t d = 0; d < modes.size(); ++d) {
    Eigen::LLT<Eigen::MatrixXd> llt(
        k_dim_matrix(m.kernel, static_cast<int>(d), m.grid.per_dim_points[d]));
    if (llt.info() != Eigen::Success)
      throw DecompositionError("kernel factor for dimension " + std::to_string(d) +
                               " is not positive-definite at initialization");
    chol[d] = llt.matrixL();
  }

  m.mu.reserve(num_classes);
  m.sigma_param.resize(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    TTVector mu = TTVector::random(modes, tt_rank, stddev, seed + 7919 * (c + 1));
    for (std::size_t d = 0; d < modes.size(); ++d) {
      // L(0,0) = sqrt(K(0,0)): dividing by it normalizes the filter so the
      // represented entries keep their target RMS regardless of the kernel
      // variance
      const Eigen::MatrixXd smoother = chol[d] / chol[d](0, 0);
      const Eigen::MatrixXd white = mu.core(static_cast<int>(d));
      Eigen::MatrixXd filtered = Eigen::MatrixXd::Zero(white.rows(), white.cols());
      const Eigen::Index r_right = mu.ranks()[d + 1];
      for (int k = 0; k < modes[d]; ++k)
        for (int j = 0; j <= k; ++j)
          filtered.middleCols(k * r_right, r_right).noalias() +=
              smoother(k, j) * white.middleCols(j * r_right, r_right);
      mu.core(static_cast<int>(d)) = std::move(filtered);
    }
    m.mu.push_back(std::move(mu));
    m.sigma_param[c].resize(modes.size());
  }
  for (std::size_t d = 0; d < modes.size(); ++d) {
    const Eigen::MatrixXd theta = unconstrained_from_lower(chol[d]);
    for (int c = 0; c < num_classes; ++c) m.sigma_param[c][d] = theta;
  }
  m.validate();
  return m;
}

}  // namespace ttgp
