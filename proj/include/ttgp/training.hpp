#pragma once
// Minibatch Adam training loop, held-out metrics, and checkpoint files.

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/data.hpp"
#include "ttgp/errors.hpp"
#include "ttgp/model.hpp"

namespace ttgp {

struct TrainConfig {
  Task task = Task::kRegression;
  int epochs = 50;
  int batch_size = 128;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  int m0 = 20;          ///< grid nodes per latent dimension
  int tt_rank = 10;     ///< target tensor-train rank for the mean
  int embedding_dim = 0;  ///< latent dimensions of the linear embedding; 0 disables it
  double init_lengthscale = 1.0;
  double init_variance = 1.0;
  double init_noise_variance = 0.1;
  bool tied_lengthscales = false;
  int eval_every = 1;     ///< epochs between held-out evaluations
  int warmup_epochs = 0;  ///< epochs before kernel hyperparameters slow down
  double hyper_lr_scale = 1.0;  ///< kernel-hyperparameter step scale after warmup (1 = off)
  int workers = 1;        ///< threads for per-batch gradient blocks

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (epochs < 0) fail("epochs must be non-negative");
    if (batch_size < 1) fail("batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      fail("learning_rate must be positive and finite");
    if (!(beta1 > 0.0 && beta1 < 1.0)) fail("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) fail("beta2 must lie in (0, 1)");
    if (!(epsilon > 0.0)) fail("epsilon must be positive");
    if (m0 < 4) fail("m0 must be at least 4");
    if (tt_rank < 1) fail("tt_rank must be at least 1");
    if (embedding_dim < 0) fail("embedding_dim must be non-negative");
    if (!(init_lengthscale > 0.0)) fail("init_lengthscale must be positive");
    if (!(init_variance > 0.0)) fail("init_variance must be positive");
    if (!(init_noise_variance > 0.0)) fail("init_noise_variance must be positive");
    if (eval_every < 1) fail("eval_every must be at least 1");
    if (warmup_epochs < 0) fail("warmup_epochs must be non-negative");
    if (!(hyper_lr_scale > 0.0 && hyper_lr_scale <= 1.0))
      fail("hyper_lr_scale must lie in (0, 1]");
    if (workers < 1) fail("workers must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Flat parameter packing. All unconstrained parameters live in one vector so
// the optimizer is a handful of array expressions. Order: mean cores (class
// then dimension, column-major entries), covariance factor parameters (same
// order), kernel log-hyperparameters, then the embedding projection.
// ---------------------------------------------------------------------------

struct PackLayout {
  Eigen::Index total = 0;
  Eigen::Index hyper_start = 0;  ///< first kernel log-hyperparameter
  Eigen::Index hyper_size = 0;   ///< log-lengthscales, log-variance, log-noise
};

inline PackLayout pack_layout(const TTGPModel& m) {
  PackLayout lay;
  Eigen::Index n = 0;
  for (const TTVector& mu : m.mu)
    for (int d = 0; d < m.grid.dims(); ++d) n += mu.core(d).size();
  for (const auto& per_class : m.sigma_param)
    for (const Eigen::MatrixXd& t : per_class) n += t.size();
  lay.hyper_start = n;
  lay.hyper_size = m.kernel.log_lengthscales.size() + 2;
  n += lay.hyper_size;
  if (m.embedding) n += m.embedding->projection.size();
  lay.total = n;
  return lay;
}

namespace detail {

inline void pack_block(Eigen::VectorXd& out, Eigen::Index& at, const Eigen::MatrixXd& v) {
  out.segment(at, v.size()) = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
  at += v.size();
}

inline void unpack_block(const Eigen::VectorXd& in, Eigen::Index& at, Eigen::MatrixXd& v) {
  Eigen::Map<Eigen::VectorXd>(v.data(), v.size()) = in.segment(at, v.size());
  at += v.size();
}

}  // namespace detail

inline Eigen::VectorXd pack_params(const TTGPModel& m) {
  Eigen::VectorXd out(pack_layout(m).total);
  Eigen::Index at = 0;
  for (const TTVector& mu : m.mu)
    for (int d = 0; d < m.grid.dims(); ++d) detail::pack_block(out, at, mu.core(d));
  for (const auto& per_class : m.sigma_param)
    for (const Eigen::MatrixXd& t : per_class) detail::pack_block(out, at, t);
  out.segment(at, m.kernel.log_lengthscales.size()) = m.kernel.log_lengthscales;
  at += m.kernel.log_lengthscales.size();
  out[at++] = m.kernel.log_variance;
  out[at++] = m.kernel.log_noise;
  if (m.embedding) detail::pack_block(out, at, m.embedding->projection);
  return out;
}

inline void unpack_params(TTGPModel& m, const Eigen::VectorXd& theta) {
  if (theta.size() != pack_layout(m).total)
    throw ShapeError("parameter vector does not match the model layout");
  Eigen::Index at = 0;
  for (TTVector& mu : m.mu)
    for (int d = 0; d < m.grid.dims(); ++d) detail::unpack_block(theta, at, mu.core(d));
  for (auto& per_class : m.sigma_param)
    for (Eigen::MatrixXd& t : per_class) detail::unpack_block(theta, at, t);
  m.kernel.log_lengthscales = theta.segment(at, m.kernel.log_lengthscales.size());
  at += m.kernel.log_lengthscales.size();
  m.kernel.log_variance = theta[at++];
  m.kernel.log_noise = theta[at++];
  if (m.embedding) detail::unpack_block(theta, at, m.embedding->projection);
}

inline Eigen::VectorXd pack_grad(const TTGPModel& m, const ElboGrad& g) {
  Eigen::VectorXd out(pack_layout(m).total);
  Eigen::Index at = 0;
  for (int c = 0; c < m.num_classes(); ++c)
    for (int d = 0; d < m.grid.dims(); ++d) detail::pack_block(out, at, g.d_mu[c][d]);
  for (int c = 0; c < m.num_classes(); ++c)
    for (int d = 0; d < m.grid.dims(); ++d) detail::pack_block(out, at, g.d_sigma[c][d]);
  out.segment(at, g.d_log_lengthscales.size()) = g.d_log_lengthscales;
  at += g.d_log_lengthscales.size();
  out[at++] = g.d_log_variance;
  out[at++] = g.d_log_noise;
  if (m.embedding) detail::pack_block(out, at, g.d_projection);
  return out;
}

// ---------------------------------------------------------------------------
// Adam, signed for ascent on the bound.
// ---------------------------------------------------------------------------

struct AdamState {
  Eigen::VectorXd first;   ///< first-moment estimate
  Eigen::VectorXd second;  ///< second-moment estimate
  std::int64_t step = 0;

  static AdamState zero(Eigen::Index n) {
    AdamState s;
    s.first = Eigen::VectorXd::Zero(n);
    s.second = Eigen::VectorXd::Zero(n);
    return s;
  }
};

/// One bias-corrected Adam ascent step in place. `step_scale`, when given,
/// multiplies the per-coordinate step (used to slow kernel hyperparameters).
inline void adam_update(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
                        double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                        double epsilon = 1e-8, const Eigen::VectorXd* step_scale = nullptr) {
  if (grad.size() != params.size() || state.first.size() != params.size() ||
      state.second.size() != params.size() ||
      (step_scale != nullptr && step_scale->size() != params.size()))
    throw ShapeError("optimizer state does not match the parameter vector");
  state.step += 1;
  state.first = beta1 * state.first + (1.0 - beta1) * grad;
  state.second = beta2 * state.second + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  Eigen::ArrayXd step = (learning_rate / c1) * state.first.array() /
                        ((state.second.array() / c2).sqrt() + epsilon);
  if (step_scale != nullptr) step *= step_scale->array();
  params.array() += step;
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;     ///< 1-based epoch index
  double elbo = 0;   ///< full-training-set bound after the epoch
  double metric = 0; ///< held-out r² (regression) or accuracy (classification)
  double seconds = 0;
};

inline double r_squared(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred) {
  if (truth.size() != pred.size() || truth.size() == 0)
    throw ShapeError("r_squared needs matching non-empty vectors");
  const double mean = truth.mean();
  const double ss_tot = (truth.array() - mean).matrix().squaredNorm();
  const double ss_res = (truth - pred).squaredNorm();
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - ss_res / ss_tot;
}

inline double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size() || truth.empty())
    throw ShapeError("accuracy needs matching non-empty vectors");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, std::ostream& os) {
  os << "epoch,elbo,metric,seconds\n";
  os.precision(17);
  for (const EpochMetrics& e : history)
    os << e.epoch << ',' << e.elbo << ',' << e.metric << ',' << e.seconds << '\n';
}

// ---------------------------------------------------------------------------
// Batch gradients with a thread-count-independent reduction: the batch is cut
// into fixed row blocks, each block's data gradient is computed independently
// (serially or by workers), and blocks are summed in index order, so the
// result is bitwise identical for any worker count.
// ---------------------------------------------------------------------------

namespace detail {

constexpr Eigen::Index kGradBlockRows = 32;

inline void add_grad(const TTGPModel& m, ElboGrad& a, const ElboGrad& b, Eigen::Index rows_a,
                     Eigen::Index rows_b) {
  a.value += b.value;
  for (int c = 0; c < m.num_classes(); ++c)
    for (int d = 0; d < m.grid.dims(); ++d) {
      a.d_mu[c][d] += b.d_mu[c][d];
      a.d_sigma[c][d] += b.d_sigma[c][d];
    }
  a.d_log_lengthscales += b.d_log_lengthscales;
  a.d_log_variance += b.d_log_variance;
  a.d_log_noise += b.d_log_noise;
  if (m.embedding) a.d_projection += b.d_projection;
  a.clamped_fraction = (a.clamped_fraction * static_cast<double>(rows_a) +
                        b.clamped_fraction * static_cast<double>(rows_b)) /
                       static_cast<double>(rows_a + rows_b);
}

inline ElboGrad batch_grad(const TTGPModel& m, const ModelWorkspace& ws, const Eigen::MatrixXd& X,
                           const Eigen::VectorXd* y, const std::vector<int>* labels, double scale,
                           int workers) {
  const Eigen::Index rows = X.rows();
  const Eigen::Index blocks = (rows + kGradBlockRows - 1) / kGradBlockRows;
  std::vector<ElboGrad> parts(static_cast<std::size_t>(blocks));
  auto run_block = [&](Eigen::Index b) {
    const Eigen::Index lo = b * kGradBlockRows;
    const Eigen::Index len = std::min(kGradBlockRows, rows - lo);
    const Eigen::MatrixXd Xb = X.middleRows(lo, len);
    if (y != nullptr) {
      const Eigen::VectorXd yb = y->segment(lo, len);
      parts[static_cast<std::size_t>(b)] = elbo_data_grad(m, ws, Xb, &yb, nullptr, scale);
    } else {
      const std::vector<int> lb(labels->begin() + lo, labels->begin() + lo + len);
      parts[static_cast<std::size_t>(b)] = elbo_data_grad(m, ws, Xb, nullptr, &lb, scale);
    }
  };
  const int threads = static_cast<int>(std::min<Eigen::Index>(workers, blocks));
  if (threads <= 1) {
    for (Eigen::Index b = 0; b < blocks; ++b) run_block(b);
  } else {
    std::atomic<Eigen::Index> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (;;) {
          const Eigen::Index b = next.fetch_add(1);
          if (b >= blocks) return;
          run_block(b);
        }
      });
    for (std::thread& t : pool) t.join();
  }
  ElboGrad g = std::move(parts[0]);
  Eigen::Index seen = std::min(kGradBlockRows, rows);
  for (Eigen::Index b = 1; b < blocks; ++b) {
    const Eigen::Index len = std::min(kGradBlockRows, rows - b * kGradBlockRows);
    add_grad(m, g, parts[static_cast<std::size_t>(b)], seen, len);
    seen += len;
  }
  subtract_kl_grad(m, ws, g);
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Inputs to train(). Exactly one of (y_*, labels_*) is used per split,
/// matching the task. The held-out split may be empty; the per-epoch metric
/// then falls back to the training split.
struct TrainData {
  Eigen::MatrixXd X_train;
  Eigen::VectorXd y_train;
  std::vector<int> labels_train;
  Eigen::MatrixXd X_heldout;
  Eigen::VectorXd y_heldout;
  std::vector<int> labels_heldout;
};

struct TrainResult {
  TTGPModel model;  ///< best model by held-out metric
  AdamState adam;   ///< optimizer state at the best epoch
  std::vector<EpochMetrics> history;
};

namespace detail {

inline void check_train_data(const TrainData& data, const TrainConfig& cfg, int num_classes) {
  const Eigen::Index n = data.X_train.rows();
  if (n == 0) throw InvalidInputError("training set is empty");
  if (cfg.task == Task::kRegression) {
    if (data.y_train.size() != n)
      throw ShapeError("training target count does not match the feature rows");
    if (data.X_heldout.rows() != static_cast<Eigen::Index>(data.y_heldout.size()))
      throw ShapeError("held-out target count does not match the feature rows");
  } else {
    if (static_cast<Eigen::Index>(data.labels_train.size()) != n)
      throw ShapeError("training label count does not match the feature rows");
    if (data.X_heldout.rows() != static_cast<Eigen::Index>(data.labels_heldout.size()))
      throw ShapeError("held-out label count does not match the feature rows");
    for (int l : data.labels_train)
      if (l < 0 || l >= num_classes) throw InvalidInputError("class index out of range");
    for (int l : data.labels_heldout)
      if (l < 0 || l >= num_classes) throw InvalidInputError("class index out of range");
    if (num_classes < 2) throw InvalidInputError("classification needs at least two classes");
  }
  if (data.X_heldout.rows() > 0 && data.X_heldout.cols() != data.X_train.cols())
    throw ShapeError("held-out feature count does not match the training features");
}

/// Latent-space coordinates of a whole matrix of raw inputs.
inline Eigen::MatrixXd latent_coords(const TTGPModel& m, const Eigen::MatrixXd& X) {
  if (!m.embedding) return X;
  Eigen::MatrixXd G(X.rows(), m.embedding->output_dim());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    G.row(i) = embed(*m.embedding, X.row(i).transpose()).transpose();
  return G;
}

inline std::vector<std::pair<double, double>> column_ranges(const Eigen::MatrixXd& G) {
  std::vector<std::pair<double, double>> ranges(static_cast<std::size_t>(G.cols()));
  for (Eigen::Index d = 0; d < G.cols(); ++d) {
    double lo = G.col(d).minCoeff();
    double hi = G.col(d).maxCoeff();
    if (hi - lo < 1e-9) {  // widen degenerate ranges so the grid stays valid
      lo -= 0.5;
      hi += 0.5;
    }
    ranges[static_cast<std::size_t>(d)] = {lo, hi};
  }
  return ranges;
}

/// Keep the log-hyperparameters inside a numerically safe box; everything else
/// is unclamped. The noise floor matters most: ν² → 0 makes the data term
/// blow up faster than any gradient signal can correct.
inline void clamp_hypers(Eigen::VectorXd& theta, const PackLayout& lay) {
  const Eigen::Index ls_count = lay.hyper_size - 2;
  for (Eigen::Index i = 0; i < ls_count; ++i) {
    double& v = theta[lay.hyper_start + i];
    v = std::clamp(v, -6.0, 6.0);
  }
  theta[lay.hyper_start + ls_count] = std::clamp(theta[lay.hyper_start + ls_count], -8.0, 8.0);
  theta[lay.hyper_start + ls_count + 1] =
      std::clamp(theta[lay.hyper_start + ls_count + 1], -12.0, 6.0);
}

// ---------------------------------------------------------------------------
// Preconditioned optimizer coordinates. Coordinate-wise steps on the raw mean
// cores and covariance factors put white-noise energy into the prior's
// near-null eigendirections; once the lengthscale exceeds the grid spacing
// the kernel factors become nearly singular and the divergence term punishes
// that energy by orders of magnitude, freezing the optimizer. The fix is to
// step in coordinates scaled by the prior itself: mean cores are stored as
// white draws whose mode index is mixed through the kernel factor's Cholesky,
// and each covariance factor as a triangular multiplier on that Cholesky (so
// the prior corresponds to the identity multiplier). In these coordinates the
// divergence is spherical-ish and any lengthscale/spacing ratio trains
// stably.
// ---------------------------------------------------------------------------

/// Lower Cholesky factor of every per-dimension kernel matrix.
inline std::vector<Eigen::MatrixXd> kernel_factor_chols(const TTGPModel& m) {
  std::vector<Eigen::MatrixXd> chol(static_cast<std::size_t>(m.grid.dims()));
  for (int d = 0; d < m.grid.dims(); ++d) {
    Eigen::LLT<Eigen::MatrixXd> llt(k_dim_matrix(m.kernel, d, m.grid.per_dim_points[d]));
    if (llt.info() != Eigen::Success)
      throw DecompositionError("kernel factor for dimension " + std::to_string(d) +
                               " is not positive-definite");
    chol[static_cast<std::size_t>(d)] = llt.matrixL();
  }
  return chol;
}

/// Mix a TT core's mode slices with a lower-triangular matrix: slice k of the
/// result is Σ_j L(k, j)·slice_j, or Σ_k L(k, j)·slice_k when transposed.
/// The core is stored as r_left × (m·r_right) with slice j at column block j.
inline Eigen::MatrixXd mode_mix(const Eigen::MatrixXd& L, const Eigen::MatrixXd& core,
                                Eigen::Index r_right, bool transposed) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(core.rows(), core.cols());
  for (Eigen::Index k = 0; k < L.rows(); ++k)
    for (Eigen::Index j = 0; j <= k; ++j) {
      const Eigen::Index dst = transposed ? j : k;
      const Eigen::Index src = transposed ? k : j;
      out.middleCols(dst * r_right, r_right).noalias() +=
          L(k, j) * core.middleCols(src * r_right, r_right);
    }
  return out;
}

/// Inverse of mode_mix(L, ·, ·, false): forward substitution over the slices.
inline Eigen::MatrixXd mode_unmix(const Eigen::MatrixXd& L, const Eigen::MatrixXd& core,
                                  Eigen::Index r_right) {
  Eigen::MatrixXd out(core.rows(), core.cols());
  for (Eigen::Index k = 0; k < L.rows(); ++k) {
    Eigen::MatrixXd acc = core.middleCols(k * r_right, r_right);
    for (Eigen::Index j = 0; j < k; ++j) acc.noalias() -= L(k, j) * out.middleCols(j * r_right, r_right);
    out.middleCols(k * r_right, r_right) = acc / L(k, k);
  }
  return out;
}

/// Whitened covariance block → model covariance block: the model's Cholesky
/// factor is L_k·T with T = lower_from_unconstrained(white).
inline Eigen::MatrixXd sigma_from_white(const Eigen::MatrixXd& Lk, const Eigen::MatrixXd& white) {
  return unconstrained_from_lower(Lk * lower_from_unconstrained(white));
}

/// Model covariance block → whitened block: T = L_k⁻¹ · model factor.
inline Eigen::MatrixXd sigma_to_white(const Eigen::MatrixXd& Lk, const Eigen::MatrixXd& theta) {
  const Eigen::MatrixXd T =
      Lk.triangularView<Eigen::Lower>().solve(lower_from_unconstrained(theta));
  return unconstrained_from_lower(T);
}

/// Pull a gradient with respect to the model covariance block back to the
/// whitened block, through both diagonal-log maps and the triangular product.
inline Eigen::MatrixXd sigma_grad_to_white(const Eigen::MatrixXd& Lk,
                                           const Eigen::MatrixXd& white,
                                           const Eigen::MatrixXd& d_theta) {
  const Eigen::Index n = Lk.rows();
  const Eigen::MatrixXd T = lower_from_unconstrained(white);
  const Eigen::MatrixXd Ls = Lk * T;
  Eigen::MatrixXd d_factor = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) d_factor(i, j) = d_theta(i, j);
    d_factor(i, i) = d_theta(i, i) / Ls(i, i);
  }
  const Eigen::MatrixXd dT = Lk.transpose() * d_factor;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) out(i, j) = dT(i, j);
    out(i, i) = dT(i, i) * T(i, i);
  }
  return out;
}

/// Derivative of a Cholesky factor: with L·Lᵀ = K, the factor of K + ε·dK is
/// L + ε·L·Φ(L⁻¹·dK·L⁻ᵀ) + O(ε²), where Φ keeps the strict lower triangle
/// plus half the diagonal.
inline Eigen::MatrixXd chol_derivative(const Eigen::MatrixXd& L, const Eigen::MatrixXd& dK) {
  Eigen::MatrixXd S = L.triangularView<Eigen::Lower>().solve(dK);
  S = L.triangularView<Eigen::Lower>().solve(S.transpose()).transpose();
  Eigen::MatrixXd phi = Eigen::MatrixXd(S.triangularView<Eigen::StrictlyLower>());
  phi.diagonal() = 0.5 * S.diagonal();
  return L.triangularView<Eigen::Lower>() * phi;
}

/// In the preconditioned coordinates the kernel hyperparameters move the mean
/// and covariance along with the prior (the model mean is the Cholesky-mixed
/// white draw, the model covariance factor is L·T). The plain per-parameter
/// gradient treats the mean and covariance as fixed, so it misses that
/// coupling; this adds the missing terms, contracting the mean/covariance
/// gradients with the Cholesky's own hyperparameter derivatives. A welcome
/// side effect: the divergence term is exactly hyperparameter-independent at
/// fixed preconditioned coordinates, so its (large, shrinkage-biased) direct
/// hyperparameter gradient is cancelled here by the matching coupling term.
inline void add_hyper_transport(const TTGPModel& model, const TTGPModel& white,
                                const std::vector<Eigen::MatrixXd>& chol, ElboGrad& g) {
  const int D = model.grid.dims();
  const int C = model.num_classes();
  const double two_D = 2.0 * static_cast<double>(D);
  for (int d = 0; d < D; ++d) {
    const std::size_t dd = static_cast<std::size_t>(d);
    const Eigen::MatrixXd& L = chol[dd];
    const KernelMatrixGrad kg = k_dim_matrix_grad(model.kernel, d, model.grid.per_dim_points[dd]);
    const Eigen::MatrixXd dL_ls = chol_derivative(L, kg.d_log_lengthscale);
    double t_ls = 0.0;
    double t_var = 0.0;
    for (int c = 0; c < C; ++c) {
      const std::size_t cc = static_cast<std::size_t>(c);
      const Eigen::Index rr = model.mu[cc].ranks()[dd + 1];
      // the whole factor scales as σ_f^{1/D}, so ∂(model core)/∂log σ_f² is
      // the core itself over 2D
      t_var += g.d_mu[c][d].cwiseProduct(model.mu[cc].core(d)).sum() / two_D;
      t_ls += g.d_mu[c][d].cwiseProduct(mode_mix(dL_ls, white.mu[cc].core(d), rr, false)).sum();
      const Eigen::MatrixXd T = lower_from_unconstrained(white.sigma_param[cc][dd]);
      const Eigen::MatrixXd Ls = L * T;
      const Eigen::MatrixXd dLs_ls = dL_ls * T;
      double s_var = 0.0;
      double s_ls = 0.0;
      for (Eigen::Index i = 0; i < L.rows(); ++i) {
        for (Eigen::Index j = 0; j < i; ++j) {
          s_var += g.d_sigma[c][d](i, j) * Ls(i, j);
          s_ls += g.d_sigma[c][d](i, j) * dLs_ls(i, j);
        }
        // diagonal entries are stored as logs: chain through 1/Ls_ii
        s_var += g.d_sigma[c][d](i, i);
        s_ls += g.d_sigma[c][d](i, i) * dLs_ls(i, i) / Ls(i, i);
      }
      t_var += s_var / two_D;
      t_ls += s_ls;
    }
    g.d_log_variance += t_var;
    g.d_log_lengthscales[model.kernel.lengthscale_index(d)] += t_ls;
  }
}

/// Rewrite a gradient taken in model coordinates into the preconditioned
/// coordinates (kernel hyperparameters and the embedding pass through).
inline void whiten_gradient(const TTGPModel& model, const TTGPModel& white,
                            const std::vector<Eigen::MatrixXd>& chol, ElboGrad& g) {
  for (int c = 0; c < model.num_classes(); ++c)
    for (int d = 0; d < model.grid.dims(); ++d) {
      const Eigen::MatrixXd& L = chol[static_cast<std::size_t>(d)];
      const Eigen::Index rr = model.mu[static_cast<std::size_t>(c)].ranks()[static_cast<std::size_t>(d) + 1];
      g.d_mu[c][d] = mode_mix(L, g.d_mu[c][d], rr, /*transposed=*/true);
      g.d_sigma[c][d] =
          sigma_grad_to_white(L, white.sigma_param[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)], g.d_sigma[c][d]);
    }
}

/// Model state → whitened state. The kernel and embedding are shared, so the
/// caller keeps them equal on both sides.
inline void whiten_state(TTGPModel& white, const TTGPModel& model,
                         const std::vector<Eigen::MatrixXd>& chol) {
  for (int c = 0; c < model.num_classes(); ++c)
    for (int d = 0; d < model.grid.dims(); ++d) {
      const Eigen::MatrixXd& L = chol[static_cast<std::size_t>(d)];
      const std::size_t cc = static_cast<std::size_t>(c);
      const std::size_t dd = static_cast<std::size_t>(d);
      white.mu[cc].core(d) =
          mode_unmix(L, model.mu[cc].core(d), model.mu[cc].ranks()[dd + 1]);
      white.sigma_param[cc][dd] = sigma_to_white(L, model.sigma_param[cc][dd]);
    }
}

/// Whitened state → model state: copies the hyperparameters and embedding,
/// refreshes the kernel Cholesky factors, then fills the mean cores and
/// covariance blocks.
inline void materialize_from_white(TTGPModel& model, const TTGPModel& white,
                                   std::vector<Eigen::MatrixXd>& chol) {
  model.kernel = white.kernel;
  model.embedding = white.embedding;
  chol = kernel_factor_chols(model);
  for (int c = 0; c < model.num_classes(); ++c)
    for (int d = 0; d < model.grid.dims(); ++d) {
      const Eigen::MatrixXd& L = chol[static_cast<std::size_t>(d)];
      const std::size_t cc = static_cast<std::size_t>(c);
      const std::size_t dd = static_cast<std::size_t>(d);
      model.mu[cc].core(d) =
          mode_mix(L, white.mu[cc].core(d), white.mu[cc].ranks()[dd + 1], /*transposed=*/false);
      model.sigma_param[cc][dd] = sigma_from_white(L, white.sigma_param[cc][dd]);
    }
}

}  // namespace detail

/// Run minibatch Adam on the bound and return the best model seen, judged by
/// the held-out metric at each evaluation epoch. The batch order, the block
/// reduction, and every initialization depend only on the seed, so equal
/// seeds give bitwise-equal trajectories for any worker count.
inline TrainResult train(const TrainData& data, const TrainConfig& cfg) {
  cfg.validate();
  const bool classify = cfg.task == Task::kClassification;
  int num_classes = 1;
  if (classify) {
    int top = -1;
    for (int l : data.labels_train) top = std::max(top, l);
    for (int l : data.labels_heldout) top = std::max(top, l);
    num_classes = top + 1;
  }
  detail::check_train_data(data, cfg, num_classes);
  const Eigen::Index n = data.X_train.rows();

  std::optional<LinearEmbedding> emb;
  if (cfg.embedding_dim > 0) {
    emb = LinearEmbedding::random(cfg.embedding_dim, static_cast<int>(data.X_train.cols()),
                                  cfg.seed);
    emb->update_stats(data.X_train, 1.0);
  }

  TTGPModel model;
  {
    TTGPModel probe;  // embedding applied before the grid exists, so embed directly
    Eigen::MatrixXd G;
    if (emb) {
      probe.embedding = emb;
      G = detail::latent_coords(probe, data.X_train);
    } else {
      G = data.X_train;
    }
    const Grid grid = grid_build(detail::column_ranges(G), cfg.m0);
    const RBFParams kernel =
        RBFParams::make(grid.dims(), cfg.init_lengthscale, cfg.init_variance,
                        cfg.init_noise_variance, cfg.tied_lengthscales);
    model = init_model(cfg.task, grid, kernel, cfg.tt_rank, num_classes, cfg.seed, emb);
  }

  const PackLayout lay = pack_layout(model);
  // the optimizer steps in prior-preconditioned coordinates (see the detail
  // helpers above); the model itself always holds the plain parametrization
  std::vector<Eigen::MatrixXd> chol = detail::kernel_factor_chols(model);
  TTGPModel white = model;
  detail::whiten_state(white, model, chol);
  Eigen::VectorXd omega = pack_params(white);
  AdamState adam = AdamState::zero(lay.total);
  Eigen::VectorXd slow_scale = Eigen::VectorXd::Ones(lay.total);
  slow_scale.segment(lay.hyper_start, lay.hyper_size).array() = cfg.hyper_lr_scale;

  TrainResult out;
  out.model = model;
  out.adam = adam;
  double best_metric = -std::numeric_limits<double>::infinity();

  const bool heldout_empty = data.X_heldout.rows() == 0;
  auto evaluate_metric = [&](const ModelWorkspace& ws) {
    const Eigen::MatrixXd& Xe = heldout_empty ? data.X_train : data.X_heldout;
    if (classify) {
      const std::vector<int>& le = heldout_empty ? data.labels_train : data.labels_heldout;
      return accuracy(le, predict_classification(model, ws, Xe).class_index);
    }
    const Eigen::VectorXd& ye = heldout_empty ? data.y_train : data.y_heldout;
    return r_squared(ye, predict_regression(model, ws, Xe).mean);
  };

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    const Eigen::VectorXd* scale_ptr = epoch <= cfg.warmup_epochs ? nullptr : &slow_scale;

    for (Eigen::Index at = 0; at < n; at += cfg.batch_size) {
      const Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, n - at);
      const std::vector<Eigen::Index> idx(order.begin() + at, order.begin() + at + len);
      const Eigen::MatrixXd Xb = select_rows(data.X_train, idx);
      const ModelWorkspace ws = build_workspace(model);
      const double scale = static_cast<double>(n) / static_cast<double>(len);
      ElboGrad g;
      if (classify) {
        const std::vector<int> lb = select_rows(data.labels_train, idx);
        g = detail::batch_grad(model, ws, Xb, nullptr, &lb, scale, cfg.workers);
      } else {
        const Eigen::VectorXd yb = select_rows(data.y_train, idx);
        g = detail::batch_grad(model, ws, Xb, &yb, nullptr, scale, cfg.workers);
      }
      detail::add_hyper_transport(model, white, chol, g);
      detail::whiten_gradient(model, white, chol, g);
      adam_update(omega, pack_grad(model, g), adam, cfg.learning_rate, cfg.beta1, cfg.beta2,
                  cfg.epsilon, scale_ptr);
      detail::clamp_hypers(omega, lay);
      unpack_params(white, omega);
      detail::materialize_from_white(model, white, chol);
    }

    // gently track the drifting projection with fresh normalization statistics
    // (on the optimizer-side state, which every materialization copies from)
    if (white.embedding) {
      white.embedding->update_stats(data.X_train, 0.05);
      model.embedding = white.embedding;
    }

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      const ModelWorkspace ws = build_workspace(model);
      EpochMetrics em;
      em.epoch = epoch;
      em.elbo = classify ? elbo_classification(model, ws, data.X_train, data.labels_train, n)
                         : elbo_regression(model, ws, data.X_train, data.y_train, n);
      em.metric = evaluate_metric(ws);
      em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.history.push_back(em);
      if (em.metric > best_metric) {
        best_metric = em.metric;
        out.model = model;
        out.adam = adam;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one little-endian binary file — magic, format version, a
// structural header, named length-prefixed blocks of doubles, and a trailing
// CRC-32 over everything after the magic. Writes go to a temporary file that
// is renamed into place.
// ---------------------------------------------------------------------------

struct Checkpoint {
  TTGPModel model;
  StandardizeStats stats;  ///< feature/target standardization used in training
  LabelMapping label_map;  ///< classification label values; empty otherwise
  AdamState adam;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are defined little-endian");

constexpr char kCheckpointMagic[8] = {'T', 'T', 'G', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_ieee(const unsigned char* p, std::size_t n,
                                std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (std::size_t i = 0; i < n; ++i) crc = (crc >> 8) ^ table[(crc ^ p[i]) & 0xFFu];
  return ~crc;
}

template <class T>
void put_pod(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_block(std::string& out, const std::string& name, const double* data,
                      std::size_t count) {
  put_pod<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.append(name);
  put_pod<std::uint64_t>(out, count);
  if (count > 0) out.append(reinterpret_cast<const char*>(data), count * sizeof(double));
}

inline void put_block(std::string& out, const std::string& name, const Eigen::MatrixXd& v) {
  put_block(out, name, v.data(), static_cast<std::size_t>(v.size()));
}

inline void put_block(std::string& out, const std::string& name, const Eigen::VectorXd& v) {
  put_block(out, name, v.data(), static_cast<std::size_t>(v.size()));
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  if (!v.empty()) std::memcpy(out.data(), v.data(), v.size() * sizeof(double));
  return out;
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointTruncatedError("checkpoint file is truncated");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const TTGPModel& m = ck.model;
  m.validate();
  const int D = m.grid.dims();
  const int C = m.num_classes();

  std::string out;
  out.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put_pod<std::uint32_t>(out, detail::kCheckpointVersion);
  detail::put_pod<std::uint8_t>(out, m.task == Task::kClassification ? 1 : 0);
  detail::put_pod<std::int32_t>(out, static_cast<std::int32_t>(m.input_dims()));
  detail::put_pod<std::int32_t>(out, C);
  detail::put_pod<std::int32_t>(out, m.embedding ? m.embedding->output_dim() : 0);
  detail::put_pod<std::int32_t>(out, D);
  for (int d = 0; d < D; ++d) {
    detail::put_pod<std::int32_t>(out,
                                  static_cast<std::int32_t>(m.grid.per_dim_points[d].size()));
    detail::put_pod<double>(out, m.grid.spacing[static_cast<std::size_t>(d)]);
  }
  detail::put_pod<std::uint8_t>(out, m.kernel.tied ? 1 : 0);
  for (int c = 0; c < C; ++c) {
    const std::vector<int>& ranks = m.mu[c].ranks();
    detail::put_pod<std::int32_t>(out, static_cast<std::int32_t>(ranks.size()));
    for (int r : ranks) detail::put_pod<std::int32_t>(out, r);
  }

  for (int d = 0; d < D; ++d)
    detail::put_block(out, "grid." + std::to_string(d), m.grid.per_dim_points[d]);
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < D; ++d)
      detail::put_block(out, "mu." + std::to_string(c) + "." + std::to_string(d),
                        m.mu[c].core(d));
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < D; ++d)
      detail::put_block(out, "sig." + std::to_string(c) + "." + std::to_string(d),
                        m.sigma_param[c][d]);
  detail::put_block(out, "kernel.log_lengthscales", m.kernel.log_lengthscales);
  detail::put_block(out, "kernel.log_variance", &m.kernel.log_variance, 1);
  detail::put_block(out, "kernel.log_noise", &m.kernel.log_noise, 1);
  if (m.embedding) {
    detail::put_block(out, "embed.projection", m.embedding->projection);
    detail::put_block(out, "embed.run_mean", m.embedding->run_mean);
    detail::put_block(out, "embed.run_std", m.embedding->run_std);
  }
  detail::put_block(out, "stats.mean", ck.stats.mean);
  detail::put_block(out, "stats.std", ck.stats.std);
  {
    std::vector<double> cc(ck.stats.constant_columns.begin(), ck.stats.constant_columns.end());
    detail::put_block(out, "stats.constant_columns", cc.data(), cc.size());
    const double ys[2] = {ck.stats.y_mean, ck.stats.y_std};
    detail::put_block(out, "stats.y", ys, 2);
    std::vector<double> lv(ck.label_map.values.begin(), ck.label_map.values.end());
    detail::put_block(out, "labels.values", lv.data(), lv.size());
  }
  detail::put_block(out, "adam.first", ck.adam.first);
  detail::put_block(out, "adam.second", ck.adam.second);
  const double step = static_cast<double>(ck.adam.step);
  detail::put_block(out, "adam.step", &step, 1);
  detail::put_pod<std::uint16_t>(out, 0);  // block list terminator

  const std::uint32_t crc = detail::crc32_ieee(
      reinterpret_cast<const unsigned char*>(out.data()) + sizeof(detail::kCheckpointMagic),
      out.size() - sizeof(detail::kCheckpointMagic));
  detail::put_pod<std::uint32_t>(out, crc);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint file: " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("failed writing checkpoint file: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place: " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::string buf;
  {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    buf = ss.str();
  }
  constexpr std::size_t kMagicLen = sizeof(detail::kCheckpointMagic);
  if (buf.size() < kMagicLen ||
      std::memcmp(buf.data(), detail::kCheckpointMagic, kMagicLen) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  if (buf.size() < kMagicLen + sizeof(std::uint32_t) * 2)
    throw CheckpointTruncatedError("checkpoint file is truncated: " + path);

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(std::uint32_t),
              sizeof(std::uint32_t));
  const std::uint32_t crc = detail::crc32_ieee(
      reinterpret_cast<const unsigned char*>(buf.data()) + kMagicLen,
      buf.size() - kMagicLen - sizeof(std::uint32_t));
  if (crc != stored_crc)
    throw CheckpointChecksumError("checkpoint checksum mismatch: " + path);

  detail::ByteReader rd{buf, kMagicLen};
  const std::uint32_t version = rd.get<std::uint32_t>();
  if (version != detail::kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint format version " +
                                 std::to_string(version));

  Checkpoint ck;
  TTGPModel& m = ck.model;
  m.task = rd.get<std::uint8_t>() == 1 ? Task::kClassification : Task::kRegression;
  const std::int32_t raw_dim = rd.get<std::int32_t>();
  const std::int32_t C = rd.get<std::int32_t>();
  const std::int32_t embed_out = rd.get<std::int32_t>();
  const std::int32_t D = rd.get<std::int32_t>();
  if (C < 1 || D < 1 || raw_dim < 1)
    throw CheckpointError("checkpoint header is malformed: " + path);
  std::vector<std::int32_t> mode_sizes(static_cast<std::size_t>(D));
  m.grid.spacing.resize(static_cast<std::size_t>(D));
  for (std::int32_t d = 0; d < D; ++d) {
    mode_sizes[static_cast<std::size_t>(d)] = rd.get<std::int32_t>();
    m.grid.spacing[static_cast<std::size_t>(d)] = rd.get<double>();
  }
  const bool tied = rd.get<std::uint8_t>() == 1;
  std::vector<std::vector<int>> ranks(static_cast<std::size_t>(C));
  for (std::int32_t c = 0; c < C; ++c) {
    const std::int32_t count = rd.get<std::int32_t>();
    if (count != D + 1) throw CheckpointError("checkpoint rank list is malformed: " + path);
    ranks[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(count));
    for (std::int32_t i = 0; i < count; ++i)
      ranks[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] = rd.get<std::int32_t>();
  }

  std::map<std::string, std::vector<double>> blocks;
  for (;;) {
    const std::uint16_t name_len = rd.get<std::uint16_t>();
    if (name_len == 0) break;
    const std::string name = rd.get_string(name_len);
    const std::uint64_t count = rd.get<std::uint64_t>();
    if (count > buf.size() / sizeof(double))
      throw CheckpointTruncatedError("checkpoint file is truncated");
    rd.need(count * sizeof(double));
    std::vector<double> values(static_cast<std::size_t>(count));
    if (count > 0) std::memcpy(values.data(), buf.data() + rd.pos, count * sizeof(double));
    rd.pos += count * sizeof(double);
    if (!blocks.emplace(name, std::move(values)).second)
      throw CheckpointError("duplicate checkpoint block: " + name);
  }

  auto take = [&](const std::string& name) -> std::vector<double> {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw CheckpointError("checkpoint block missing: " + name);
    std::vector<double> v = std::move(it->second);
    blocks.erase(it);
    return v;
  };
  auto take_sized = [&](const std::string& name, std::size_t expect) {
    std::vector<double> v = take(name);
    if (v.size() != expect)
      throw CheckpointError("checkpoint block has the wrong size: " + name);
    return v;
  };

  m.grid.per_dim_points.resize(static_cast<std::size_t>(D));
  for (std::int32_t d = 0; d < D; ++d) {
    const std::vector<double> pts = take_sized(
        "grid." + std::to_string(d), static_cast<std::size_t>(mode_sizes[static_cast<std::size_t>(d)]));
    m.grid.per_dim_points[static_cast<std::size_t>(d)] =
        Eigen::Map<const Eigen::VectorXd>(pts.data(), static_cast<Eigen::Index>(pts.size()));
  }

  std::vector<int> modes(mode_sizes.begin(), mode_sizes.end());
  m.mu.reserve(static_cast<std::size_t>(C));
  m.sigma_param.resize(static_cast<std::size_t>(C));
  for (std::int32_t c = 0; c < C; ++c) {
    TTVector tt(modes, ranks[static_cast<std::size_t>(c)]);
    for (std::int32_t d = 0; d < D; ++d) {
      Eigen::MatrixXd& core = tt.core(d);
      const std::vector<double> v = take_sized("mu." + std::to_string(c) + "." + std::to_string(d),
                                               static_cast<std::size_t>(core.size()));
      core = Eigen::Map<const Eigen::MatrixXd>(v.data(), core.rows(), core.cols());
    }
    m.mu.push_back(std::move(tt));
    m.sigma_param[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(D));
    for (std::int32_t d = 0; d < D; ++d) {
      const std::size_t md = static_cast<std::size_t>(modes[static_cast<std::size_t>(d)]);
      const std::vector<double> v = take_sized(
          "sig." + std::to_string(c) + "." + std::to_string(d), md * md);
      m.sigma_param[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)] =
          Eigen::Map<const Eigen::MatrixXd>(v.data(), static_cast<Eigen::Index>(md),
                                            static_cast<Eigen::Index>(md));
    }
  }

  {
    m.kernel.dims = D;
    m.kernel.tied = tied;
    const std::vector<double> ls = take_sized("kernel.log_lengthscales",
                                              tied ? 1 : static_cast<std::size_t>(D));
    m.kernel.log_lengthscales =
        Eigen::Map<const Eigen::VectorXd>(ls.data(), static_cast<Eigen::Index>(ls.size()));
    m.kernel.log_variance = take_sized("kernel.log_variance", 1)[0];
    m.kernel.log_noise = take_sized("kernel.log_noise", 1)[0];
  }

  if (embed_out > 0) {
    LinearEmbedding emb;
    const std::size_t rows = static_cast<std::size_t>(embed_out);
    const std::size_t cols = static_cast<std::size_t>(raw_dim);
    const std::vector<double> proj = take_sized("embed.projection", rows * cols);
    emb.projection = Eigen::Map<const Eigen::MatrixXd>(
        proj.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const std::vector<double> rm = take_sized("embed.run_mean", rows);
    emb.run_mean = Eigen::Map<const Eigen::VectorXd>(rm.data(), static_cast<Eigen::Index>(rows));
    const std::vector<double> rs = take_sized("embed.run_std", rows);
    emb.run_std = Eigen::Map<const Eigen::VectorXd>(rs.data(), static_cast<Eigen::Index>(rows));
    m.embedding = std::move(emb);
  }

  {
    const std::vector<double> sm = take("stats.mean");
    ck.stats.mean = detail::to_eigen(sm);
    ck.stats.std = detail::to_eigen(take_sized("stats.std", sm.size()));
    const std::vector<double> cc = take("stats.constant_columns");
    ck.stats.constant_columns.assign(cc.size(), 0);
    for (std::size_t i = 0; i < cc.size(); ++i)
      ck.stats.constant_columns[i] = static_cast<int>(cc[i]);
    const std::vector<double> ys = take_sized("stats.y", 2);
    ck.stats.y_mean = ys[0];
    ck.stats.y_std = ys[1];
    ck.label_map.values = take("labels.values");
  }

  {
    const std::vector<double> a1 = take("adam.first");
    ck.adam.first = detail::to_eigen(a1);
    ck.adam.second = detail::to_eigen(take_sized("adam.second", a1.size()));
    ck.adam.step = static_cast<std::int64_t>(take_sized("adam.step", 1)[0]);
  }

  if (!blocks.empty())
    throw CheckpointError("unrecognized checkpoint block: " + blocks.begin()->first);
  m.validate();
  if (m.input_dims() != raw_dim)
    throw CheckpointError("checkpoint feature count is inconsistent: " + path);
  return ck;
}

}  // namespace ttgp
