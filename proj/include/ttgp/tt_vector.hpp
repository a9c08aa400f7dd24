#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "ttgp/errors.hpp"
#include "ttgp/kronecker.hpp"
#include "ttgp/weights.hpp"

namespace ttgp {

/// A D-dimensional tensor in tensor-train form: a chain of cores G_1 … G_D
/// where core d has shape (r_{d-1}, n_d, r_d) and the represented dense entry
/// at (i_1, …, i_D) is the ordered matrix product G_1[i_1] · … · G_D[i_D].
/// Boundary ranks are fixed: r_0 = r_D = 1.
///
/// Core storage layout: core d is kept as one r_{d-1} × (n_d · r_d) matrix;
/// the mode-index slice G_d[k] occupies columns [k·r_d, (k+1)·r_d). This keeps
/// each core contiguous and makes slices cheap column blocks.
class TTVector {
public:
  TTVector() = default;

  /// Zero-initialized cores with the given mode sizes and internal ranks.
  /// `ranks` has D+1 entries with ranks.front() == ranks.back() == 1.
  TTVector(std::vector<int> mode_sizes, std::vector<int> ranks)
      : mode_sizes_(std::move(mode_sizes)), ranks_(std::move(ranks)) {
    validate_shape();
    cores_.resize(mode_sizes_.size());
    for (std::size_t d = 0; d < mode_sizes_.size(); ++d)
      cores_[d] = Eigen::MatrixXd::Zero(ranks_[d],
                                        static_cast<Eigen::Index>(mode_sizes_[d]) * ranks_[d + 1]);
  }

  /// Cores filled with independent N(0, stddev²) entries; ranks are the
  /// requested uniform rank capped by what the mode sizes admit.
  static TTVector random(const std::vector<int>& mode_sizes, int max_rank, double stddev,
                         std::uint64_t seed) {
    TTVector tt(mode_sizes, capped_ranks(mode_sizes, max_rank));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, stddev);
    for (auto& core : tt.cores_)
      for (Eigen::Index j = 0; j < core.cols(); ++j)
        for (Eigen::Index i = 0; i < core.rows(); ++i) core(i, j) = gauss(rng);
    return tt;
  }

  /// Largest admissible uniform TT-ranks: r_d ≤ min(max_rank, Π_{e≤d} n_e, Π_{e>d} n_e).
  static std::vector<int> capped_ranks(const std::vector<int>& mode_sizes, int max_rank) {
    const int D = static_cast<int>(mode_sizes.size());
    if (max_rank < 1) throw InvalidInputError("TT rank must be at least 1");
    std::vector<int> ranks(D + 1, 1);
    for (int d = 1; d < D; ++d) {
      double left = 1.0, right = 1.0;
      for (int e = 0; e < d; ++e) left = std::min(left * mode_sizes[e], 1e9);
      for (int e = d; e < D; ++e) right = std::min(right * mode_sizes[e], 1e9);
      ranks[d] = static_cast<int>(std::min({static_cast<double>(max_rank), left, right}));
    }
    return ranks;
  }

  int order() const { return static_cast<int>(mode_sizes_.size()); }
  const std::vector<int>& mode_sizes() const { return mode_sizes_; }
  const std::vector<int>& ranks() const { return ranks_; }

  const Eigen::MatrixXd& core(int d) const { return cores_[d]; }
  Eigen::MatrixXd& core(int d) { return cores_[d]; }

  /// The slice G_d[k]: an r_{d-1} × r_d view into core d.
  auto core_slice(int d, int k) const { return cores_[d].middleCols(static_cast<Eigen::Index>(k) * ranks_[d + 1], ranks_[d + 1]); }
  auto core_slice(int d, int k) { return cores_[d].middleCols(static_cast<Eigen::Index>(k) * ranks_[d + 1], ranks_[d + 1]); }

  /// Number of entries of the represented dense tensor (as double: may be huge).
  double dense_size() const {
    double s = 1.0;
    for (int n : mode_sizes_) s *= n;
    return s;
  }

  /// Replace a core, re-deriving the stored ranks from the new shapes.
  void set_core(int d, Eigen::MatrixXd core, int right_rank) {
    const Eigen::Index expect_cols = static_cast<Eigen::Index>(mode_sizes_[d]) * right_rank;
    if (core.cols() != expect_cols)
      throw ShapeError("set_core: core " + std::to_string(d) + " has " +
                       std::to_string(core.cols()) + " columns, expected " +
                       std::to_string(expect_cols));
    cores_[d] = std::move(core);
    ranks_[d] = static_cast<int>(cores_[d].rows());
    ranks_[d + 1] = right_rank;
  }

private:
  void validate_shape() const {
    if (mode_sizes_.empty()) throw InvalidInputError("TT tensor needs at least one dimension");
    for (int n : mode_sizes_)
      if (n < 1) throw InvalidInputError("TT mode sizes must be positive");
    if (ranks_.size() != mode_sizes_.size() + 1)
      throw ShapeError("TT rank list must have one more entry than the mode list");
    if (ranks_.front() != 1 || ranks_.back() != 1)
      throw InvalidInputError("TT boundary ranks must be 1");
    for (int r : ranks_)
      if (r < 1) throw InvalidInputError("TT ranks must be positive");
  }

  std::vector<int> mode_sizes_;
  std::vector<int> ranks_;
  std::vector<Eigen::MatrixXd> cores_;
};

namespace detail {
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}

/// Build a TTVector from a dense tensor given as a flat row-major array
/// (`values[i_1·n_2·…·n_D + … + i_D]`, last index fastest) by successive
/// thin SVDs of the unfoldings.
///
/// Truncation keeps, per unfolding, the smallest rank whose discarded singular
/// values satisfy Σ σ_j² ≤ δ² with δ = tol·‖T‖_F/√(D−1), which bounds the
/// overall relative reconstruction error by tol. `max_ranks` (D−1 entries, or
/// empty for unbounded) additionally caps each internal rank. Exact zero
/// singular values are always dropped, so e.g. a rank-1 tensor yields unit
/// ranks even with tol = 0.
inline TTVector tt_from_dense(const std::vector<double>& values, const std::vector<int>& shape,
                              const std::vector<int>& max_ranks = {}, double tol = 0.0) {
  const int D = static_cast<int>(shape.size());
  if (D == 0) throw InvalidInputError("tt_from_dense: empty shape");
  std::size_t total = 1;
  for (int n : shape) {
    if (n < 1) throw InvalidInputError("tt_from_dense: mode sizes must be positive");
    total *= static_cast<std::size_t>(n);
  }
  if (total == 0 || values.size() != total)
    throw InvalidInputError("tt_from_dense: value count does not match shape");
  if (!max_ranks.empty() && static_cast<int>(max_ranks.size()) != D - 1)
    throw InvalidInputError("tt_from_dense: max_ranks needs D-1 entries");
  for (int r : max_ranks)
    if (r < 1) throw InvalidInputError("tt_from_dense: rank bounds must be positive");
  if (tol < 0) throw InvalidInputError("tt_from_dense: negative tolerance");
  double sq = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidInputError("tt_from_dense: non-finite entry");
    sq += v * v;
  }
  const double delta = (D > 1 && tol > 0.0) ? tol * std::sqrt(sq) / std::sqrt(double(D - 1)) : 0.0;

  std::vector<int> ranks(D + 1, 1);
  TTVector tt(shape, ranks);
  if (sq == 0.0) return tt;  // the zero tensor: all-zero cores, unit ranks

  std::vector<double> cur(values);
  int r_prev = 1;
  std::size_t remaining = total;
  for (int d = 0; d + 1 < D; ++d) {
    const int n_d = shape[d];
    const Eigen::Index rows = static_cast<Eigen::Index>(r_prev) * n_d;
    remaining /= static_cast<std::size_t>(n_d);
    const Eigen::Index cols = static_cast<Eigen::Index>(remaining);

    Eigen::Map<detail::RowMajorMatrix> M(cur.data(), rows, cols);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();

    int r = static_cast<int>(sv.size());
    double tail = 0.0;
    while (r > 1 && tail + sv[r - 1] * sv[r - 1] <= delta * delta) {
      tail += sv[r - 1] * sv[r - 1];
      --r;
    }
    if (!max_ranks.empty()) r = std::min(r, max_ranks[d]);

    // Core d: reshape U's rows (α·n_d + k) into slices G_d[k](α, β) = U(α·n_d + k, β).
    Eigen::MatrixXd core(r_prev, static_cast<Eigen::Index>(n_d) * r);
    for (int a = 0; a < r_prev; ++a)
      for (int k = 0; k < n_d; ++k)
        core.block(a, static_cast<Eigen::Index>(k) * r, 1, r) =
            svd.matrixU().row(static_cast<Eigen::Index>(a) * n_d + k).head(r);
    tt.set_core(d, std::move(core), r);

    detail::RowMajorMatrix next =
        sv.head(r).asDiagonal() * svd.matrixV().leftCols(r).transpose();
    cur.assign(next.data(), next.data() + static_cast<std::size_t>(r) * remaining);
    r_prev = r;
  }

  // Last core: the remaining r_prev × n_D matrix with right rank 1.
  Eigen::MatrixXd last(r_prev, shape[D - 1]);
  for (int a = 0; a < r_prev; ++a)
    for (int k = 0; k < shape[D - 1]; ++k)
      last(a, k) = cur[static_cast<std::size_t>(a) * shape[D - 1] + k];
  tt.set_core(D - 1, std::move(last), 1);
  return tt;
}

/// Materialize the dense tensor as a flat row-major array (last index fastest).
/// Guarded by an entry-count cap against accidental exponential blowup.
inline std::vector<double> tt_to_dense(const TTVector& tt, std::size_t size_cap = (1u << 22)) {
  if (tt.dense_size() > static_cast<double>(size_cap))
    throw ResourceLimitError("tt_to_dense: tensor has " + std::to_string(tt.dense_size()) +
                             " entries, cap is " + std::to_string(size_cap));
  const int D = tt.order();
  // B holds partial products over leading modes: rows indexed by (i_1 … i_d)
  // row-major, columns by the current right rank.
  Eigen::MatrixXd B = Eigen::MatrixXd::Ones(1, 1);
  for (int d = 0; d < D; ++d) {
    const int n = tt.mode_sizes()[d];
    const int r_next = tt.ranks()[d + 1];
    Eigen::MatrixXd next(B.rows() * n, r_next);
    for (int k = 0; k < n; ++k) {
      Eigen::MatrixXd S = B * tt.core_slice(d, k);
      for (Eigen::Index i = 0; i < B.rows(); ++i) next.row(i * n + k) = S.row(i);
    }
    B = std::move(next);
  }
  return std::vector<double>(B.data(), B.data() + B.rows());
}

/// Forward/backward sweep state for the inner product of a TT tensor with a
/// rank-1 Kronecker vector. Shared between the value and its core gradients
/// so one forward pass serves both.
struct TTDotSweep {
  std::vector<Eigen::MatrixXd> mode_contracted;  ///< W_d = Σ_k w_k G_d[k], r_{d-1} × r_d
  std::vector<Eigen::RowVectorXd> left;          ///< left[d] = W_1 · … · W_d (left[0] = [1])
  std::vector<Eigen::VectorXd> right;            ///< right[d] = W_{d+1} · … · W_D (right[D] = [1])
  double value = 0.0;
};

namespace detail {
inline Eigen::MatrixXd contract_mode(const TTVector& tt, int d, const WeightWindow& win) {
  const int r_prev = tt.ranks()[d];
  const int r_next = tt.ranks()[d + 1];
  check_window(win, tt.mode_sizes()[d], d);
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(r_prev, r_next);
  for (int j = 0; j < win.w.size(); ++j) W.noalias() += win.w[j] * tt.core_slice(d, win.start + j);
  return W;
}
}  // namespace detail

/// Inner product ⟨tt, w_1 ⊗ … ⊗ w_D⟩ with full sweep state.
inline TTDotSweep tt_dot_kron_cached(const TTVector& tt, const KronWeights& w) {
  const int D = tt.order();
  if (static_cast<int>(w.size()) != D)
    throw ShapeError("tt_dot_kron: weight count does not match tensor order");
  TTDotSweep s;
  s.mode_contracted.reserve(D);
  for (int d = 0; d < D; ++d) s.mode_contracted.push_back(detail::contract_mode(tt, d, w[d]));
  s.left.resize(D + 1);
  s.left[0] = Eigen::RowVectorXd::Ones(1);
  for (int d = 0; d < D; ++d) s.left[d + 1] = s.left[d] * s.mode_contracted[d];
  s.right.resize(D + 1);
  s.right[D] = Eigen::VectorXd::Ones(1);
  for (int d = D - 1; d >= 0; --d) s.right[d] = s.mode_contracted[d] * s.right[d + 1];
  s.value = s.left[D](0);
  return s;
}

/// Inner product of the represented dense tensor with the Kronecker product
/// of per-dimension vectors, in O(Σ_d |w_d|·r² + D·r²) without materializing
/// either side.
inline double tt_dot_kron(const TTVector& tt, const KronWeights& w) {
  const int D = tt.order();
  if (static_cast<int>(w.size()) != D)
    throw ShapeError("tt_dot_kron: weight count does not match tensor order");
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Ones(1);
  for (int d = 0; d < D; ++d) acc = acc * detail::contract_mode(tt, d, w[d]);
  return acc(0);
}

inline double tt_dot_kron(const TTVector& tt, const std::vector<Eigen::VectorXd>& w) {
  return tt_dot_kron(tt, as_kron_weights(w));
}

/// Gradient of tt_dot_kron with respect to every core, from a prior sweep:
/// ∂/∂G_d[k](α,β) = w_d[k] · left[d](α) · right[d+1](β). The returned array
/// for dimension d matches tt.core(d)'s storage layout.
inline std::vector<Eigen::MatrixXd> tt_dot_kron_grad(const TTVector& tt, const KronWeights& w,
                                                     const TTDotSweep& sweep) {
  const int D = tt.order();
  std::vector<Eigen::MatrixXd> grads(D);
  for (int d = 0; d < D; ++d) {
    const int r_next = tt.ranks()[d + 1];
    grads[d] = Eigen::MatrixXd::Zero(tt.core(d).rows(), tt.core(d).cols());
    const Eigen::MatrixXd outer = sweep.left[d].transpose() * sweep.right[d + 1].transpose();
    for (int j = 0; j < w[d].w.size(); ++j)
      grads[d].middleCols(static_cast<Eigen::Index>(w[d].start + j) * r_next, r_next) =
          w[d].w[j] * outer;
  }
  return grads;
}

inline std::vector<Eigen::MatrixXd> tt_dot_kron_grad(const TTVector& tt, const KronWeights& w) {
  return tt_dot_kron_grad(tt, w, tt_dot_kron_cached(tt, w));
}

inline std::vector<Eigen::MatrixXd> tt_dot_kron_grad(const TTVector& tt,
                                                     const std::vector<Eigen::VectorXd>& w) {
  return tt_dot_kron_grad(tt, as_kron_weights(w));
}

/// Sweep state for the quadratic form μᵀAμ of a TT tensor with a Kronecker
/// matrix: symmetric transfer matrices accumulated from the left and right.
struct TTQuadFormSweep {
  std::vector<Eigen::MatrixXd> left;   ///< left[d]: r_d × r_d, dims 1..d absorbed (left[0] = [[1]])
  std::vector<Eigen::MatrixXd> right;  ///< right[d]: r_d × r_d, dims d+1..D absorbed (right[D] = [[1]])
  double value = 0.0;
};

namespace detail {
/// H_a = Σ_b A(a,b) · G_d[b] for every mode index a of dimension d.
inline std::vector<Eigen::MatrixXd> mixed_slices(const TTVector& tt, int d,
                                                 const Eigen::MatrixXd& A) {
  const int n = tt.mode_sizes()[d];
  const int r_prev = tt.ranks()[d];
  const int r_next = tt.ranks()[d + 1];
  std::vector<Eigen::MatrixXd> H(n, Eigen::MatrixXd::Zero(r_prev, r_next));
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (A(a, b) != 0.0) H[a].noalias() += A(a, b) * tt.core_slice(d, b);
  return H;
}

inline void check_quad_shapes(const TTVector& tt, const KroneckerMatrix& A) {
  if (A.order() != tt.order())
    throw ShapeError("tt_quad_form_kron: factor count does not match tensor order");
  for (int d = 0; d < tt.order(); ++d)
    if (A.factor(d).rows() != tt.mode_sizes()[d])
      throw ShapeError("tt_quad_form_kron: factor " + std::to_string(d) +
                       " side does not match mode size");
}
}  // namespace detail

/// Quadratic form μᵀAμ with both sweep directions cached, in
/// O(D·(n²r² + n·r³)) time. left/right transfer matrices are symmetric.
inline TTQuadFormSweep tt_quad_form_kron_cached(const TTVector& tt, const KroneckerMatrix& A) {
  detail::check_quad_shapes(tt, A);
  const int D = tt.order();
  TTQuadFormSweep s;
  s.left.resize(D + 1);
  s.right.resize(D + 1);
  s.left[0] = Eigen::MatrixXd::Ones(1, 1);
  for (int d = 0; d < D; ++d) {
    const auto H = detail::mixed_slices(tt, d, A.factor(d));
    const int n = tt.mode_sizes()[d];
    const int r_next = tt.ranks()[d + 1];
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(r_next, r_next);
    for (int a = 0; a < n; ++a)
      next.noalias() += tt.core_slice(d, a).transpose() * (s.left[d] * H[a]);
    s.left[d + 1] = std::move(next);
  }
  s.right[D] = Eigen::MatrixXd::Ones(1, 1);
  for (int d = D - 1; d >= 0; --d) {
    const auto H = detail::mixed_slices(tt, d, A.factor(d));
    const int n = tt.mode_sizes()[d];
    const int r_prev = tt.ranks()[d];
    Eigen::MatrixXd prev = Eigen::MatrixXd::Zero(r_prev, r_prev);
    for (int a = 0; a < n; ++a)
      prev.noalias() += tt.core_slice(d, a) * (s.right[d + 1] * H[a].transpose());
    s.right[d] = std::move(prev);
  }
  s.value = s.left[D](0, 0);
  return s;
}

/// μᵀAμ for the dense vector represented by tt, never materializing μ or A.
inline double tt_quad_form_kron(const TTVector& tt, const KroneckerMatrix& A) {
  detail::check_quad_shapes(tt, A);
  const int D = tt.order();
  Eigen::MatrixXd P = Eigen::MatrixXd::Ones(1, 1);
  for (int d = 0; d < D; ++d) {
    const auto H = detail::mixed_slices(tt, d, A.factor(d));
    const int n = tt.mode_sizes()[d];
    const int r_next = tt.ranks()[d + 1];
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(r_next, r_next);
    for (int a = 0; a < n; ++a) next.noalias() += tt.core_slice(d, a).transpose() * (P * H[a]);
    P = std::move(next);
  }
  return P(0, 0);
}

/// Gradient of μᵀAμ with respect to every core (A constant, symmetric):
/// ∂/∂G_d[a] = 2 · left[d] · H_a · right[d+1] with H_a = Σ_b A(a,b) G_d[b].
inline std::vector<Eigen::MatrixXd> tt_quad_form_kron_grad(const TTVector& tt,
                                                           const KroneckerMatrix& A,
                                                           const TTQuadFormSweep& sweep) {
  const int D = tt.order();
  std::vector<Eigen::MatrixXd> grads(D);
  for (int d = 0; d < D; ++d) {
    const auto H = detail::mixed_slices(tt, d, A.factor(d));
    const int n = tt.mode_sizes()[d];
    const int r_next = tt.ranks()[d + 1];
    grads[d].resize(tt.core(d).rows(), tt.core(d).cols());
    for (int a = 0; a < n; ++a)
      grads[d].middleCols(static_cast<Eigen::Index>(a) * r_next, r_next).noalias() =
          2.0 * (sweep.left[d] * H[a] * sweep.right[d + 1]);
  }
  return grads;
}

inline std::vector<Eigen::MatrixXd> tt_quad_form_kron_grad(const TTVector& tt,
                                                           const KroneckerMatrix& A) {
  return tt_quad_form_kron_grad(tt, A, tt_quad_form_kron_cached(tt, A));
}

/// Gradient of μᵀAμ with respect to the entries of each Kronecker factor
/// (entries treated as independent): M_d(a,b) = ⟨G_d[a], left[d]·G_d[b]·right[d+1]⟩_F,
/// so that d(μᵀAμ) = Σ_d Σ_{a,b} M_d(a,b) · dA_d(a,b).
inline std::vector<Eigen::MatrixXd> tt_quad_form_factor_grad(const TTVector& tt,
                                                             const KroneckerMatrix& A,
                                                             const TTQuadFormSweep& sweep) {
  const int D = tt.order();
  std::vector<Eigen::MatrixXd> grads(D);
  for (int d = 0; d < D; ++d) {
    const int n = tt.mode_sizes()[d];
    grads[d].resize(n, n);
    std::vector<Eigen::MatrixXd> Z(n);
    for (int b = 0; b < n; ++b) Z[b] = sweep.left[d] * tt.core_slice(d, b) * sweep.right[d + 1];
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        grads[d](a, b) = (tt.core_slice(d, a).array() * Z[b].array()).sum();
  }
  return grads;
}

inline std::vector<Eigen::MatrixXd> tt_quad_form_factor_grad(const TTVector& tt,
                                                             const KroneckerMatrix& A) {
  return tt_quad_form_factor_grad(tt, A, tt_quad_form_kron_cached(tt, A));
}

}  // namespace ttgp
