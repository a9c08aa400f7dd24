#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/errors.hpp"
#include "ttgp/weights.hpp"

namespace ttgp {

/// Cubic convolution interpolation kernel (the a = −1/2 member of the Keys
/// family): 1 at s = 0, 0 at every other integer, supported on |s| ≤ 2.
inline double keys_kernel(double s) {
  const double t = std::abs(s);
  if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
  if (t <= 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
  return 0.0;
}

/// Derivative of keys_kernel with respect to s.
inline double keys_kernel_deriv(double s) {
  const double t = std::abs(s);
  double d;
  if (t <= 1.0)
    d = (4.5 * t - 5.0) * t;
  else if (t <= 2.0)
    d = (-1.5 * t + 5.0) * t - 4.0;
  else
    return 0.0;
  return s < 0.0 ? -d : d;
}

/// Uniform per-dimension grids of inducing-point coordinates.
struct Grid {
  std::vector<Eigen::VectorXd> per_dim_points;
  std::vector<double> spacing;

  int dims() const { return static_cast<int>(per_dim_points.size()); }
  std::vector<int> mode_sizes() const {
    std::vector<int> out(per_dim_points.size());
    for (std::size_t d = 0; d < per_dim_points.size(); ++d)
      out[d] = static_cast<int>(per_dim_points[d].size());
    return out;
  }

  void validate() const {
    if (per_dim_points.empty()) throw InvalidInputError("grid has no dimensions");
    if (spacing.size() != per_dim_points.size())
      throw ShapeError("grid spacing list does not match dimension count");
    for (std::size_t d = 0; d < per_dim_points.size(); ++d) {
      const auto& g = per_dim_points[d];
      if (g.size() < 4)
        throw InvalidInputError("grid dimension " + std::to_string(d) +
                                " needs at least 4 points for cubic stencils");
      const double h = spacing[d];
      if (!(h > 0.0)) throw InvalidInputError("grid spacing must be positive");
      for (Eigen::Index i = 0; i + 1 < g.size(); ++i) {
        const double step = g[i + 1] - g[i];
        if (std::abs(step - h) > 1e-12 * std::max(1.0, std::abs(h)))
          throw InvalidInputError("grid dimension " + std::to_string(d) + " is not uniform");
      }
    }
  }
};

/// Uniform grid covering [lo − h, hi + h] per dimension with m0 points, where
/// h = (hi − lo)/(m0 − 3) is the resulting spacing. The one-cell margin on
/// each side guarantees every point of [lo, hi] has a full interior 4-point
/// stencil.
inline Grid grid_build(const std::vector<std::pair<double, double>>& data_ranges, int m0) {
  if (m0 < 4) throw InvalidInputError("grid_build: need at least 4 points per dimension");
  if (data_ranges.empty()) throw InvalidInputError("grid_build: no dimensions given");
  Grid grid;
  for (std::size_t d = 0; d < data_ranges.size(); ++d) {
    const auto [lo, hi] = data_ranges[d];
    if (!(lo < hi))
      throw InvalidInputError("grid_build: dimension " + std::to_string(d) +
                              " has an empty range [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
    const double h = (hi - lo) / static_cast<double>(m0 - 3);
    Eigen::VectorXd pts(m0);
    for (int k = 0; k < m0; ++k) pts[k] = (lo - h) + k * h;
    grid.per_dim_points.push_back(std::move(pts));
    grid.spacing.push_back(h);
  }
  grid.validate();
  return grid;
}

/// A single dimension's interpolation stencil: 4 weights over grid nodes
/// [start, start+3]. `clamped` reports that x was outside the grid's valid
/// interior and was moved to the nearest usable coordinate.
struct Stencil1D {
  int start = 0;
  Eigen::Vector4d w = Eigen::Vector4d::Zero();
  Eigen::Vector4d dw_dx = Eigen::Vector4d::Zero();
  bool clamped = false;
};

/// Cubic interpolation weights of x on a uniform grid vector. The valid
/// interior is [g_1, g_{m−2}] (one cell inside each boundary); x outside it is
/// clamped. At interior nodes the weights are exactly one-hot. dw_dx holds the
/// derivative of each weight with respect to x (zero where clamping is in
/// effect, matching the flat clamp).
inline Stencil1D weights_1d(const Eigen::VectorXd& grid_dim, double x) {
  const int m = static_cast<int>(grid_dim.size());
  if (m < 4) throw InvalidInputError("weights_1d: grid needs at least 4 points");
  const double h = grid_dim[1] - grid_dim[0];

  Stencil1D out;
  const double lo = grid_dim[1], hi = grid_dim[m - 2];
  double xc = x;
  if (xc < lo) {
    xc = lo;
    out.clamped = true;
  } else if (xc > hi) {
    xc = hi;
    out.clamped = true;
  }

  double t = (xc - grid_dim[0]) / h;
  int cell = static_cast<int>(std::floor(t));
  if (cell < 1) cell = 1;
  if (cell > m - 3) cell = m - 3;
  const double s = t - cell;

  out.start = cell - 1;
  out.w[0] = keys_kernel(s + 1.0);
  out.w[1] = keys_kernel(s);
  out.w[2] = keys_kernel(1.0 - s);
  out.w[3] = keys_kernel(2.0 - s);
  if (!out.clamped) {
    out.dw_dx[0] = keys_kernel_deriv(s + 1.0) / h;
    out.dw_dx[1] = keys_kernel_deriv(s) / h;
    out.dw_dx[2] = -keys_kernel_deriv(1.0 - s) / h;
    out.dw_dx[3] = -keys_kernel_deriv(2.0 - s) / h;
  }
  return out;
}

/// Per-dimension interpolation weights for a full D-dimensional point;
/// together the windows stand for the rank-1 Kronecker vector
/// w = w¹ ⊗ … ⊗ w^D with 4 nonzeros per factor.
struct InterpWeights {
  KronWeights factors;
  std::vector<Eigen::Vector4d> dfactors_dx;  ///< dw^d/dx_d, zero when clamped
  bool clamped = false;
};

inline InterpWeights weights_nd(const Grid& grid, const Eigen::VectorXd& x) {
  if (x.size() != grid.dims())
    throw ShapeError("weights_nd: point has " + std::to_string(x.size()) +
                     " coordinates, grid has " + std::to_string(grid.dims()));
  for (Eigen::Index d = 0; d < x.size(); ++d)
    if (!std::isfinite(x[d])) throw InvalidInputError("weights_nd: non-finite coordinate");
  InterpWeights out;
  out.factors.reserve(grid.dims());
  out.dfactors_dx.reserve(grid.dims());
  for (int d = 0; d < grid.dims(); ++d) {
    Stencil1D st = weights_1d(grid.per_dim_points[d], x[d]);
    out.factors.push_back({st.start, st.w});
    out.dfactors_dx.push_back(st.dw_dx);
    out.clamped = out.clamped || st.clamped;
  }
  return out;
}

}  // namespace ttgp
