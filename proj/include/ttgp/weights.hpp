#pragma once

#include <vector>

#include <Eigen/Dense>

#include "ttgp/errors.hpp"

namespace ttgp {

/// Weights over a contiguous index window [start, start + w.size()) of one
/// dimension. Entries outside the window are implicitly zero, which lets
/// contraction code skip them. A dense per-dimension vector is the special
/// case start = 0, w.size() = mode size.
struct WeightWindow {
  int start = 0;
  Eigen::VectorXd w;
};

/// One WeightWindow per dimension; together they stand for the Kronecker
/// product w_1 ⊗ w_2 ⊗ … ⊗ w_D without ever forming it.
using KronWeights = std::vector<WeightWindow>;

/// Wrap dense per-dimension vectors as full-width windows.
inline KronWeights as_kron_weights(const std::vector<Eigen::VectorXd>& vs) {
  KronWeights out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back({0, v});
  return out;
}

inline void check_window(const WeightWindow& win, int mode_size, int dim) {
  if (win.start < 0 || win.start + win.w.size() > mode_size)
    throw ShapeError("weight window for dimension " + std::to_string(dim) +
                     " exceeds mode size " + std::to_string(mode_size));
}

}  // namespace ttgp
