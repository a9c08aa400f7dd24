#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "ttgp/tt_vector.hpp"

#include "helpers.hpp"

using namespace ttgp;
using namespace ttgp::testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

TTVector ones_tt(const std::vector<int>& modes) {
  std::vector<int> ranks(modes.size() + 1, 1);
  TTVector tt(modes, ranks);
  for (int d = 0; d < tt.order(); ++d) tt.core(d).setOnes();
  return tt;
}

}  // namespace

TEST_CASE("tt_from_dense reproduces a separable tensor at rank 1", "[tt]") {
  std::vector<double> values(4, 1.0);
  TTVector tt = tt_from_dense(values, {2, 2});
  REQUIRE(tt.ranks() == std::vector<int>{1, 1, 1});
  auto back = tt_to_dense(tt);
  for (double v : back) REQUIRE_THAT(v, WithinAbs(1.0, 1e-14));
}

TEST_CASE("tt_from_dense maps the zero tensor to zero cores with unit ranks", "[tt]") {
  std::vector<double> values(9, 0.0);
  TTVector tt = tt_from_dense(values, {3, 3});
  REQUIRE(tt.ranks() == std::vector<int>{1, 1, 1});
  REQUIRE(tt.core(0).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(tt.core(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tt_from_dense is exact at the maximal ranks of a 5x5x5x5 tensor", "[tt]") {
  std::mt19937_64 rng(7);
  const std::vector<int> shape{5, 5, 5, 5};
  auto values = random_dense_tensor(shape, rng);
  TTVector tt = tt_from_dense(values, shape, {5, 25, 5}, 0.0);
  auto back = tt_to_dense(tt);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    num += (values[i] - back[i]) * (values[i] - back[i]);
    den += values[i] * values[i];
  }
  REQUIRE(std::sqrt(num / den) < 1e-10);
}

TEST_CASE("tt_from_dense rejects bad input", "[tt]") {
  REQUIRE_THROWS_AS(tt_from_dense({}, {}), InvalidInputError);
  REQUIRE_THROWS_AS(tt_from_dense({1.0, std::nan("")}, {2}), InvalidInputError);
  REQUIRE_THROWS_AS(tt_from_dense({1.0, 2.0}, {3}), InvalidInputError);
  REQUIRE_THROWS_AS(tt_from_dense({1.0, 2.0, 3.0, 4.0}, {2, 2}, {0}), InvalidInputError);
}

TEST_CASE("tt_to_dense evaluates the defining core product", "[tt]") {
  SECTION("all-ones rank-1 cores give the all-ones tensor") {
    TTVector tt = ones_tt({2, 3});
    auto dense = tt_to_dense(tt);
    REQUIRE(dense.size() == 6);
    for (double v : dense) REQUIRE(v == 1.0);
  }
  SECTION("zero cores give the zero tensor") {
    TTVector tt({3, 2}, {1, 1, 1});
    for (double v : tt_to_dense(tt)) REQUIRE(v == 0.0);
  }
  SECTION("round trip on a random 4x4x4 tensor") {
    std::mt19937_64 rng(11);
    const std::vector<int> shape{4, 4, 4};
    auto values = random_dense_tensor(shape, rng);
    auto back = tt_to_dense(tt_from_dense(values, shape));
    for (std::size_t i = 0; i < values.size(); ++i)
      REQUIRE_THAT(back[i], WithinRel(values[i], 1e-12) || WithinAbs(values[i], 1e-12));
  }
  SECTION("size cap guards against huge materialization") {
    TTVector tt(std::vector<int>(8, 10), std::vector<int>(9, 1));
    REQUIRE_THROWS_AS(tt_to_dense(tt, 1000), ResourceLimitError);
  }
}

TEST_CASE("tt_dot_kron computes Kronecker inner products", "[tt]") {
  SECTION("separable all-ones case factorizes into per-dimension sums") {
    TTVector tt = ones_tt({2, 2});
    Eigen::VectorXd w1(2), w2(2);
    w1 << 1, 2;
    w2 << 3, 4;
    REQUIRE_THAT(tt_dot_kron(tt, {w1, w2}), WithinRel(21.0, 1e-14));
  }
  SECTION("basis vectors select a single entry") {
    std::mt19937_64 rng(3);
    const std::vector<int> shape{3, 4, 2};
    auto values = random_dense_tensor(shape, rng);
    TTVector tt = tt_from_dense(values, shape);
    std::vector<Eigen::VectorXd> w;
    const std::vector<int> pick{2, 1, 0};
    for (int d = 0; d < 3; ++d) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(shape[d]);
      e(pick[d]) = 1.0;
      w.push_back(e);
    }
    const std::size_t flat = (pick[0] * 4 + pick[1]) * 2 + pick[2];
    REQUIRE_THAT(tt_dot_kron(tt, w), WithinRel(values[flat], 1e-12));
  }
  SECTION("zero tensor gives zero for any weights") {
    TTVector tt({2, 2}, {1, 2, 1});
    Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
    REQUIRE(tt_dot_kron(tt, {w, w}) == 0.0);
  }
  SECTION("length mismatch is a shape error") {
    TTVector tt = ones_tt({2, 2});
    Eigen::VectorXd w3 = Eigen::VectorXd::Ones(3);
    Eigen::VectorXd w2 = Eigen::VectorXd::Ones(2);
    REQUIRE_THROWS_AS(tt_dot_kron(tt, {w3, w2}), ShapeError);
  }
  SECTION("windowed weights agree with zero-padded dense weights") {
    std::mt19937_64 rng(17);
    const std::vector<int> shape{6, 5, 7};
    TTVector tt = TTVector::random(shape, 3, 1.0, 41);
    KronWeights win;
    win.push_back({1, random_vector(4, rng)});
    win.push_back({0, random_vector(4, rng)});
    win.push_back({3, random_vector(4, rng)});
    const Eigen::VectorXd dense_w = dense_from_weights(win, shape);
    const Eigen::VectorXd dense_t = dense_from_tt(tt);
    REQUIRE_THAT(tt_dot_kron(tt, win), WithinRel(dense_t.dot(dense_w), 1e-11));
  }
}

TEST_CASE("tt_dot_kron matches the dense inner product on random tensors", "[tt]") {
  std::mt19937_64 rng(23);
  for (const auto& shape : {std::vector<int>{3, 4, 2}, {5, 5}, {2, 3, 2, 3}}) {
    auto values = random_dense_tensor(shape, rng);
    TTVector tt = tt_from_dense(values, shape);
    std::vector<Eigen::VectorXd> w;
    for (int n : shape) w.push_back(random_vector(n, rng));
    const Eigen::VectorXd dense_w = dense_from_weights(as_kron_weights(w), shape);
    double expect = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) expect += values[i] * dense_w(i);
    REQUIRE_THAT(tt_dot_kron(tt, w), WithinRel(expect, 1e-10));
  }
}

TEST_CASE("tt_quad_form_kron evaluates mu'A mu against dense oracles", "[tt]") {
  SECTION("identity factors give the squared norm") {
    TTVector tt = ones_tt({2, 2});
    KroneckerMatrix A({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)});
    REQUIRE_THAT(tt_quad_form_kron(tt, A), WithinRel(4.0, 1e-14));
  }
  SECTION("random tensor vs materialized quadratic form") {
    std::mt19937_64 rng(31);
    const std::vector<int> shape{3, 4, 2};
    auto values = random_dense_tensor(shape, rng);
    TTVector tt = tt_from_dense(values, shape);
    KroneckerMatrix A({random_spd(3, rng), random_spd(4, rng), random_spd(2, rng)});
    const Eigen::MatrixXd dense_A = dense_from_kron(A);
    const Eigen::VectorXd mu = dense_from_tt(tt);
    REQUIRE_THAT(tt_quad_form_kron(tt, A), WithinRel(mu.dot(dense_A * mu), 1e-10));
  }
  SECTION("scaling factors scales the form multilinearly") {
    TTVector tt = ones_tt({2, 2});
    KroneckerMatrix I({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)});
    KroneckerMatrix S({2.0 * Eigen::MatrixXd::Identity(2, 2), 3.0 * Eigen::MatrixXd::Identity(2, 2)});
    REQUIRE_THAT(tt_quad_form_kron(tt, S), WithinRel(6.0 * tt_quad_form_kron(tt, I), 1e-13));
  }
  SECTION("factor shape mismatch is a shape error") {
    TTVector tt = ones_tt({2, 2});
    KroneckerMatrix A({Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(2, 2)});
    REQUIRE_THROWS_AS(tt_quad_form_kron(tt, A), ShapeError);
  }
}

TEST_CASE("tt_dot_kron_grad matches finite differences", "[tt][grad]") {
  SECTION("rank-1 separable case has the closed-form outer structure") {
    TTVector tt = ones_tt({2, 2});
    Eigen::VectorXd w1(2), w2(2);
    w1 << 0.5, 1.5;
    w2 << -1.0, 2.0;
    auto grads = tt_dot_kron_grad(tt, as_kron_weights({w1, w2}));
    // With all-ones cores the right contraction of dimension 2 is sum(w2).
    for (int k = 0; k < 2; ++k)
      REQUIRE_THAT(grads[0](0, k), WithinRel(w1[k] * w2.sum(), 1e-13));
  }
  SECTION("zero weights give zero gradients") {
    TTVector tt = TTVector::random({3, 3}, 2, 1.0, 5);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
    auto grads = tt_dot_kron_grad(tt, as_kron_weights({z, z}));
    for (const auto& g : grads) REQUIRE(g.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("random instances, every core coordinate") {
    std::mt19937_64 rng(47);
    TTVector tt = TTVector::random({3, 3, 3}, 2, 1.0, 13);
    std::vector<Eigen::VectorXd> w;
    for (int d = 0; d < 3; ++d) w.push_back(random_vector(3, rng));
    auto kw = as_kron_weights(w);
    auto grads = tt_dot_kron_grad(tt, kw);
    for (int d = 0; d < 3; ++d) {
      for (Eigen::Index j = 0; j < tt.core(d).size(); ++j) {
        TTVector probe = tt;
        auto f = [&](double v) {
          probe.core(d).data()[j] = v;
          return tt_dot_kron(probe, kw);
        };
        const double x0 = tt.core(d).data()[j];
        const double fd = central_diff(f, x0, 1e-6);
        REQUIRE_THAT(grads[d].data()[j], WithinRel(fd, 1e-5) || WithinAbs(fd, 1e-9));
      }
    }
  }
}

TEST_CASE("tt_quad_form_kron_grad matches finite differences", "[tt][grad]") {
  SECTION("quadratic homogeneity under core scaling") {
    TTVector tt = ones_tt({2, 2});
    KroneckerMatrix I({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)});
    auto g1 = tt_quad_form_kron_grad(tt, I);
    TTVector scaled = tt;
    scaled.core(0) *= 2.0;
    auto g2 = tt_quad_form_kron_grad(scaled, I);
    // Doubling core 0 doubles the gradient with respect to that same core.
    REQUIRE_THAT(g2[0](0, 0), WithinRel(2.0 * g1[0](0, 0), 1e-13));
  }
  SECTION("zero tensor has zero gradients") {
    TTVector tt({3, 2}, {1, 2, 1});
    KroneckerMatrix A({Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(2, 2)});
    for (const auto& g : tt_quad_form_kron_grad(tt, A))
      REQUIRE(g.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("random SPD factors, every core coordinate") {
    std::mt19937_64 rng(53);
    TTVector tt = TTVector::random({3, 4}, 2, 1.0, 29);
    KroneckerMatrix A({random_spd(3, rng), random_spd(4, rng)});
    auto grads = tt_quad_form_kron_grad(tt, A);
    for (int d = 0; d < 2; ++d) {
      for (Eigen::Index j = 0; j < tt.core(d).size(); ++j) {
        TTVector probe = tt;
        auto f = [&](double v) {
          probe.core(d).data()[j] = v;
          return tt_quad_form_kron(probe, A);
        };
        const double fd = central_diff(f, tt.core(d).data()[j], 1e-6);
        REQUIRE_THAT(grads[d].data()[j], WithinRel(fd, 1e-5) || WithinAbs(fd, 1e-9));
      }
    }
  }
}

TEST_CASE("tt_quad_form_factor_grad matches finite differences in A", "[tt][grad]") {
  std::mt19937_64 rng(59);
  TTVector tt = TTVector::random({3, 3}, 2, 1.0, 61);
  KroneckerMatrix A({random_spd(3, rng), random_spd(3, rng)});
  auto grads = tt_quad_form_factor_grad(tt, A);
  for (int d = 0; d < 2; ++d) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        KroneckerMatrix probe = A;
        auto f = [&](double v) {
          probe.factor(d)(a, b) = v;
          return tt_quad_form_kron(tt, probe);
        };
        const double fd = central_diff(f, A.factor(d)(a, b), 1e-6);
        REQUIRE_THAT(grads[d](a, b), WithinRel(fd, 1e-5) || WithinAbs(fd, 1e-9));
      }
    }
  }
}

TEST_CASE("TT-SVD approximation error is non-increasing in the rank bound", "[tt][property]") {
  std::mt19937_64 rng(71);
  const std::vector<int> shape{4, 4, 4};
  auto values = random_dense_tensor(shape, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int r = 1; r <= 6; ++r) {
    TTVector tt = tt_from_dense(values, shape, {r, r});
    auto back = tt_to_dense(tt);
    double err = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      err += (values[i] - back[i]) * (values[i] - back[i]);
    REQUIRE(err <= prev + 1e-12);
    prev = err;
  }
}

TEST_CASE("tt_from_dense honors the relative truncation tolerance", "[tt][property]") {
  std::mt19937_64 rng(73);
  const std::vector<int> shape{5, 5, 5};
  auto values = random_dense_tensor(shape, rng);
  double norm = 0.0;
  for (double v : values) norm += v * v;
  norm = std::sqrt(norm);
  for (double tol : {0.5, 0.2, 0.05}) {
    TTVector tt = tt_from_dense(values, shape, {}, tol);
    auto back = tt_to_dense(tt);
    double err = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      err += (values[i] - back[i]) * (values[i] - back[i]);
    REQUIRE(std::sqrt(err) <= tol * norm * (1.0 + 1e-10));
  }
}

TEST_CASE("tt_dot_kron cost grows linearly in dimension count", "[tt][timing]") {
  const int n = 20, r = 16, reps = 400;
  auto time_dots = [&](int D) {
    TTVector tt = TTVector::random(std::vector<int>(D, n), r, 0.3, 97);
    std::mt19937_64 rng(101);
    std::vector<Eigen::VectorXd> w;
    for (int d = 0; d < D; ++d) w.push_back(random_vector(n, rng));
    auto kw = as_kron_weights(w);
    double best = std::numeric_limits<double>::infinity();
    volatile double sink = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < reps; ++i) sink = sink + tt_dot_kron(tt, kw);
      auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
  };
  const double t4 = time_dots(4);
  const double t8 = time_dots(8);
  REQUIRE(t8 / t4 < 3.0);
}
