#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ttgp/kronecker.hpp"

#include "helpers.hpp"

using namespace ttgp;
using namespace ttgp::testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("chol_factorwise decomposes factor by factor", "[kron]") {
  SECTION("identity factors give identity lower factors") {
    KroneckerMatrix A({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(3, 3)});
    KroneckerChol chol = chol_factorwise(A);
    REQUIRE(chol.lower(0).isApprox(Eigen::MatrixXd::Identity(2, 2)));
    REQUIRE(chol.lower(1).isApprox(Eigen::MatrixXd::Identity(3, 3)));
  }
  SECTION("diagonal factor takes elementwise square roots") {
    Eigen::MatrixXd F(2, 2);
    F << 4, 0, 0, 9;
    KroneckerChol chol = chol_factorwise(KroneckerMatrix({F}));
    REQUIRE_THAT(chol.lower(0)(0, 0), WithinRel(2.0, 1e-14));
    REQUIRE_THAT(chol.lower(0)(1, 1), WithinRel(3.0, 1e-14));
    REQUIRE(chol.lower(0)(0, 1) == 0.0);
  }
  SECTION("random SPD factor reconstructs within 1e-10") {
    std::mt19937_64 rng(5);
    Eigen::MatrixXd F = random_spd(4, rng);
    KroneckerChol chol = chol_factorwise(KroneckerMatrix({F}));
    REQUIRE((chol.lower(0) * chol.lower(0).transpose() - F).cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("an indefinite factor names its dimension") {
    Eigen::MatrixXd bad(2, 2);
    bad << 1, 2, 2, 1;
    KroneckerMatrix A({Eigen::MatrixXd::Identity(2, 2), bad});
    try {
      chol_factorwise(A);
      FAIL("expected a decomposition error");
    } catch (const DecompositionError& e) {
      REQUIRE(std::string(e.what()).find("dimension 1") != std::string::npos);
    }
  }
}

TEST_CASE("logdet_kron applies the Kronecker determinant identity", "[kron]") {
  SECTION("identity factors give zero") {
    KroneckerMatrix A({Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(2, 2)});
    REQUIRE_THAT(logdet_kron(A), WithinAbs(0.0, 1e-14));
  }
  SECTION("2*I2 kron I3 has determinant 2^6") {
    KroneckerMatrix A({2.0 * Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(3, 3)});
    REQUIRE_THAT(logdet_kron(A), WithinRel(std::log(64.0), 1e-12));
  }
  SECTION("random SPD factors match the dense log-determinant") {
    std::mt19937_64 rng(9);
    KroneckerMatrix A({random_spd(3, rng), random_spd(2, rng)});
    const Eigen::MatrixXd dense = dense_from_kron(A);
    const double expect = std::log(dense.determinant());
    REQUIRE_THAT(logdet_kron(A), WithinAbs(expect, 1e-9));
  }
}

TEST_CASE("trace_product_kron multiplies per-factor traces", "[kron]") {
  SECTION("identity times identity counts the side") {
    KroneckerMatrix I({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)});
    REQUIRE_THAT(trace_product_kron(I, I), WithinRel(4.0, 1e-14));
  }
  SECTION("diagonal example") {
    Eigen::MatrixXd A1 = Eigen::Vector2d(1, 2).asDiagonal();
    Eigen::MatrixXd B1 = Eigen::Vector2d(3, 4).asDiagonal();
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    REQUIRE_THAT(trace_product_kron(KroneckerMatrix({A1, I2}), KroneckerMatrix({B1, I2})),
                 WithinRel(22.0, 1e-14));
  }
  SECTION("random factors match the dense trace") {
    std::mt19937_64 rng(13);
    KroneckerMatrix A({random_spd(4, rng), random_spd(3, rng)});
    KroneckerMatrix B({random_spd(4, rng), random_spd(3, rng)});
    const double expect = (dense_from_kron(A) * dense_from_kron(B)).trace();
    REQUIRE_THAT(trace_product_kron(A, B), WithinRel(expect, 1e-10));
  }
  SECTION("symmetric in its arguments") {
    std::mt19937_64 rng(17);
    KroneckerMatrix A({random_spd(3, rng)});
    KroneckerMatrix B({random_spd(3, rng)});
    REQUIRE_THAT(trace_product_kron(A, B), WithinRel(trace_product_kron(B, A), 1e-13));
  }
  SECTION("shape mismatch throws") {
    KroneckerMatrix A({Eigen::MatrixXd::Identity(2, 2)});
    KroneckerMatrix B({Eigen::MatrixXd::Identity(3, 3)});
    REQUIRE_THROWS_AS(trace_product_kron(A, B), ShapeError);
  }
}

TEST_CASE("inv_factors inverts factor by factor", "[kron]") {
  SECTION("identity stays identity") {
    KroneckerChol chol = chol_factorwise(KroneckerMatrix({Eigen::MatrixXd::Identity(3, 3)}));
    REQUIRE(inv_factors(chol).factor(0).isApprox(Eigen::MatrixXd::Identity(3, 3)));
  }
  SECTION("diagonal factor inverts elementwise") {
    Eigen::MatrixXd F = Eigen::Vector2d(2, 4).asDiagonal();
    KroneckerMatrix inv = inv_factors(chol_factorwise(KroneckerMatrix({F})));
    REQUIRE_THAT(inv.factor(0)(0, 0), WithinRel(0.5, 1e-13));
    REQUIRE_THAT(inv.factor(0)(1, 1), WithinRel(0.25, 1e-13));
  }
  SECTION("random SPD factor: A times its inverse is I") {
    std::mt19937_64 rng(19);
    Eigen::MatrixXd F = random_spd(5, rng);
    KroneckerMatrix inv = inv_factors(chol_factorwise(KroneckerMatrix({F})));
    REQUIRE((F * inv.factor(0) - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("logdet of the inverse cancels the logdet") {
    std::mt19937_64 rng(23);
    KroneckerMatrix A({random_spd(3, rng), random_spd(4, rng)});
    KroneckerMatrix inv = inv_factors(chol_factorwise(A));
    REQUIRE_THAT(logdet_kron(A) + logdet_kron(inv), WithinAbs(0.0, 1e-8));
  }
}

TEST_CASE("rank1_quad_form multiplies per-dimension quadratic forms", "[kron]") {
  SECTION("identity with unit basis vectors gives one") {
    KroneckerMatrix I({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(3, 3)});
    Eigen::VectorXd e1 = Eigen::VectorXd::Unit(2, 0);
    Eigen::VectorXd e2 = Eigen::VectorXd::Unit(3, 1);
    REQUIRE_THAT(rank1_quad_form(I, {e1, e2}), WithinRel(1.0, 1e-14));
  }
  SECTION("hand-computed diagonal example") {
    Eigen::MatrixXd A1 = Eigen::Vector2d(1, 2).asDiagonal();
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    Eigen::VectorXd w1 = Eigen::VectorXd::Ones(2);
    Eigen::VectorXd w2(2);
    w2 << 1, 0;
    REQUIRE_THAT(rank1_quad_form(KroneckerMatrix({A1, I2}), {w1, w2}), WithinRel(3.0, 1e-14));
  }
  SECTION("a zero factor vector zeroes the product") {
    std::mt19937_64 rng(29);
    KroneckerMatrix A({random_spd(3, rng), random_spd(3, rng)});
    Eigen::VectorXd w = random_vector(3, rng);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
    REQUIRE(rank1_quad_form(A, {w, z}) == 0.0);
  }
  SECTION("matches the dense quadratic form, windowed included") {
    std::mt19937_64 rng(31);
    KroneckerMatrix A({random_spd(5, rng), random_spd(6, rng)});
    KronWeights w;
    w.push_back({1, random_vector(3, rng)});
    w.push_back({2, random_vector(4, rng)});
    const Eigen::VectorXd dense_w = dense_from_weights(w, {5, 6});
    const double expect = dense_w.dot(dense_from_kron(A) * dense_w);
    REQUIRE_THAT(rank1_quad_form(A, w), WithinRel(expect, 1e-10));
  }
  SECTION("nonnegative for SPD factors") {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 20; ++trial) {
      KroneckerMatrix A({random_spd(4, rng), random_spd(3, rng)});
      std::vector<Eigen::VectorXd> w{random_vector(4, rng), random_vector(3, rng)};
      REQUIRE(rank1_quad_form(A, w) >= 0.0);
    }
  }
}

TEST_CASE("dense-oracle equivalence holds across operations", "[kron][property]") {
  std::mt19937_64 rng(41);
  KroneckerMatrix A({random_spd(4, rng), random_spd(5, rng), random_spd(3, rng)});
  KroneckerMatrix B({random_spd(4, rng), random_spd(5, rng), random_spd(3, rng)});
  const Eigen::MatrixXd dA = dense_from_kron(A);
  const Eigen::MatrixXd dB = dense_from_kron(B);

  REQUIRE_THAT(logdet_kron(A), WithinRel(std::log(dA.determinant()), 1e-9));
  REQUIRE_THAT(trace_product_kron(A, B), WithinRel((dA * dB).trace(), 1e-9));

  KroneckerMatrix inv = inv_factors(chol_factorwise(A));
  REQUIRE((dense_from_kron(inv) * dA - Eigen::MatrixXd::Identity(60, 60)).cwiseAbs().maxCoeff() <
          1e-8);

  std::vector<Eigen::VectorXd> w{random_vector(4, rng), random_vector(5, rng),
                                 random_vector(3, rng)};
  const Eigen::VectorXd dw = dense_from_weights(as_kron_weights(w), {4, 5, 3});
  REQUIRE_THAT(rank1_quad_form(A, w), WithinRel(dw.dot(dA * dw), 1e-9));
}
