#include "ldnn/matrix.hpp"

#include "oracles.hpp"

#include <catch2/catch.hpp>

using namespace ldnn;

namespace {

Matrix random_psd(orc::TestRng& rng, int dim, int rank = -1) {
    const int r = rank < 0 ? dim : rank;
    Matrix b(dim, r);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < r; ++j) b(i, j) = rng.normal();
    return b * b.transpose();
}

} // namespace

TEST_CASE("frobenius inner product", "[matrix]") {
    SECTION("identity against identity") {
        REQUIRE(frobenius_inner(Matrix::Identity(2, 2), Matrix::Identity(2, 2)) == 2.0);
    }
    SECTION("direct elementwise sum") {
        Matrix p(2, 2), q(2, 2);
        p << 1, 2, 3, 4;
        q << 0, 1, 1, 0;
        REQUIRE(frobenius_inner(p, q) == 5.0);
    }
    SECTION("matches an independent elementwise loop on random 3x3") {
        orc::TestRng rng(11);
        Matrix q(3, 3);
        for (int i = 0; i < 9; ++i) q.data()[i] = rng.normal();
        double expected = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) expected += q(i, j) * q(i, j);
        REQUIRE(frobenius_inner(q, q) == Approx(expected).epsilon(1e-14));
    }
    SECTION("dimension mismatch rejected") {
        REQUIRE_THROWS_AS(frobenius_inner(Matrix::Zero(2, 2), Matrix::Zero(3, 3)),
                          std::invalid_argument);
    }
}

TEST_CASE("matrix root", "[matrix]") {
    SECTION("diagonal case") {
        Matrix d = Matrix::Zero(2, 2);
        d(0, 0) = 4.0;
        d(1, 1) = 9.0;
        const Matrix r = matrix_root(CovMatrix(d)).mat();
        REQUIRE(r(0, 0) == Approx(2.0));
        REQUIRE(r(1, 1) == Approx(3.0));
        REQUIRE(r(0, 1) == Approx(0.0).margin(1e-15));
    }
    SECTION("identity is its own root") {
        const Matrix r = matrix_root(CovMatrix::identity(3)).mat();
        REQUIRE((r - Matrix::Identity(3, 3)).norm() < 1e-14);
    }
    SECTION("root squared reproduces q on 1000 random PSD matrices up to dim 6") {
        orc::TestRng rng(42);
        for (int trial = 0; trial < 1000; ++trial) {
            const int dim = 1 + static_cast<int>(rng.next() % 6);
            const int rank = 1 + static_cast<int>(rng.next() % dim);
            CovMatrix q(random_psd(rng, dim, rank));
            CovMatrix root = matrix_root(q);
            REQUIRE((root.mat() - root.mat().transpose()).cwiseAbs().maxCoeff() == 0.0);
            const double err = frobenius_norm(root.mat() * root.mat() - q.mat());
            REQUIRE(err <= 1e-10 * std::max(1e-30, frobenius_norm(q.mat())));
        }
    }
    SECTION("continuity: perturbation response shrinks monotonically over 3 decades") {
        orc::TestRng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            const int dim = 2 + static_cast<int>(rng.next() % 4);
            CovMatrix q(random_psd(rng, dim));
            Matrix w(dim, 1);
            for (int i = 0; i < dim; ++i) w(i, 0) = rng.normal();
            Matrix delta = w * w.transpose();
            delta *= 1e-6 / frobenius_norm(delta);
            const Matrix base = matrix_root(q).mat();
            double prev = std::numeric_limits<double>::infinity();
            for (int decade = 0; decade < 3; ++decade) {
                const double scale = std::pow(10.0, -decade);
                CovMatrix qp(q.mat() + scale * delta);
                const double diff = frobenius_norm(matrix_root(qp).mat() - base);
                REQUIRE(diff < prev);
                prev = diff;
            }
        }
    }
    SECTION("indefinite matrix rejected") {
        Matrix m(2, 2);
        m << 1.0, 0.0, 0.0, -0.5;
        REQUIRE_THROWS_AS(CovMatrix(m), std::invalid_argument);
    }
    SECTION("eigenvalue admission floor accepts numerically rank-deficient kernels") {
        Matrix m(2, 2);  // duplicated inputs give an exactly repeated row
        m << 1.0, 1.0, 1.0, 1.0;
        m(1, 1) -= 1e-13;  // slightly indefinite from rounding
        REQUIRE_NOTHROW(CovMatrix(m));
    }
}

TEST_CASE("pseudo inverse", "[matrix]") {
    SECTION("invertible 2x2 equals ordinary inverse") {
        Matrix g(2, 2);
        g << 3, 1, 1, 2;
        REQUIRE((pseudo_inverse(g) - g.inverse()).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("rank-deficient diagonal") {
        Matrix g = Matrix::Zero(2, 2);
        g(0, 0) = 2.0;
        const Matrix p = pseudo_inverse(g);
        REQUIRE(p(0, 0) == Approx(0.5));
        REQUIRE(p(1, 1) == Approx(0.0).margin(1e-15));
    }
    SECTION("four Penrose conditions on random 3x3") {
        orc::TestRng rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            Matrix g(3, 3);
            for (int i = 0; i < 9; ++i) g.data()[i] = rng.normal();
            if (trial % 3 == 0) g.col(2) = g.col(0) + g.col(1);  // singular cases too
            const Matrix p = pseudo_inverse(g);
            REQUIRE(frobenius_norm(g * p * g - g) < 1e-9 * (1.0 + frobenius_norm(g)));
            REQUIRE(frobenius_norm(p * g * p - p) < 1e-9 * (1.0 + frobenius_norm(p)));
            REQUIRE(frobenius_norm((g * p).transpose() - g * p) < 1e-9);
            REQUIRE(frobenius_norm((p * g).transpose() - p * g) < 1e-9);
        }
    }
    SECTION("pseudoinverse of a symmetric matrix is symmetric; projector identity") {
        orc::TestRng rng(9);
        for (int trial = 0; trial < 50; ++trial) {
            Matrix g = random_psd(rng, 4, 2 + static_cast<int>(rng.next() % 3));
            g = 0.5 * (g + g.transpose());
            const Matrix p = pseudo_inverse(g);
            REQUIRE(frobenius_norm(p - p.transpose()) < 1e-9 * (1.0 + frobenius_norm(p)));
            REQUIRE(frobenius_norm(p * g * p - p) < 1e-9 * (1.0 + frobenius_norm(p)));
        }
    }
}

TEST_CASE("range containment", "[matrix]") {
    SECTION("full range accepts anything") {
        Matrix z(2, 1);
        z << 3.0, -1.0;
        REQUIRE(range_contains(Matrix::Identity(2, 2), z, 1e-8));
    }
    SECTION("orthogonal direction rejected") {
        Matrix g = Matrix::Zero(2, 2);
        g(0, 0) = 1.0;
        Matrix z(2, 1);
        z << 0.0, 1.0;
        REQUIRE_FALSE(range_contains(g, z, 1e-8));
    }
    SECTION("constructed feasible z is accepted for rank-2 g of size 3") {
        orc::TestRng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            Matrix g = random_psd(rng, 3, 2);
            Matrix w(3, 2);
            for (int i = 0; i < 6; ++i) w.data()[i] = rng.normal();
            REQUIRE(range_contains(g, g * w, 1e-8));
        }
    }
    SECTION("dimension mismatch rejected") {
        REQUIRE_THROWS_AS(range_contains(Matrix::Identity(2, 2), Matrix::Zero(3, 1), 1e-8),
                          std::invalid_argument);
    }
}

TEST_CASE("symmetry is stored exactly", "[matrix]") {
    Matrix m(2, 2);
    m << 1.0, 0.3 + 1e-16, 0.3, 2.0;
    CovMatrix q(m);
    REQUIRE(q(0, 1) == q(1, 0));
    Matrix bad(2, 2);
    bad << 1.0, 0.5, 0.1, 2.0;
    REQUIRE_THROWS_AS(CovMatrix(bad), std::invalid_argument);
    REQUIRE_THROWS_AS(DualMatrix(bad), std::invalid_argument);
}
