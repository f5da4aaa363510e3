#include "ldnn/kappa.hpp"

#include "oracles.hpp"

#include <catch2/catch.hpp>

using namespace ldnn;

namespace {

const Activation& relu() {
    static Activation a = activations::relu();
    return a;
}

DualMatrix dual1(double v) { return DualMatrix(Matrix::Constant(1, 1, v)); }
CovMatrix cov1(double v) { return CovMatrix(Matrix::Constant(1, 1, v)); }

DualMatrix dual2(double a, double b, double c) {
    Matrix m(2, 2);
    m << a, b, b, c;
    return DualMatrix(m);
}

} // namespace

TEST_CASE("sigma_outer", "[kappa]") {
    SECTION("zero covariance gives the zero matrix") {
        Vector n(1);
        n << 1.7;
        REQUIRE(sigma_outer(cov1(0.0), n, relu())(0, 0) == 0.0);
    }
    SECTION("scalar cases") {
        Vector n(1);
        n << 2.0;
        REQUIRE(sigma_outer(cov1(1.0), n, relu())(0, 0) == Approx(4.0));
        n << -1.0;
        REQUIRE(sigma_outer(cov1(1.0), n, relu())(0, 0) == 0.0);
    }
    SECTION("always PSD of rank at most one") {
        orc::TestRng rng(31);
        Matrix qm(2, 2);
        qm << 1.0, 0.4, 0.4, 2.0;
        CovMatrix q(qm);
        for (int i = 0; i < 200; ++i) {
            Vector n(2);
            n << rng.normal(), rng.normal();
            const Matrix s = sigma_outer(q, n, activations::parametric_relu(0.3));
            Eigen::SelfAdjointEigenSolver<Matrix> es(s);
            REQUIRE(es.eigenvalues().minCoeff() >= -1e-12);
            // rank <= 1: second eigenvalue vanishes
            REQUIRE(es.eigenvalues()(0) == Approx(0.0).margin(1e-12));
        }
    }
    SECTION("dimension mismatch rejected") {
        Vector n(2);
        n << 1.0, 2.0;
        REQUIRE_THROWS_AS(sigma_outer(cov1(1.0), n, relu()), std::invalid_argument);
    }
}

TEST_CASE("half-normal moments match quadrature", "[kappa]") {
    REQUIRE(half_moment(0) == Approx(orc::half_moment_quad(0)).margin(1e-10));
    REQUIRE(half_moment(1) == Approx(orc::half_moment_quad(1)).margin(1e-10));
    REQUIRE(half_moment(2) == Approx(orc::half_moment_quad(2)).margin(1e-10));
    REQUIRE(half_moment(1) == Approx(0.3989422804014327).epsilon(1e-12));
    REQUIRE(half_moment(0) == Approx(0.5).epsilon(1e-15));
    REQUIRE_THROWS_AS(half_moment(-1), std::invalid_argument);
}

TEST_CASE("closed-form 1-D ReLU kappa", "[kappa]") {
    SECTION("eta = 0.375, q = 1 equals log(3/2) and the quadrature oracle") {
        const double direct = orc::normal_expect(
            [](double x) { return std::exp(0.375 * std::pow(std::max(x, 0.0), 2)); });
        const auto est = kappa_eval(dual1(0.375), cov1(1.0), relu(), KappaMethod::closed_relu_1d);
        REQUIRE_FALSE(est.infinite);
        REQUIRE(est.value == Approx(std::log(1.5)).epsilon(1e-12));
        REQUIRE(est.value == Approx(std::log(direct)).epsilon(1e-10));
    }
    SECTION("beyond the boundary the flag is set") {
        const auto est = kappa_eval(dual1(0.6), cov1(1.0), relu(), KappaMethod::closed_relu_1d);
        REQUIRE(est.infinite);
    }
    SECTION("precondition violations rejected") {
        REQUIRE_THROWS_AS(kappa_eval(dual1(0.1), cov1(1.0), activations::sigmoid(),
                                     KappaMethod::closed_relu_1d),
                          std::invalid_argument);
    }
}

TEST_CASE("kappa(0;q) = 0 for every method", "[kappa]") {
    REQUIRE(kappa_eval(dual1(0.0), cov1(1.7), relu(), KappaMethod::closed_relu_1d).value == 0.0);
    REQUIRE(kappa_eval(dual1(0.0), cov1(1.7), relu(), KappaMethod::mc, 10000, 5).value == 0.0);
    REQUIRE(std::abs(kappa_eval(dual1(0.0), cov1(1.7), relu(), KappaMethod::quadrature).value) < 1e-12);
    REQUIRE(kappa_eval(dual1(0.0), cov1(1.7), relu(), KappaMethod::series, 8).value == 0.0);
    Matrix qm(2, 2);
    qm << 1.0, 0.3, 0.3, 2.0;
    REQUIRE(std::abs(kappa_eval(DualMatrix::zero(2), CovMatrix(qm), activations::gelu(),
                                KappaMethod::quadrature).value) < 1e-12);
}

TEST_CASE("quadrature agrees with the closed form and handles jumps", "[kappa]") {
    SECTION("1-D ReLU across the finite range") {
        for (double eta : {-3.0, -0.5, 0.1, 0.375, 0.45}) {
            const auto q = kappa_eval(dual1(eta), cov1(1.0), relu(), KappaMethod::quadrature);
            REQUIRE_FALSE(q.infinite);
            REQUIRE(q.value == Approx(orc::relu_kappa_1d(eta, 1.0)).margin(1e-9));
        }
    }
    SECTION("divergence detected from the ray coefficients") {
        REQUIRE(kappa_eval(dual1(0.6), cov1(1.0), relu(), KappaMethod::quadrature).infinite);
        REQUIRE(kappa_eval(dual1(0.5), cov1(1.0), relu(), KappaMethod::quadrature).infinite);
    }
    SECTION("binary step: kappa has the exact two-point form") {
        // sigma^2 is the indicator of N >= 0, so E[e^{eta sigma^2}] = 1/2 + e^eta/2.
        const auto est = kappa_eval(dual1(0.3), cov1(1.0), activations::binary_step(),
                                    KappaMethod::quadrature);
        REQUIRE(est.value == Approx(std::log(0.5 + 0.5 * std::exp(0.3))).margin(1e-10));
    }
}

TEST_CASE("Monte Carlo kappa: reproducibility and worker invariance", "[kappa]") {
    const auto a = kappa_eval(dual1(0.2), cov1(1.0), relu(), KappaMethod::mc, 200000, 99, 1);
    const auto b = kappa_eval(dual1(0.2), cov1(1.0), relu(), KappaMethod::mc, 200000, 99, 1);
    const auto c = kappa_eval(dual1(0.2), cov1(1.0), relu(), KappaMethod::mc, 200000, 99, 2);
    REQUIRE(a.value == b.value);
    REQUIRE(a.value == c.value);
    REQUIRE(a.std_error == c.std_error);
    const auto d = kappa_eval(dual1(0.2), cov1(1.0), relu(), KappaMethod::mc, 200000, 100, 1);
    REQUIRE(a.value != d.value);
}

TEST_CASE("evaluator triangle at |A|=1, q=1", "[kappa]") {
    for (double eta : {-0.5, -0.1, 0.1, 0.2}) {
        const double closed = orc::relu_kappa_1d(eta, 1.0);
        const auto quad = kappa_eval(dual1(eta), cov1(1.0), relu(), KappaMethod::quadrature);
        const auto mc = kappa_eval(dual1(eta), cov1(1.0), relu(), KappaMethod::mc, 2000000, 31);
        const auto ser = kappa_relu_series(dual1(eta), Vector::Constant(1, 1.0), 24);
        REQUIRE(quad.value == Approx(closed).margin(1e-9));
        REQUIRE(std::abs(mc.value - closed) <= std::max(1e-6, 3.0 * mc.std_error));
        if (eta > -0.4) {  // inside the series' guaranteed ball
            REQUIRE(ser.valid);
            REQUIRE(ser.value == Approx(closed).margin(1e-6));
        }
    }
}

TEST_CASE("convexity of kappa in eta", "[kappa]") {
    Matrix qm(2, 2);
    qm << 1.0, 0.2, 0.2, 1.5;
    CovMatrix q(qm);
    const double radius = finiteness_radius(q, relu());
    orc::TestRng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        auto draw = [&]() {
            Matrix e(2, 2);
            const double a = rng.normal(), b = rng.normal(), c = rng.normal();
            e << a, b, b, c;
            e *= 0.8 * radius / (1.0 + frobenius_norm(e));
            return DualMatrix(e);
        };
        const DualMatrix e1 = draw(), e2 = draw();
        const double t = 0.1 + 0.8 * rng.uniform();
        DualMatrix mid(t * e1.mat() + (1.0 - t) * e2.mat());
        const double k1 = kappa_eval(e1, q, relu(), KappaMethod::quadrature).value;
        const double k2 = kappa_eval(e2, q, relu(), KappaMethod::quadrature).value;
        const double km = kappa_eval(mid, q, relu(), KappaMethod::quadrature).value;
        REQUIRE(km <= t * k1 + (1.0 - t) * k2 + 1e-9);
    }
}

TEST_CASE("monotone divergence toward the 1-D boundary", "[kappa]") {
    double prev = -kInf;
    for (double eta : {0.3, 0.4, 0.45, 0.49, 0.499, 0.4999}) {
        const double v = kappa_closed_relu_1d(eta, 1.0).value;
        REQUIRE(v > prev);
        prev = v;
    }
    REQUIRE(prev > 3.0);  // grows without bound at the asymptote
}

TEST_CASE("continuity of kappa in q", "[kappa]") {
    Matrix qm(2, 2), dm(2, 2);
    qm << 1.0, 0.3, 0.3, 2.0;
    dm << 0.5, 0.2, 0.2, 0.4;
    dm /= frobenius_norm(dm);
    const CovMatrix q(qm);
    const DualMatrix eta = dual2(0.04, 0.01, 0.02);
    const double base = kappa_eval(eta, q, relu(), KappaMethod::quadrature).value;
    double prev_err = kInf;
    for (int j = 1; j <= 6; ++j) {
        CovMatrix qj(qm + std::pow(10.0, -j) * dm);
        const double err = std::abs(kappa_eval(eta, qj, relu(), KappaMethod::quadrature).value - base);
        REQUIRE(err < prev_err);
        prev_err = err;
    }
    REQUIRE(prev_err < 1e-5);
}

TEST_CASE("kappa gradient", "[kappa]") {
    SECTION("gradient at the origin is the mean of Sigma") {
        Matrix qm(2, 2);
        qm << 1.0, 0.5, 0.5, 2.0;
        CovMatrix q(qm);
        const Matrix g = kappa_gradient(DualMatrix::zero(2), q, relu()).grad;
        const Matrix m = mean_sigma(q, relu()).mat();
        REQUIRE(frobenius_norm(g - m) < 1e-12);
    }
    SECTION("1-D ReLU at eta=0.25 matches the central finite difference of the closed form") {
        const double fd = (orc::relu_kappa_1d(0.25 + 1e-5, 1.0) -
                           orc::relu_kappa_1d(0.25 - 1e-5, 1.0)) / 2e-5;
        const auto g = kappa_gradient(dual1(0.25), cov1(1.0), relu());
        REQUIRE(g.grad(0, 0) == Approx(fd).margin(1e-8));

        // The MC ratio estimator agrees within its jackknife error bars.
        McOptions mo;
        mo.samples = 4'000'000;
        mo.seed = 12;
        DualMatrix eta = dual1(0.25);
        auto mc = mc_kappa(&eta, cov1(1.0), relu(), mo, true);
        REQUIRE(std::abs(mc.grad(0, 0) - fd) <=
                3.0 * mc.grad_std_error(0, 0) + 1e-6);
    }
    SECTION("zero covariance has zero gradient") {
        const auto g = kappa_gradient(DualMatrix::zero(1), cov1(0.0), relu());
        REQUIRE(g.grad(0, 0) == Approx(0.0).margin(1e-15));
    }
    SECTION("quadrature gradient matches finite differences of quadrature kappa") {
        Matrix qm(2, 2);
        qm << 1.2, 0.3, 0.3, 0.8;
        CovMatrix q(qm);
        DualMatrix eta = dual2(0.05, -0.02, 0.03);
        const Matrix g = kappa_gradient(eta, q, activations::parametric_relu(0.2)).grad;
        const double h = 1e-6;
        for (int i = 0; i < 2; ++i)
            for (int j = i; j < 2; ++j) {
                Matrix de = Matrix::Zero(2, 2);
                de(i, j) = h;
                de(j, i) = h;
                const double up = kappa_eval(DualMatrix(eta.mat() + de), q,
                                             activations::parametric_relu(0.2),
                                             KappaMethod::quadrature).value;
                const double dn = kappa_eval(DualMatrix(eta.mat() - de), q,
                                             activations::parametric_relu(0.2),
                                             KappaMethod::quadrature).value;
                const double fd = (up - dn) / (2.0 * h);
                const double expected = (i == j) ? g(i, i) : 2.0 * g(i, j);
                REQUIRE(fd == Approx(expected).margin(1e-5));
            }
    }
}

TEST_CASE("mean of Sigma", "[kappa]") {
    SECTION("E[max(N,0)^2] = 1/2 for unit scalar covariance") {
        REQUIRE(mean_sigma(cov1(1.0), relu())(0, 0) ==
                Approx(orc::half_moment_quad(2)).margin(1e-10));
    }
    SECTION("zero covariance") {
        REQUIRE(mean_sigma(cov1(0.0), relu())(0, 0) == Approx(0.0).margin(1e-15));
    }
    SECTION("identity 2x2: independent half-means on the off-diagonal") {
        const CovMatrix m = mean_sigma(CovMatrix::identity(2), relu());
        REQUIRE(m(0, 0) == Approx(0.5).margin(1e-10));
        REQUIRE(m(1, 1) == Approx(0.5).margin(1e-10));
        const double half_mean = orc::half_moment_quad(1);
        REQUIRE(m(0, 1) == Approx(half_mean * half_mean).margin(1e-10));
        REQUIRE(m(0, 1) == Approx(1.0 / (2.0 * M_PI)).margin(1e-10));
    }
}

TEST_CASE("ReLU power series", "[kappa]") {
    SECTION("eta = 0 gives exactly zero") {
        REQUIRE(kappa_relu_series(DualMatrix::zero(2), Vector::Constant(2, 1.0), 10).value == 0.0);
    }
    SECTION("1-D series matches the closed form at eta=0.1, K=12") {
        const auto r = kappa_relu_series(dual1(0.1), Vector::Constant(1, 1.0), 12);
        REQUIRE(r.valid);
        REQUIRE(r.value == Approx(orc::relu_kappa_1d(0.1, 1.0)).margin(1e-8));
    }
    SECTION("2-D diagonal matches the tensor quadrature oracle") {
        Vector a(2);
        a << 1.0, 2.0;
        const DualMatrix eta = dual2(0.012, -0.008, 0.006);  // ||eta||_F ~ 0.02
        auto f = [&](double x, double y) {
            const double s0 = std::max(std::sqrt(a(0)) * x, 0.0);
            const double s1 = std::max(std::sqrt(a(1)) * y, 0.0);
            return std::exp(eta(0, 0) * s0 * s0 + 2.0 * eta(0, 1) * s0 * s1 +
                            eta(1, 1) * s1 * s1);
        };
        const double oracle = std::log(orc::tensor_gauss_2d(f, 220, 14.0));
        const auto r = kappa_relu_series(eta, a, 10);
        REQUIRE(r.valid);
        REQUIRE(r.value == Approx(oracle).margin(1e-6));
        REQUIRE(r.truncation_bound >= std::abs(r.value - oracle));
    }
    SECTION("production aggregation equals the brute-force multi-index sum") {
        Vector a(2);
        a << 0.7, 1.3;
        const DualMatrix eta = dual2(0.05, 0.02, -0.03);
        for (int K : {1, 2, 3, 4}) {
            const double brute = kappa_relu_series_bruteforce(eta, a, K);
            const auto fast = kappa_relu_series(eta, a, K);
            REQUIRE(fast.value == Approx(brute).margin(1e-13));
        }
    }
    SECTION("series term count profiles sum to 2k") {
        for (int k : {1, 2, 3}) {
            for (const auto& t : enumerate_series_terms(2, k)) {
                const auto c = t.counts(2);
                REQUIRE(c[0] + c[1] == 2 * k);
            }
        }
        REQUIRE(enumerate_series_terms(2, 2).size() == 16);  // |A|^{2k}
    }
    SECTION("tail bound flags an order too small for control") {
        const auto r = kappa_relu_series(dual1(0.6), Vector::Constant(1, 1.0), 6);
        REQUIRE_FALSE(r.valid);
    }
    SECTION("preconditions") {
        Matrix qm(2, 2);
        qm << 1.0, 0.2, 0.2, 1.0;
        REQUIRE_THROWS_AS(kappa_eval(DualMatrix::zero(2), CovMatrix(qm), relu(),
                                     KappaMethod::series),
                          std::invalid_argument);
        REQUIRE_THROWS_AS(kappa_relu_series(dual1(0.1), Vector::Constant(1, 0.0), 4),
                          std::invalid_argument);
    }
}

TEST_CASE("first-order expansion", "[kappa]") {
    REQUIRE(first_order_kappa(DualMatrix::zero(2), Vector::Constant(2, 1.0)) == 0.0);
    SECTION("1-D: slope is E[max(N,0)^2] = 1/2") {
        for (double t : {0.01, 0.1, -0.2})
            REQUIRE(first_order_kappa(dual1(t), Vector::Constant(1, 1.0)) ==
                    Approx(0.5 * t).margin(1e-14));
    }
    SECTION("2-D off-diagonal pair of ones") {
        const double v = first_order_kappa(dual2(0.0, 1.0, 0.0), Vector::Constant(2, 1.0));
        const double half_mean = orc::half_moment_quad(1);
        REQUIRE(v == Approx(2.0 * half_mean * half_mean).margin(1e-10));
        REQUIRE(v == Approx(1.0 / M_PI).epsilon(1e-10));
    }
    SECTION("it is the small-eta limit of the full kappa") {
        Vector a(2);
        a << 1.0, 2.0;
        const DualMatrix dir = dual2(0.3, -0.2, 0.1);
        double prev_ratio_err = kInf;
        for (double s : {1e-2, 1e-3, 1e-4}) {
            DualMatrix eta(s * dir.mat());
            const double full = kappa_relu_series(eta, a, 16).value;
            const double lin = first_order_kappa(eta, a);
            const double err = std::abs(full - lin) / s;
            REQUIRE(err < prev_ratio_err);
            prev_ratio_err = err;
        }
    }
}

TEST_CASE("finiteness radius", "[kappa]") {
    REQUIRE(finiteness_radius(cov1(1.0), relu()) == Approx(0.25));
    REQUIRE(finiteness_radius(cov1(4.0), relu()) == Approx(1.0 / 16.0));
    SECTION("the guaranteed ball sits inside the true 1-D boundary") {
        REQUIRE(finiteness_radius(cov1(1.0), relu()) < 0.5);
        const auto est = kappa_eval(dual1(0.24), cov1(1.0), relu(), KappaMethod::quadrature);
        REQUIRE_FALSE(est.infinite);
    }
    REQUIRE(std::isinf(finiteness_radius(cov1(0.0), relu())));
}

TEST_CASE("heavy-tail flag beyond the boundary", "[kappa]") {
    // At eta > 1/2 the true kappa is infinite; the finite MC average is
    // dominated by its largest samples and must be flagged.
    const auto est = kappa_eval(dual1(0.6), cov1(1.0), relu(), KappaMethod::mc, 1000000, 3);
    REQUIRE(est.unreliable);
}
