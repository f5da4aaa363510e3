#include "ldnn/simulate.hpp"

#include "oracles.hpp"

#include <catch2/catch.hpp>

using namespace ldnn;

namespace {

NetworkConfig scalar_relu_config(int layers = 1) {
    NetworkConfig cfg;
    cfg.layers = layers;
    cfg.gammas.assign(layers, 1.0);
    cfg.c_b = 0.0;
    cfg.c_w = 1.0;
    cfg.n0 = 1;
    cfg.inputs = {Vector::Constant(1, 1.0)};
    cfg.n_out = 1;
    cfg.activation = activations::relu();
    return cfg;
}

} // namespace

TEST_CASE("width schedules", "[simulate]") {
    auto cfg = scalar_relu_config(2);
    cfg.gammas = {1.0, 2.5};
    const auto s = WidthSchedule::from(cfg, 10);
    REQUIRE(s.widths == std::vector<int>{10, 25});
    REQUIRE(s.base_width == 10);
    for (int w : s.widths) REQUIRE(w >= s.base_width);
    cfg.gammas = {1.0, std::numeric_limits<double>::infinity()};
    REQUIRE_THROWS_AS(WidthSchedule::from(cfg, 10), std::invalid_argument);
}

TEST_CASE("network sampling basics", "[simulate]") {
    SECTION("vanishing weights give vanishing outputs") {
        auto cfg = scalar_relu_config();
        cfg.c_w = 1e-12;
        const Matrix z = sample_network(cfg, WidthSchedule::from(cfg, 64), 5);
        REQUIRE(frobenius_norm(z) < 1e-5);
    }
    SECTION("zero input with no bias propagates exact zeros through ReLU") {
        auto cfg = scalar_relu_config(2);
        cfg.inputs = {Vector::Zero(1)};
        const Matrix z = sample_network(cfg, WidthSchedule::from(cfg, 32), 5);
        REQUIRE(frobenius_norm(z) == 0.0);
    }
    SECTION("identical seeds are bit-identical") {
        auto cfg = scalar_relu_config(2);
        const auto sched = WidthSchedule::from(cfg, 64);
        const Matrix a = sample_network(cfg, sched, 123);
        const Matrix b = sample_network(cfg, sched, 123);
        REQUIRE(a == b);
        const Matrix c = sample_network(cfg, sched, 124);
        REQUIRE(a != c);
    }
    SECTION("scaled output variance tracks the kernel chain diagonal over v") {
        auto cfg = scalar_relu_config();
        const int v = 256, reps = 10000;
        const auto sched = WidthSchedule::from(cfg, v);
        double sum = 0.0, sq = 0.0;
        for (int r = 0; r < reps; ++r) {
            const double z = sample_network(cfg, sched, 1000 + r)(0, 0);
            sum += z;
            sq += z * z;
        }
        const double var = sq / reps - (sum / reps) * (sum / reps);
        const double expected = kernel_forward(initial_gram(cfg), cfg)(0, 0) / v;
        // std error of a sample variance of a near-Gaussian: var * sqrt(2/n)
        const double se = expected * std::sqrt(2.0 / reps);
        REQUIRE(std::abs(var - expected) <= 5.0 * se);
    }
}

TEST_CASE("gram chain sampling", "[simulate]") {
    SECTION("zero input with no bias keeps every layer at zero") {
        auto cfg = scalar_relu_config(3);
        cfg.inputs = {Vector::Zero(1)};
        const auto chain = sample_gram_chain_full(cfg, WidthSchedule::from(cfg, 32), 5);
        for (const auto& g : chain) REQUIRE(frobenius_norm(g.mat()) == 0.0);
    }
    SECTION("PSD at every layer") {
        NetworkConfig cfg = scalar_relu_config(2);
        cfg.n0 = 2;
        Vector x1(2), x2(2);
        x1 << 1.0, 0.2;
        x2 << -0.3, 0.9;
        cfg.inputs = {x1, x2};
        cfg.c_b = 0.1;
        const auto chain = sample_gram_chain_full(cfg, WidthSchedule::from(cfg, 48), 9);
        for (const auto& g : chain) {
            Eigen::SelfAdjointEigenSolver<Matrix> es(g.mat());
            REQUIRE(es.eigenvalues().minCoeff() >= -1e-12);
        }
    }
    SECTION("law of large numbers: error shrinks like v^{-1/2} within a factor 2") {
        auto cfg = scalar_relu_config();
        const double target = kernel_forward(initial_gram(cfg), cfg)(0, 0);
        auto mean_err = [&](int v) {
            double acc = 0.0;
            for (int r = 0; r < 100; ++r)
                acc += std::abs(sample_gram_chain(cfg, WidthSchedule::from(cfg, v),
                                                  40000 + 100 * v + r)(0, 0) - target);
            return acc / 100.0;
        };
        const double e64 = mean_err(64), e256 = mean_err(256), e1024 = mean_err(1024);
        REQUIRE(e64 / e256 > 1.0);
        REQUIRE(e64 / e256 < 4.0);
        REQUIRE(e64 / e1024 > 2.0);
        REQUIRE(e64 / e1024 < 8.0);
    }
    SECTION("representation: network outputs match G^{#} N in their first two moments") {
        auto cfg = scalar_relu_config();
        const int v = 256, reps = 100000;
        const auto sched = WidthSchedule::from(cfg, v);
        double m1a = 0, m2a = 0, m1b = 0, m2b = 0;
        for (int r = 0; r < reps; ++r) {
            // direct network sample (unscaled)
            const double z = sample_network(cfg, sched, 70000 + r)(0, 0) * std::sqrt(double(v));
            // representation: root of an independently sampled chain times a normal
            const double g = sample_gram_chain(cfg, sched, 900000 + r)(0, 0);
            const double zr = std::sqrt(std::max(0.0, g)) *
                              rng::normal(rng::substream(800000 + r, 1), 0);
            m1a += z;
            m2a += z * z;
            m1b += zr;
            m2b += zr * zr;
        }
        m1a /= reps; m2a /= reps; m1b /= reps; m2b /= reps;
        // var(Z) = E[G] = 1/2; se of the mean ~ sqrt(var/reps)
        const double se_mean = std::sqrt(0.5 / reps);
        REQUIRE(std::abs(m1a - m1b) <= 4.0 * std::sqrt(2.0) * se_mean);
        // se of the second moment: sqrt(Var(Z^2)/reps), Var(Z^2) ~ 2 E[G]^2 + ...
        const double se_m2 = std::sqrt(0.53 / reps);
        REQUIRE(std::abs(m2a - m2b) <= 4.0 * std::sqrt(2.0) * se_m2);
    }
    SECTION("equivariance of the recursion under input permutation") {
        // The Gram recursion commutes with permuting inputs and normals alike.
        NetworkConfig cfg = scalar_relu_config();
        cfg.n0 = 2;
        Vector x1(2), x2(2);
        x1 << 1.0, 0.0;
        x2 << 0.4, 0.8;
        cfg.inputs = {x1, x2};
        NetworkConfig cfg_perm = cfg;
        cfg_perm.inputs = {x2, x1};

        orc::TestRng trng(3);
        const int n_draws = 37;
        std::vector<Vector> ns;
        for (int j = 0; j < n_draws; ++j) {
            Vector n(2);
            n << trng.normal(), trng.normal();
            ns.push_back(n);
        }
        auto step = [&](const NetworkConfig& c, const std::vector<Vector>& draws) {
            const CovMatrix g0 = initial_gram(c);
            const Matrix root = matrix_root(g0).mat();
            Matrix acc = Matrix::Zero(2, 2);
            for (const auto& n : draws) acc += sigma_outer(root, n, c.activation);
            return Matrix(c.c_b * ones(2) + c.c_w / n_draws * acc);
        };
        std::vector<Vector> ns_perm;
        for (const auto& n : ns) {
            Vector p(2);
            p << n(1), n(0);
            ns_perm.push_back(p);
        }
        const Matrix g = step(cfg, ns);
        const Matrix gp = step(cfg_perm, ns_perm);
        Matrix perm(2, 2);
        perm << 0, 1, 1, 0;
        REQUIRE(frobenius_norm(gp - perm * g * perm.transpose()) < 1e-14);
    }
}

TEST_CASE("tail slope fitting", "[simulate]") {
    SECTION("exact probabilities 2^{-v} give slope log 2 exactly") {
        std::vector<TailRow> rows;
        for (int v : {10, 20, 40}) rows.push_back(make_exact_row(v, std::pow(2.0, -v)));
        const auto fit = fit_tail_slope(rows);
        REQUIRE(fit.slope == Approx(std::log(2.0)).epsilon(1e-12));
        REQUIRE(fit.intercept == Approx(0.0).margin(1e-10));
    }
    SECTION("zero-hit rows are excluded; an all-zero experiment is inconclusive") {
        std::vector<TailRow> rows;
        rows.push_back(make_tail_row(10, 1000, 0));
        REQUIRE(rows[0].excluded);
        rows.push_back(make_tail_row(20, 1000, 4));
        REQUIRE_THROWS_AS(fit_tail_slope(rows), NumericalFailure);  // one usable row
        rows.push_back(make_tail_row(30, 1000, 2));
        REQUIRE_NOTHROW(fit_tail_slope(rows));
    }
    SECTION("Wilson std errors are sane for small counts") {
        REQUIRE(wilson_std_error(1, 1000) > 0.0);
        REQUIRE(wilson_std_error(500, 1000) == Approx(std::sqrt(0.25 / 1000)).epsilon(0.01));
    }
}

TEST_CASE("tail experiment end to end", "[simulate]") {
    auto cfg = scalar_relu_config();
    SECTION("threshold at the typical value: p ~ 1/2 and slope ~ 0") {
        const auto res = tail_experiment(cfg, 0.5, TailDirection::above, {50, 100, 200},
                                         20000, 77);
        for (const auto& r : res.rows) {
            REQUIRE(r.p_hat > 0.4);
            REQUIRE(r.p_hat < 0.6);
        }
        REQUIRE(std::abs(res.fit.slope) < 0.01);
    }
    SECTION("identical seeds reproduce rows bit-identically, any worker count") {
        const auto a = tail_experiment(cfg, 0.8, TailDirection::above, {30, 60}, 20000, 5,
                                       {}, 1);
        const auto b = tail_experiment(cfg, 0.8, TailDirection::above, {30, 60}, 20000, 5,
                                       {}, 2);
        REQUIRE(a.rows.size() == b.rows.size());
        for (std::size_t i = 0; i < a.rows.size(); ++i) {
            REQUIRE(a.rows[i].hits == b.rows[i].hits);
            REQUIRE(a.rows[i].p_hat == b.rows[i].p_hat);
        }
    }
    SECTION("slopes increase with the threshold above the mean") {
        const auto t1 = tail_experiment(cfg, 0.8, TailDirection::above, {30, 60}, 200000, 11);
        const auto t2 = tail_experiment(cfg, 1.2, TailDirection::above, {30, 60}, 200000, 11);
        REQUIRE(t1.fit.slope <= t2.fit.slope + 2.0 * (t1.fit.slope_std_error +
                                                      t2.fit.slope_std_error));
    }
    SECTION("predicted rate for a scalar gram event comes from the Legendre transform") {
        const double pred = predicted_tail_rate(cfg, 1.0, TailSummarySpec{});
        REQUIRE(pred == Approx(orc::relu_kappa_star_1d(1.0, 1.0)).margin(1e-6));
    }
}

TEST_CASE("figure data", "[simulate]") {
    const auto fig = figure_data(activations::relu(), 1.0, GridSpec{-1.0, 0.6, 0.02},
                                 GridSpec{0.1, 3.0, 0.1});
    SECTION("kappa rows: zero at the origin, finite below 1/2, infinite beyond") {
        for (const auto& [x, k] : fig.kappa_rows) {
            if (std::abs(x) < 1e-12) REQUIRE(k == Approx(0.0).margin(1e-12));
            if (x < 0.5 - 1e-9) REQUIRE(std::isfinite(k));
            if (x >= 0.5 - 1e-12) REQUIRE(std::isinf(k));
        }
    }
    SECTION("kappa* rows: zero at the mean, increasing above it, convex") {
        double at_half = kInf;
        for (const auto& [y, v] : fig.kappa_star_rows) {
            REQUIRE(v >= 0.0);
            if (std::abs(y - 0.5) < 1e-9) at_half = v;
        }
        REQUIRE(at_half <= 1e-9);
        const auto& rows = fig.kappa_star_rows;
        for (std::size_t i = 0; i + 1 < rows.size(); ++i)
            if (rows[i].first >= 0.5)
                REQUIRE(rows[i + 1].second >= rows[i].second - 1e-9);
        for (std::size_t i = 1; i + 1 < rows.size(); ++i)
            REQUIRE(rows[i].second <=
                    0.5 * (rows[i - 1].second + rows[i + 1].second) + 1e-6);
    }
    SECTION("large but finite kappa just inside the boundary") {
        const auto near = figure_data(activations::relu(), 1.0, GridSpec{0.48, 0.48, 1.0},
                                      GridSpec{0.5, 0.5, 1.0});
        REQUIRE(std::isfinite(near.kappa_rows[0].second));
        REQUIRE(near.kappa_rows[0].second > 1.0);
    }
}
