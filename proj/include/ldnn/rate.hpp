#pragma once

#include "ldnn/activation.hpp"
#include "ldnn/kappa.hpp"
#include "ldnn/legendre.hpp"
#include "ldnn/matrix.hpp"
#include "ldnn/optimize.hpp"
#include "ldnn/rng.hpp"

#include <atomic>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace ldnn {

/// Network description: depth, layer-width ratios, weight/bias variances and
/// the finite input set. gammas may contain +inf; at least one must equal 1
/// (that layer's width is the LDP speed v(n)).
struct NetworkConfig {
    int layers = 1;                  // L
    std::vector<double> gammas;      // gamma_1..gamma_L, each in [1, inf]
    double c_b = 0.0;
    double c_w = 1.0;
    int n0 = 1;
    std::vector<Vector> inputs;      // x_alpha, each of dimension n0
    int n_out = 1;                   // n_{L+1}
    Activation activation = activations::relu();

    int input_count() const { return static_cast<int>(inputs.size()); }

    void validate() const {
        if (layers < 1) throw std::invalid_argument("NetworkConfig: L must be >= 1");
        if (static_cast<int>(gammas.size()) != layers)
            throw std::invalid_argument("NetworkConfig: need one gamma per hidden layer");
        bool has_unit = false;
        for (double g : gammas) {
            if (!(g >= 1.0)) throw std::invalid_argument("NetworkConfig: gammas must lie in [1, inf]");
            if (g == 1.0) has_unit = true;
        }
        if (!has_unit)
            throw std::invalid_argument("NetworkConfig: some gamma must equal 1 (the slowest layer)");
        if (!(c_b >= 0.0)) throw std::invalid_argument("NetworkConfig: C_b must be >= 0");
        if (!(c_w > 0.0)) throw std::invalid_argument("NetworkConfig: C_W must be > 0");
        if (n0 < 1) throw std::invalid_argument("NetworkConfig: n0 must be >= 1");
        if (n_out < 1) throw std::invalid_argument("NetworkConfig: n_out must be >= 1");
        if (inputs.empty()) throw std::invalid_argument("NetworkConfig: need at least one input");
        for (const auto& x : inputs)
            if (x.size() != n0) throw std::invalid_argument("NetworkConfig: input dimension != n0");
    }
};

struct RateOptions {
    LegendreOptions legendre;
    int restarts = 8;        // multi-start count for chain minimizations
    int inner_restarts = 4;  // restarts of nested rate_I_G calls inside rate_I_Z
    int nm_max_evals = 3000;
    std::uint64_t seed = 0;
    int workers = 1;
};

struct RateDiagnostics {
    int restarts_used = 0;
    double best = kInf;
    double worst = -kInf;
    long long evals = 0;
    double full_value = std::numeric_limits<double>::quiet_NaN();  // full_crosscheck only
    double gap = std::numeric_limits<double>::quiet_NaN();
    double constraint_residual = std::numeric_limits<double>::quiet_NaN();
};

/// A rate-function value with the minimizing chain and minimizer r.
struct RateCertificate {
    double value = kInf;
    bool infinite = true;
    std::vector<CovMatrix> chain;  // g^(0)..g^(L)
    Matrix r_min;                  // |A| x n_out; empty for chain-only rates
    RateDiagnostics diagnostics;

    double as_double() const { return infinite ? kInf : value; }
};

/// g^(0) = (C_b + C_W/n0 <x_a, x_b>)_{a,b in A}: PSD by construction.
inline CovMatrix initial_gram(const NetworkConfig& cfg) {
    cfg.validate();
    const int m = cfg.input_count();
    Matrix g(m, m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            g(a, b) = cfg.c_b + cfg.c_w / cfg.n0 * cfg.inputs[a].dot(cfg.inputs[b]);
    return CovMatrix(g);
}

/// One deterministic kernel step: g -> C_b 1 + C_W E[Sigma(g)].
inline CovMatrix kernel_forward(const CovMatrix& g, const NetworkConfig& cfg,
                                const LegendreOptions& opts = {}) {
    const Matrix image = cfg.c_b * ones(g.dim()) +
                         cfg.c_w * mean_sigma(g, cfg.activation, opts.budget, opts.seed,
                                              opts.workers).mat();
    return CovMatrix(detail::symmetrize_exact(image));
}

namespace detail {

inline int sym_param_count(int m) { return m * (m + 1) / 2; }

inline Vector sym_to_params(const Matrix& b) {
    const int m = static_cast<int>(b.rows());
    Vector p(sym_param_count(m));
    int k = 0;
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) p(k++) = b(i, j);
    return p;
}

inline Matrix params_to_sym(const Vector& p, int m) {
    Matrix b(m, m);
    int k = 0;
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) {
            b(i, j) = p(k);
            b(j, i) = p(k);
            ++k;
        }
    return b;
}

// PSD factor of g used to seed the B B^T parameterization.
inline Matrix sym_factor(const CovMatrix& g) { return matrix_root(g).mat(); }

inline Matrix random_sym(int m, std::uint64_t key) {
    Matrix w(m, m);
    std::uint64_t c = 0;
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) {
            const double v = rng::normal(key, c++);
            w(i, j) = v;
            w(j, i) = v;
        }
    return w;
}

} // namespace detail

/// Sum of layer rates along a fixed chain g^(0)..g^(L).
inline LegendreResult chain_rate(const std::vector<CovMatrix>& chain, const NetworkConfig& cfg,
                                 const LegendreOptions& opts = {}) {
    if (static_cast<int>(chain.size()) != cfg.layers + 1)
        throw std::invalid_argument("chain_rate: need L+1 matrices");
    LegendreResult total;
    total.status = LegendreStatus::converged;
    total.value = 0.0;
    total.infinite = false;
    for (int l = 1; l <= cfg.layers; ++l) {
        auto j = conditional_rate_J(chain[l], chain[l - 1], cfg.gammas[l - 1], cfg.c_b, cfg.c_w,
                                    cfg.activation, opts);
        total.iterations += j.iterations;
        if (j.infinite) {
            total.infinite = true;
            total.value = kInf;
            total.status = LegendreStatus::diverged_infeasible;
            return total;
        }
        total.value += j.value;
        if (j.status != LegendreStatus::converged) total.status = j.status;
    }
    return total;
}

/// I_G: infimum of the chain rate over the intermediate covariances, with
/// g^(0) pinned to the initial Gram matrix and g^(L) = g_target. Intermediates
/// are parameterized as B B^T with symmetric B so iterates stay PSD.
inline RateCertificate rate_I_G(const CovMatrix& g_target, const NetworkConfig& cfg,
                                const RateOptions& opts = {}) {
    cfg.validate();
    const int m = cfg.input_count();
    if (g_target.dim() != m) throw std::invalid_argument("rate_I_G: dimension mismatch with inputs");
    const CovMatrix g0 = initial_gram(cfg);
    const int L = cfg.layers;

    RateCertificate cert;
    cert.r_min = Matrix();

    if (L == 1) {
        auto j = conditional_rate_J(g_target, g0, cfg.gammas[0], cfg.c_b, cfg.c_w,
                                    cfg.activation, opts.legendre);
        cert.value = j.as_double();
        cert.infinite = j.infinite;
        cert.chain = {g0, g_target};
        cert.diagnostics.restarts_used = 0;
        cert.diagnostics.best = cert.value;
        cert.diagnostics.worst = cert.value;
        return cert;
    }

    // Surface for the first layer is reusable: g_prev = g0 is fixed.
    KappaSurface surf0(g0, cfg.activation, opts.legendre);

    const int n_inner = L - 1;
    const int np = detail::sym_param_count(m);

    auto unpack = [&](const Vector& p) {
        std::vector<CovMatrix> chain;
        chain.reserve(L + 1);
        chain.push_back(g0);
        for (int l = 0; l < n_inner; ++l) {
            const Matrix b = detail::params_to_sym(p.segment(l * np, np), m);
            chain.emplace_back(ldnn::detail::symmetrize_exact(b * b));
        }
        chain.push_back(g_target);
        return chain;
    };

    std::atomic<long long> eval_count{0};
    auto objective = [&](const Vector& p) -> double {
        ++eval_count;
        std::vector<CovMatrix> chain;
        try {
            chain = unpack(p);
        } catch (const std::invalid_argument&) {
            return kInf;
        }
        double total = 0.0;
        for (int l = 1; l <= L; ++l) {
            LegendreResult j;
            if (l == 1)
                j = conditional_rate_J_on(surf0, chain[l], cfg.gammas[0], cfg.c_b, cfg.c_w,
                                          opts.legendre);
            else
                j = conditional_rate_J(chain[l], chain[l - 1], cfg.gammas[l - 1], cfg.c_b,
                                       cfg.c_w, cfg.activation, opts.legendre);
            if (j.infinite) return kInf;
            total += j.value;
        }
        return total;
    };

    // Multi-start seeds: the kernel chain, straight-line interpolations to the
    // target, and seeded random PSD perturbations of both.
    std::vector<Vector> starts;
    {
        std::vector<CovMatrix> kernel_chain{g0};
        for (int l = 1; l < L; ++l)
            kernel_chain.push_back(kernel_forward(kernel_chain.back(), cfg, opts.legendre));
        Vector p0(n_inner * np);
        for (int l = 0; l < n_inner; ++l)
            p0.segment(l * np, np) = detail::sym_to_params(detail::sym_factor(kernel_chain[l + 1]));
        starts.push_back(p0);

        Vector p1(n_inner * np);
        for (int l = 0; l < n_inner; ++l) {
            const double t = static_cast<double>(l + 1) / L;
            CovMatrix interp(ldnn::detail::symmetrize_exact((1.0 - t) * g0.mat() +
                                                            t * g_target.mat()));
            p1.segment(l * np, np) = detail::sym_to_params(detail::sym_factor(interp));
        }
        starts.push_back(p1);

        const std::uint64_t key = rng::substream(opts.seed, 0x72617465);
        for (int r = static_cast<int>(starts.size()); r < std::max(2, opts.restarts); ++r) {
            const Vector& base = starts[r % 2];
            Vector p = base;
            for (int l = 0; l < n_inner; ++l) {
                const Matrix noise = detail::random_sym(m, rng::substream(key, r * 97 + l));
                Matrix b = detail::params_to_sym(base.segment(l * np, np), m);
                b += 0.25 * (1.0 + frobenius_norm(b)) / (1.0 + frobenius_norm(noise)) * noise;
                p.segment(l * np, np) = detail::sym_to_params(b);
            }
            starts.push_back(p);
        }
    }

    opt::NelderMeadOptions nm;
    nm.max_evals = opts.nm_max_evals;
    struct StartResult { double value = kInf; Vector x; };
    std::vector<StartResult> results(starts.size());

    auto run_start = [&](std::size_t i) {
        auto r = opt::nelder_mead(objective, starts[i], nm);
        results[i].value = r.f;
        results[i].x = r.x;
    };
    if (opts.workers > 1) {
        std::vector<std::thread> pool;
        for (int t = 0; t < opts.workers; ++t)
            pool.emplace_back([&, t]() {
                for (std::size_t i = t; i < starts.size(); i += opts.workers) run_start(i);
            });
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t i = 0; i < starts.size(); ++i) run_start(i);
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < results.size(); ++i)
        if (results[i].value < results[best].value) best = i;  // ties keep lowest index

    cert.diagnostics.restarts_used = static_cast<int>(starts.size());
    cert.diagnostics.evals = eval_count;
    for (const auto& r : results) {
        cert.diagnostics.best = std::min(cert.diagnostics.best, r.value);
        if (std::isfinite(r.value)) cert.diagnostics.worst = std::max(cert.diagnostics.worst, r.value);
    }
    if (!std::isfinite(results[best].value)) {
        cert.value = kInf;
        cert.infinite = true;
        cert.chain = {g0};
        return cert;
    }
    cert.value = results[best].value;
    cert.infinite = false;
    cert.chain = unpack(results[best].x);
    return cert;
}

/// Minimum-norm solution of g^# r = z: r = (g^#)^+ z. For PSD g, Im(g) and
/// Im(g^#) coincide, so the feasibility test on g^# matches the Im(g) form.
inline Matrix optimal_r(const Matrix& z, const CovMatrix& g) {
    const Matrix root = matrix_root(g).mat();
    if (z.rows() != root.rows()) throw std::invalid_argument("optimal_r: dimension mismatch");
    if (!range_contains(root, z, 1e-8))
        throw std::domain_error("optimal_r: Im(z) not contained in Im(g); rate is +inf for this g");
    return pseudo_inverse(root) * z;
}

enum class RateMode { simplified, full_crosscheck };

/// Output rate I_Z: simplified form minimizes over g only, with r eliminated
/// through the Moore-Penrose minimizer; full_crosscheck additionally runs the
/// raw two-variable form with a penalty-enforced constraint g^# r = z and
/// reports the gap between the two routes.
inline RateCertificate rate_I_Z(const Matrix& z, const NetworkConfig& cfg,
                                const RateOptions& opts = {},
                                RateMode mode = RateMode::simplified) {
    cfg.validate();
    const int m = cfg.input_count();
    if (z.rows() != m) throw std::invalid_argument("rate_I_Z: z must have |A| rows");
    if (z.cols() != cfg.n_out) throw std::invalid_argument("rate_I_Z: z must have n_out columns");
    const CovMatrix g0 = initial_gram(cfg);
    const int L = cfg.layers;
    const int np = detail::sym_param_count(m);

    KappaSurface surf0(g0, cfg.activation, opts.legendre);
    RateOptions inner = opts;
    inner.restarts = opts.inner_restarts;

    struct GEval {
        double ig = kInf;
        std::vector<CovMatrix> chain;
        bool feasible = false;
        Matrix root;
    };
    long long eval_count = 0;
    std::optional<DualMatrix> warm;  // maximizer carried across nearby g evaluations
    auto eval_g = [&](const CovMatrix& g, bool need_chain) {
        ++eval_count;
        GEval out;
        out.root = matrix_root(g).mat();
        if (L == 1) {
            auto j = conditional_rate_J_on(surf0, g, cfg.gammas[0], cfg.c_b, cfg.c_w,
                                           opts.legendre, warm ? &*warm : nullptr);
            out.ig = j.as_double();
            if (j.maximizer) warm = j.maximizer;
            if (need_chain) out.chain = {g0, g};
        } else {
            auto c = rate_I_G(g, cfg, inner);
            out.ig = c.as_double();
            if (need_chain) out.chain = c.chain;
        }
        out.feasible = std::isfinite(out.ig);
        return out;
    };

    auto simplified_objective = [&](const Vector& p) -> double {
        CovMatrix g;
        try {
            const Matrix b = detail::params_to_sym(p, m);
            g = CovMatrix(ldnn::detail::symmetrize_exact(b * b));
        } catch (const std::invalid_argument&) {
            return kInf;
        }
        const Matrix root = matrix_root(g).mat();
        if (!range_contains(root, z, 1e-8)) return kInf;
        auto ge = eval_g(g, false);
        if (!ge.feasible) return kInf;
        const Matrix r = pseudo_inverse(root) * z;
        return ge.ig + 0.5 * frobenius_inner(r, r);
    };

    // Starts: the kernel image (plus z z^T pushes so Im(g) covers Im(z)) and
    // seeded perturbations.
    std::vector<Vector> starts;
    {
        std::vector<CovMatrix> kc{g0};
        for (int l = 1; l <= L; ++l) kc.push_back(kernel_forward(kc.back(), cfg, opts.legendre));
        const Matrix zz = z * z.transpose();
        const double zn = frobenius_norm(zz);
        std::vector<Matrix> gs;
        gs.push_back(kc.back().mat());
        if (zn > 0.0) {
            gs.push_back(kc.back().mat() + 0.5 * zz);
            gs.push_back(kc.back().mat() + zz / zn * frobenius_norm(kc.back().mat()));
        }
        for (const auto& g : gs)
            starts.push_back(detail::sym_to_params(detail::sym_factor(
                CovMatrix(ldnn::detail::symmetrize_exact(g)))));
        const std::uint64_t key = rng::substream(opts.seed, 0x697a7374);
        for (int r = static_cast<int>(starts.size()); r < std::max(2, opts.restarts); ++r) {
            Vector base = starts[r % starts.size()];
            const Matrix noise = detail::random_sym(m, rng::substream(key, r));
            Matrix b = detail::params_to_sym(base, m);
            b += 0.3 * (1.0 + frobenius_norm(b)) / (1.0 + frobenius_norm(noise)) * noise;
            starts.push_back(detail::sym_to_params(b));
        }
    }

    opt::NelderMeadOptions nm;
    nm.max_evals = opts.nm_max_evals;
    double best_val = kInf;
    Vector best_x;
    double worst_val = -kInf;
    for (const auto& s : starts) {
        auto r = opt::nelder_mead(simplified_objective, s, nm);
        if (r.f < best_val) {
            best_val = r.f;
            best_x = r.x;
        }
        if (std::isfinite(r.f)) worst_val = std::max(worst_val, r.f);
    }

    RateCertificate cert;
    cert.diagnostics.restarts_used = static_cast<int>(starts.size());
    cert.diagnostics.best = best_val;
    cert.diagnostics.worst = worst_val;

    if (!std::isfinite(best_val)) {
        cert.value = kInf;
        cert.infinite = true;
        cert.chain = {g0};
        cert.diagnostics.evals = eval_count;
        return cert;
    }

    const Matrix b_best = detail::params_to_sym(best_x, m);
    CovMatrix g_best(ldnn::detail::symmetrize_exact(b_best * b_best));
    auto ge_best = eval_g(g_best, true);
    cert.value = best_val;
    cert.infinite = false;
    cert.chain = ge_best.chain;
    cert.r_min = pseudo_inverse(ge_best.root) * z;

    if (mode == RateMode::full_crosscheck) {
        // Joint minimization over (g, r); for fixed g the penalized r-block is
        // quadratic and solved exactly: r = 2mu (I + 2mu g)^{-1} g^# z.
        auto penalized = [&](const Vector& p, double mu, double* residual_out,
                             double* raw_value_out) -> double {
            CovMatrix g;
            try {
                const Matrix b = detail::params_to_sym(p, m);
                g = CovMatrix(ldnn::detail::symmetrize_exact(b * b));
            } catch (const std::invalid_argument&) {
                return kInf;
            }
            auto ge = eval_g(g, false);
            if (!ge.feasible) return kInf;
            const Matrix id = Matrix::Identity(m, m);
            const Matrix r = 2.0 * mu * (id + 2.0 * mu * g.mat()).ldlt().solve(ge.root * z);
            const Matrix viol = ge.root * r - z;
            const double vv = frobenius_inner(viol, viol);
            if (residual_out) *residual_out = std::sqrt(vv);
            if (raw_value_out) *raw_value_out = ge.ig + 0.5 * frobenius_inner(r, r);
            return ge.ig + 0.5 * frobenius_inner(r, r) + mu * vv;
        };

        Vector x = best_x;
        double full_value = kInf, residual = kInf;
        for (double mu = 1e2; mu <= 1e8 + 1.0; mu *= 10.0) {
            auto pen_obj = [&](const Vector& p) { return penalized(p, mu, nullptr, nullptr); };
            opt::NelderMeadOptions pnm;
            pnm.max_evals = opts.nm_max_evals;
            pnm.init_step = 0.05;
            auto r = opt::nelder_mead(pen_obj, x, pnm);
            if (std::isfinite(r.f)) x = r.x;
            penalized(x, mu, &residual, &full_value);
        }
        cert.diagnostics.full_value = full_value;
        cert.diagnostics.gap = std::abs(full_value - cert.value);
        cert.diagnostics.constraint_residual = residual;
    }
    cert.diagnostics.evals = eval_count;
    return cert;
}

} // namespace ldnn
