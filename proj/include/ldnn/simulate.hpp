#pragma once

#include "ldnn/errors.hpp"
#include "ldnn/kappa.hpp"
#include "ldnn/legendre.hpp"
#include "ldnn/matrix.hpp"
#include "ldnn/rate.hpp"
#include "ldnn/rng.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

namespace ldnn {

/// Concrete layer widths at base width v: n_l = ceil(gamma_l * v).
struct WidthSchedule {
    int base_width = 0;       // v, the slowest layer
    std::vector<int> widths;  // n_1..n_L
    int n0 = 1;
    int n_out = 1;

    static WidthSchedule from(const NetworkConfig& cfg, int v) {
        cfg.validate();
        if (v < 1) throw std::invalid_argument("WidthSchedule: v must be >= 1");
        WidthSchedule s;
        s.base_width = v;
        s.n0 = cfg.n0;
        s.n_out = cfg.n_out;
        for (double g : cfg.gammas) {
            if (std::isinf(g))
                throw std::invalid_argument("WidthSchedule: cannot materialize gamma = inf at finite width");
            s.widths.push_back(static_cast<int>(std::ceil(g * v)));
        }
        return s;
    }
};

namespace detail {

// Stream tags for the simulator; disjoint from the kappa sampling stream.
inline constexpr std::uint64_t kWeightTag = 0x57650000;
inline constexpr std::uint64_t kBiasTag = 0x62650000;
inline constexpr std::uint64_t kGramTag = 0x47720000;
inline constexpr std::uint64_t kTailTag = 0x54610000;

inline void fill_scaled_normals(std::uint64_t key, double scale, Matrix& out) {
    std::vector<double> buf(out.size());
    rng::fill_normals(key, 0, buf.size(), buf.data());
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = scale * buf[static_cast<std::size_t>(i)];
}

} // namespace detail

/// One forward pass of the Gaussian network, shared weights across all inputs.
/// Returns the |A| x n_out output matrix scaled by 1/sqrt(v).
inline Matrix sample_network(const NetworkConfig& cfg, const WidthSchedule& sched,
                             std::uint64_t seed) {
    cfg.validate();
    const int m = cfg.input_count();
    Matrix x(cfg.n0, m);
    for (int a = 0; a < m; ++a) x.col(a) = cfg.inputs[a];

    Matrix z;  // current layer state, width x |A|
    int prev_width = cfg.n0;
    const int total_layers = cfg.layers + 1;  // hidden layers plus output map
    for (int l = 1; l <= total_layers; ++l) {
        const int width = (l <= cfg.layers) ? sched.widths[l - 1] : sched.n_out;
        Matrix w(width, prev_width);
        detail::fill_scaled_normals(rng::substream(seed, detail::kWeightTag + l),
                                    std::sqrt(cfg.c_w / prev_width), w);
        Vector b(width);
        {
            Matrix bm(width, 1);
            detail::fill_scaled_normals(rng::substream(seed, detail::kBiasTag + l),
                                        std::sqrt(cfg.c_b), bm);
            b = bm.col(0);
        }
        Matrix pre;
        if (l == 1) {
            pre.noalias() = w * x;
        } else {
            Matrix act_z(z.rows(), z.cols());
            for (Eigen::Index i = 0; i < z.size(); ++i)
                act_z.data()[i] = cfg.activation(z.data()[i]);
            pre.noalias() = w * act_z;
        }
        pre.colwise() += b;
        z = std::move(pre);
        prev_width = width;
    }
    return z.transpose() / std::sqrt(static_cast<double>(sched.base_width));
}

/// The empirical covariance recursion G^(l) = C_b + (C_W/n_l) sum_j Sigma(G^(l-1); N_j),
/// started from the initial Gram matrix. Returns the full chain G^(0)..G^(L).
inline std::vector<CovMatrix> sample_gram_chain_full(const NetworkConfig& cfg,
                                                     const WidthSchedule& sched,
                                                     std::uint64_t seed) {
    cfg.validate();
    const int m = cfg.input_count();
    std::vector<CovMatrix> chain;
    chain.reserve(cfg.layers + 1);
    chain.push_back(initial_gram(cfg));

    for (int l = 1; l <= cfg.layers; ++l) {
        const int n_l = sched.widths[l - 1];
        const Matrix root = matrix_root(chain.back()).mat();
        const std::uint64_t key = rng::substream(seed, detail::kGramTag + l);
        Matrix acc = Matrix::Zero(m, m);
        if (m == 1) {
            // Scalar chain: block-drawn normals, no per-draw matrix work.
            const double rt = root(0, 0);
            double sum = 0.0;
            constexpr int kBlock = 4096;
            double buf[kBlock];
            for (int j = 0; j < n_l; j += kBlock) {
                const int cnt = std::min(kBlock, n_l - j);
                rng::fill_normals(key, static_cast<std::uint64_t>(j), cnt, buf);
                for (int i = 0; i < cnt; ++i) {
                    const double s = cfg.activation(rt * buf[i]);
                    sum += s * s;
                }
            }
            acc(0, 0) = sum;
        } else {
            Vector n(m), y(m), s(m);
            for (int j = 0; j < n_l; ++j) {
                for (int d = 0; d < m; ++d)
                    n(d) = rng::normal(key, static_cast<std::uint64_t>(j) * m + d);
                y.noalias() = root * n;
                for (int d = 0; d < m; ++d) s(d) = cfg.activation(y(d));
                acc.selfadjointView<Eigen::Lower>().rankUpdate(s);
            }
            acc.triangularView<Eigen::StrictlyUpper>() = acc.transpose();
        }
        Matrix g = cfg.c_b * ones(m) + (cfg.c_w / n_l) * acc;
        chain.emplace_back(ldnn::detail::symmetrize_exact(g));
    }
    return chain;
}

inline CovMatrix sample_gram_chain(const NetworkConfig& cfg, const WidthSchedule& sched,
                                   std::uint64_t seed) {
    return sample_gram_chain_full(cfg, sched, seed).back();
}

// ---------------------------------------------------------------------------
// Tail-probability experiments
// ---------------------------------------------------------------------------

enum class TailDirection { above, below };

/// Scalar event summary: a diagonal Gram entry or one coordinate of Z/sqrt(v).
struct TailSummarySpec {
    enum class Kind { gram_diag, output_entry };
    Kind kind = Kind::gram_diag;
    int alpha = 0;    // input index
    int out_col = 0;  // output column (output_entry only)
};

struct TailRow {
    int v = 0;
    long long samples = 0;
    long long hits = 0;
    double p_hat = 0.0;
    double neg_log_p_over_v = 0.0;
    double std_err = 0.0;  // Wilson-interval std error of p_hat
    bool excluded = false; // zero hits: not usable in the fit
};

struct TailFit {
    double slope = 0.0;
    double slope_std_error = 0.0;
    double intercept = 0.0;
    int rows_used = 0;
};

struct TailExperimentResult {
    std::vector<TailRow> rows;
    TailFit fit;
    double predicted_rate = 0.0;
    double relative_gap = 0.0;
};

/// Wilson score std error (z = 1) of a binomial proportion.
inline double wilson_std_error(long long hits, long long n) {
    const double p = static_cast<double>(hits) / n;
    const double inv_n = 1.0 / static_cast<double>(n);
    return std::sqrt(p * (1.0 - p) * inv_n + 0.25 * inv_n * inv_n) / (1.0 + inv_n);
}

inline TailRow make_tail_row(int v, long long samples, long long hits) {
    TailRow r;
    r.v = v;
    r.samples = samples;
    r.hits = hits;
    r.p_hat = static_cast<double>(hits) / samples;
    r.excluded = (hits == 0);
    if (!r.excluded) {
        r.neg_log_p_over_v = -std::log(r.p_hat) / v;
        r.std_err = wilson_std_error(hits, samples);
    }
    return r;
}

/// Row with an exact (analytically known) probability; used when the event
/// probability is computable without sampling.
inline TailRow make_exact_row(int v, double p) {
    TailRow r;
    r.v = v;
    r.samples = 0;
    r.hits = 0;
    r.p_hat = p;
    r.excluded = !(p > 0.0);
    if (!r.excluded) r.neg_log_p_over_v = -std::log(p) / v;
    return r;
}

/// Ordinary least squares of -log p(v) = a v + b over the usable rows; the
/// intercept absorbs subexponential prefactors. The slope std error propagates
/// the Wilson errors by the delta method.
inline TailFit fit_tail_slope(const std::vector<TailRow>& rows) {
    std::vector<const TailRow*> use;
    for (const auto& r : rows)
        if (!r.excluded) use.push_back(&r);
    if (use.size() < 2)
        throw NumericalFailure("tail experiment inconclusive: fewer than two rows with hits");
    double vbar = 0.0, ybar = 0.0;
    for (auto* r : use) {
        vbar += r->v;
        ybar += -std::log(r->p_hat);
    }
    vbar /= use.size();
    ybar /= use.size();
    double sxx = 0.0, sxy = 0.0;
    for (auto* r : use) {
        const double dv = r->v - vbar;
        sxx += dv * dv;
        sxy += dv * (-std::log(r->p_hat));
    }
    TailFit fit;
    fit.rows_used = static_cast<int>(use.size());
    fit.slope = sxy / sxx;
    fit.intercept = ybar - fit.slope * vbar;
    double var = 0.0;
    for (auto* r : use) {
        const double ci = (r->v - vbar) / sxx;
        const double sy = r->p_hat > 0.0 ? r->std_err / r->p_hat : 0.0;  // delta method
        var += ci * ci * sy * sy;
    }
    fit.slope_std_error = std::sqrt(var);
    return fit;
}

namespace detail {

inline double summary_value(const NetworkConfig& cfg, const WidthSchedule& sched,
                            const TailSummarySpec& spec, std::uint64_t sample_seed) {
    if (spec.kind == TailSummarySpec::Kind::gram_diag) {
        if (cfg.input_count() == 1 && cfg.layers >= 1) {
            // Dominant desk-scale case handled without CovMatrix admission cost.
            double g = initial_gram(cfg)(0, 0);
            for (int l = 1; l <= cfg.layers; ++l) {
                const int n_l = sched.widths[l - 1];
                const double rt = std::sqrt(std::max(0.0, g));
                const std::uint64_t key = rng::substream(sample_seed, kGramTag + l);
                double sum = 0.0;
                constexpr int kBlock = 4096;
                double buf[kBlock];
                for (int j = 0; j < n_l; j += kBlock) {
                    const int cnt = std::min(kBlock, n_l - j);
                    rng::fill_normals(key, static_cast<std::uint64_t>(j), cnt, buf);
                    for (int i = 0; i < cnt; ++i) {
                        const double s = cfg.activation(rt * buf[i]);
                        sum += s * s;
                    }
                }
                g = cfg.c_b + cfg.c_w / n_l * sum;
            }
            return g;
        }
        return sample_gram_chain(cfg, sched, sample_seed)(spec.alpha, spec.alpha);
    }
    const Matrix z = sample_network(cfg, sched, sample_seed);
    return z(spec.alpha, spec.out_col);
}

} // namespace detail

/// Predicted exponential decay rate of the event, from the rate-function
/// modules. For Gram events this is I_G at the threshold (diagonal pinned);
/// for output events it is I_Z at the single-entry matrix.
inline double predicted_tail_rate(const NetworkConfig& cfg, double threshold,
                                  const TailSummarySpec& spec, const RateOptions& opts = {}) {
    const int m = cfg.input_count();
    if (spec.kind == TailSummarySpec::Kind::gram_diag) {
        if (m == 1) {
            return rate_I_G(CovMatrix(Matrix::Constant(1, 1, threshold)), cfg, opts).as_double();
        }
        // Pin the diagonal entry, relax the rest with a quadratic pull toward
        // the kernel image; desk-scale approximation.
        RateOptions o = opts;
        CovMatrix typical = initial_gram(cfg);
        for (int l = 0; l < cfg.layers; ++l) typical = kernel_forward(typical, cfg, o.legendre);
        Matrix g = typical.mat();
        g(spec.alpha, spec.alpha) = threshold;
        return rate_I_G(CovMatrix(ldnn::detail::symmetrize_exact(g)), cfg, opts).as_double();
    }
    Matrix z = Matrix::Zero(m, cfg.n_out);
    z(spec.alpha, spec.out_col) = threshold;
    return rate_I_Z(z, cfg, opts, RateMode::simplified).as_double();
}

/// Naive Monte Carlo tail-probability experiment with a least-squares slope
/// fit against the LDP prediction.
inline TailExperimentResult tail_experiment(const NetworkConfig& cfg, double threshold,
                                            TailDirection direction,
                                            const std::vector<int>& v_list,
                                            long long samples_per_v, std::uint64_t seed,
                                            const TailSummarySpec& spec = {},
                                            int workers = 1,
                                            const RateOptions& rate_opts = {}) {
    cfg.validate();
    if (v_list.empty()) throw std::invalid_argument("tail_experiment: empty v list");
    if (samples_per_v < 1) throw std::invalid_argument("tail_experiment: need samples");

    TailExperimentResult out;
    for (int v : v_list) {
        const WidthSchedule sched = WidthSchedule::from(cfg, v);
        const std::uint64_t key_v = rng::substream(seed, detail::kTailTag + static_cast<std::uint64_t>(v));
        const int nw = std::max(1, workers);
        std::vector<long long> hits_by_worker(nw, 0);
        auto run = [&](int wid) {
            long long h = 0;
            for (long long i = wid; i < samples_per_v; i += nw) {
                const double s = detail::summary_value(cfg, sched, spec, rng::substream(key_v, i));
                const bool hit = direction == TailDirection::above ? (s >= threshold)
                                                                   : (s <= threshold);
                if (hit) ++h;
            }
            hits_by_worker[wid] = h;
        };
        if (nw == 1) {
            run(0);
        } else {
            std::vector<std::thread> pool;
            for (int t = 0; t < nw; ++t) pool.emplace_back(run, t);
            for (auto& th : pool) th.join();
        }
        long long hits = 0;
        for (long long h : hits_by_worker) hits += h;
        out.rows.push_back(make_tail_row(v, samples_per_v, hits));
    }

    out.fit = fit_tail_slope(out.rows);
    out.predicted_rate = predicted_tail_rate(cfg, threshold, spec, rate_opts);
    if (std::isfinite(out.predicted_rate) && out.predicted_rate != 0.0)
        out.relative_gap = std::abs(out.fit.slope - out.predicted_rate) / std::abs(out.predicted_rate);
    else
        out.relative_gap = std::abs(out.fit.slope - out.predicted_rate);
    return out;
}

// ---------------------------------------------------------------------------
// Figure data (kappa and kappa* curves over scalar grids)
// ---------------------------------------------------------------------------

struct GridSpec {
    double start = 0.0;
    double stop = 0.0;
    double step = 1.0;

    std::vector<double> points() const {
        if (!(step > 0.0)) throw std::invalid_argument("grid step must be positive");
        std::vector<double> xs;
        for (double x = start; x <= stop + 0.5 * step; x += step) xs.push_back(x);
        return xs;
    }
};

struct FigureData {
    std::vector<std::pair<double, double>> kappa_rows;       // (eta, kappa); inf beyond boundary
    std::vector<std::pair<double, double>> kappa_star_rows;  // (y, kappa*)
};

/// Curves kappa(.;q) and kappa*(.;q) for |A| = 1: closed form for ReLU,
/// quadrature otherwise.
inline FigureData figure_data(const Activation& act, double q_scalar, const GridSpec& eta_grid,
                              const GridSpec& y_grid, const LegendreOptions& opts = {}) {
    const CovMatrix q(Matrix::Constant(1, 1, q_scalar));
    FigureData fig;
    const bool closed = act.is_relu();
    for (double e : eta_grid.points()) {
        DualMatrix eta(Matrix::Constant(1, 1, e));
        KappaEstimate k = closed
            ? kappa_closed_relu_1d(e, q_scalar)
            : kappa_eval(eta, q, act, KappaMethod::quadrature, opts.budget);
        fig.kappa_rows.emplace_back(e, k.as_double());
    }
    KappaSurface surf(q, act, opts);
    for (double y : y_grid.points()) {
        auto res = kappa_star_on(surf, Matrix::Constant(1, 1, y), opts);
        fig.kappa_star_rows.emplace_back(y, res.as_double());
    }
    return fig;
}

} // namespace ldnn
