#pragma once

#include "ldnn/activation.hpp"
#include "ldnn/matrix.hpp"
#include "ldnn/quadrature.hpp"
#include "ldnn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

namespace ldnn {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class KappaMethod { mc, quadrature, closed_relu_1d, series };

inline const char* to_string(KappaMethod m) {
    switch (m) {
        case KappaMethod::mc: return "mc";
        case KappaMethod::quadrature: return "quadrature";
        case KappaMethod::closed_relu_1d: return "closed_relu_1d";
        case KappaMethod::series: return "series";
    }
    return "?";
}

/// One evaluation of kappa(eta;q) together with its estimation metadata.
struct KappaEstimate {
    double value = 0.0;
    bool infinite = false;
    double std_error = 0.0;  // 0 for deterministic methods
    KappaMethod method = KappaMethod::quadrature;
    long long samples_or_order = 0;
    bool unreliable = false;  // heavy-tail MC or unresolved quadrature
    std::string note;

    double as_double() const { return infinite ? kInf : value; }
};

/// sigma_outer(q, N) = s s^T with s_a = sigma((q^# N)_a); rank <= 1, PSD.
inline Matrix sigma_outer(const Matrix& root, const Vector& n, const Activation& act) {
    if (root.cols() != n.size())
        throw std::invalid_argument("sigma_outer: dimension mismatch");
    Vector y = root * n;
    Vector s(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) s(i) = act(y(i));
    return s * s.transpose();
}

inline Matrix sigma_outer(const CovMatrix& q, const Vector& n, const Activation& act) {
    return sigma_outer(matrix_root(q).mat(), n, act);
}

// ---------------------------------------------------------------------------
// Half-normal moments and the ReLU power series
// ---------------------------------------------------------------------------

/// M(k) = E[max(N,0)^k] = 2^{k/2} Gamma((k+1)/2) / (2 sqrt(pi)).
inline double half_moment(int k) {
    if (k < 0) throw std::invalid_argument("half_moment: k must be >= 0");
    return std::exp(0.5 * k * std::log(2.0) + std::lgamma(0.5 * (k + 1))) /
           (2.0 * std::sqrt(M_PI));
}

/// A single term of the kappa power series: multi-indices over A^k and the
/// per-coordinate count profile |ul_alpha, ul_beta|_i (sums to 2k).
struct SeriesTerm {
    int order = 0;
    std::vector<int> alpha;
    std::vector<int> beta;

    std::vector<int> counts(int m) const {
        std::vector<int> c(m, 0);
        for (int v : alpha) ++c[v];
        for (int v : beta) ++c[v];
        return c;
    }
};

/// All |A|^{2k} terms at order k (for brute-force validation at small k).
inline std::vector<SeriesTerm> enumerate_series_terms(int m, int k) {
    std::vector<SeriesTerm> terms;
    const long long total = static_cast<long long>(std::pow(m, 2 * k));
    terms.reserve(total);
    std::vector<int> digits(2 * k, 0);
    for (long long idx = 0; idx < total; ++idx) {
        SeriesTerm t;
        t.order = k;
        t.alpha.assign(digits.begin(), digits.begin() + k);
        t.beta.assign(digits.begin() + k, digits.end());
        terms.push_back(std::move(t));
        for (int d = 0; d < 2 * k; ++d) {
            if (++digits[d] < m) break;
            digits[d] = 0;
        }
    }
    return terms;
}

struct SeriesResult {
    double value = 0.0;
    double truncation_bound = kInf;
    int order = 0;
    bool bound_exceeds_tolerance = false;  // set by callers comparing to a target
    bool valid = true;                     // false when the tail bound swamps the sum
};

namespace detail {

// Geometric tail bound for the exp-moment series: |T_k| <= u^k E[chi2_m^k]/k!
// with u = ||eta||_F * max_i a_i (ReLU obeys |sigma(x)| <= |x|). The returned
// bound covers the evaluation as a double: accumulation roundoff floors it,
// since the sum cannot be more accurate than ~terms * eps even when the
// mathematical tail is far smaller.
inline double series_tail_bound(double u, int m, int K, double partial_sum) {
    double b = 1.0;
    for (int k = 0; k < K + 1; ++k) b *= u * (m + 2.0 * k) / (k + 1.0);  // b = b_{K+1}
    const double rho = 2.0 * u * std::max(1.0, (K + 0.5 * m) / (K + 1.0));
    if (rho >= 1.0 || !(b >= 0.0)) return kInf;
    const double tail_s = b / (1.0 - rho);
    if (partial_sum - tail_s <= 0.0) return kInf;
    const double roundoff = 64.0 * std::numeric_limits<double>::epsilon();
    return -std::log1p(-tail_s / partial_sum) + roundoff;
}

} // namespace detail

/// Power-series evaluation of kappa for ReLU and diagonal q = diag(a), a_i > 0.
/// Terms are aggregated per monomial of the quadratic form <eta, Sigma> rather
/// than enumerated over A^k, which is exact and exponentially cheaper.
inline SeriesResult kappa_relu_series(const DualMatrix& eta, const Vector& a, int K) {
    const int m = static_cast<int>(a.size());
    if (eta.dim() != m) throw std::invalid_argument("kappa_relu_series: dimension mismatch");
    for (int i = 0; i < m; ++i)
        if (!(a(i) > 0.0)) throw std::invalid_argument("kappa_relu_series: diagonal must be positive");

    Vector s = a.cwiseSqrt();

    // Monomials of <eta,Sigma>: coefficient t_l and the two coordinates it touches.
    struct Monomial { double t; int i, j; };
    std::vector<Monomial> mono;
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) {
            const double t = (i == j) ? eta(i, i) : 2.0 * eta(i, j);
            if (t != 0.0) mono.push_back({t, i, j});
        }

    auto coord_factor = [&](int i, int c) -> double {
        return c == 0 ? 1.0 : std::pow(s(i), c) * half_moment(c);
    };

    double total = 1.0;  // k = 0 term
    std::vector<int> expo(m, 0);
    // DFS over compositions of k among the monomials; the multinomial k!/(prod k_l!)
    // cancels against 1/k! leaving prod t^{k_l}/k_l!.
    std::function<double(std::size_t, int, double)> rec =
        [&](std::size_t l, int remaining, double factor) -> double {
            if (l + 1 == mono.size() || remaining == 0) {
                double f = factor;
                if (remaining > 0) {
                    const auto& mn = mono[l];
                    for (int c = 0; c < remaining; ++c) f *= mn.t / (c + 1.0);
                    expo[mn.i] += remaining;
                    expo[mn.j] += remaining;
                }
                double val = f;
                for (int i = 0; i < m; ++i) val *= coord_factor(i, expo[i]);
                if (remaining > 0) {
                    const auto& mn = mono[l];
                    expo[mn.i] -= remaining;
                    expo[mn.j] -= remaining;
                }
                return val;
            }
            double acc = 0.0;
            double f = factor;
            const auto& mn = mono[l];
            for (int c = 0; c <= remaining; ++c) {
                if (c > 0) {
                    f *= mn.t / c;
                    expo[mn.i] += 1;
                    expo[mn.j] += 1;
                }
                acc += rec(l + 1, remaining - c, f);
            }
            expo[mn.i] -= remaining;
            expo[mn.j] -= remaining;
            return acc;
        };

    if (!mono.empty())
        for (int k = 1; k <= K; ++k) total += rec(0, k, 1.0);

    SeriesResult res;
    res.order = K;
    const double u = frobenius_norm(eta.mat()) * a.maxCoeff();
    const double bound = detail::series_tail_bound(u, m, K, total);
    if (total <= 0.0 || !std::isfinite(bound)) {
        res.valid = false;
        res.value = total > 0.0 ? std::log(total) : -kInf;
        res.truncation_bound = kInf;
        return res;
    }
    res.value = std::log(total);
    res.truncation_bound = bound;
    return res;
}

/// Brute-force series over enumerated multi-indices; validation path for small k.
inline double kappa_relu_series_bruteforce(const DualMatrix& eta, const Vector& a, int K) {
    const int m = static_cast<int>(a.size());
    Vector s = a.cwiseSqrt();
    double total = 0.0;
    double kfact = 1.0;
    for (int k = 0; k <= K; ++k) {
        if (k > 0) kfact *= k;
        double term = 0.0;
        for (const auto& t : enumerate_series_terms(m, k)) {
            double prod = 1.0;
            const auto c = t.counts(m);
            for (int i = 0; i < m; ++i)
                if (c[i] > 0) prod *= std::pow(s(i), c[i]) * half_moment(c[i]);
            for (int l = 0; l < k; ++l) prod *= eta(t.alpha[l], t.beta[l]);
            term += prod;
        }
        total += term / kfact;
    }
    return std::log(total);
}

/// First-order (k=1) term of the series: the small-eta linearization of kappa.
inline double first_order_kappa(const DualMatrix& eta, const Vector& a) {
    const int m = static_cast<int>(a.size());
    if (eta.dim() != m) throw std::invalid_argument("first_order_kappa: dimension mismatch");
    Vector s = a.cwiseSqrt();
    const double m1 = half_moment(1), m2 = half_moment(2);
    double acc = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            acc += (i == j) ? eta(i, i) * a(i) * m2
                            : eta(i, j) * s(i) * s(j) * m1 * m1;
    return acc;
}

// ---------------------------------------------------------------------------
// Closed form: 1-D ReLU
// ---------------------------------------------------------------------------

/// kappa(eta; q) = log(1/2 + (1/2)(1 - 2 eta q)^{-1/2}) for eta*q < 1/2.
inline KappaEstimate kappa_closed_relu_1d(double eta, double q) {
    KappaEstimate est;
    est.method = KappaMethod::closed_relu_1d;
    const double x = 1.0 - 2.0 * eta * q;
    if (x <= 0.0) {
        est.infinite = true;
        est.value = kInf;
        return est;
    }
    est.value = std::log(0.5 + 0.5 / std::sqrt(x));
    return est;
}

/// d/d eta of the 1-D ReLU closed form: q u^3/(1+u), u = (1-2 eta q)^{-1/2}.
inline double kappa_closed_relu_1d_grad(double eta, double q) {
    const double x = 1.0 - 2.0 * eta * q;
    if (x <= 0.0) return kInf;
    const double u = 1.0 / std::sqrt(x);
    return q * u * u * u / (1.0 + u);
}

// ---------------------------------------------------------------------------
// Deterministic quadrature on a precomputed Gaussian mesh (|A| <= 2)
// ---------------------------------------------------------------------------

/// Precomputed evaluation tables for kappa(.;q) with |A| in {1,2}: the entries
/// of Sigma(q;N) at every mesh point, plus asymptotic ray slopes used to flag
/// divergence and truncation-radius adequacy.
class KernelMesh {
public:
    KernelMesh(const CovMatrix& q, const Activation& act, int order = 64, double radius = 60.0)
        : dim_(static_cast<int>(q.dim())), radius_(radius) {
        if (dim_ < 1 || dim_ > 2)
            throw std::invalid_argument("KernelMesh: quadrature supports |A| <= 2 only");
        root_ = matrix_root(q).mat();
        const int n_rad = order, n_ang = order;
        build_tables(act, n_rad, n_ang, main_);
        build_tables(act, n_rad + 16, n_ang + 16, check_);
        build_ray_table(act);
    }

    int dim() const { return dim_; }
    const Matrix& root() const { return root_; }

    /// Largest asymptotic quadratic coefficient of <eta, Sigma(r w)> / r^2 over rays w.
    double divergence_coefficient(const DualMatrix& eta) const {
        double qmax = -kInf;
        for (const auto& t : rays_) qmax = std::max(qmax, dot(eta, t));
        return qmax;
    }

    struct Eval {
        double kappa = 0.0;
        Matrix grad;
        bool infinite = false;
        bool unreliable = false;
        double err_estimate = 0.0;
        std::string note;
    };

    /// want_check = false skips the higher-order verification pass (solver hot
    /// path); divergence and truncation-radius flags are still produced.
    Eval evaluate(const DualMatrix& eta, bool want_grad, bool want_check = true) const {
        Eval out;
        const double qmax = divergence_coefficient(eta);
        if (qmax >= 0.5 - 1e-12) {
            out.infinite = true;
            out.kappa = kInf;
            return out;
        }
        // Tail beyond the truncation radius must be negligible for this eta.
        if ((0.5 - qmax) * radius_ * radius_ < 60.0) {
            out.unreliable = true;
            out.note = "truncation radius too small for this eta";
        }
        double g_main[3], g_check[3];
        const double k_main = accumulate(main_, eta, want_grad, g_main);
        out.kappa = k_main;
        if (want_check) {
            const double k_check = accumulate(check_, eta, want_grad, g_check);
            out.err_estimate = std::abs(k_main - k_check);
            if (out.err_estimate > 1e-7 * (1.0 + std::abs(k_main))) out.unreliable = true;
        }
        if (want_grad) {
            out.grad = Matrix(dim_, dim_);
            if (dim_ == 1) {
                out.grad(0, 0) = g_main[0];
            } else {
                out.grad(0, 0) = g_main[0];
                out.grad(0, 1) = out.grad(1, 0) = g_main[1];
                out.grad(1, 1) = g_main[2];
            }
        }
        return out;
    }

    /// E[Sigma(q;N)]; the gradient of kappa at eta = 0.
    Matrix mean_sigma() const {
        Matrix mean = Matrix::Zero(dim_, dim_);
        const auto& t = main_;
        if (dim_ == 1) {
            double acc = 0.0;
            for (std::size_t i = 0; i < t.w.size(); ++i) acc += t.w[i] * t.s00[i];
            mean(0, 0) = acc;
        } else {
            double a00 = 0, a01 = 0, a11 = 0;
            for (std::size_t i = 0; i < t.w.size(); ++i) {
                a00 += t.w[i] * t.s00[i];
                a01 += t.w[i] * t.s01[i];
                a11 += t.w[i] * t.s11[i];
            }
            mean(0, 0) = a00;
            mean(0, 1) = mean(1, 0) = a01;
            mean(1, 1) = a11;
        }
        return mean;
    }

private:
    struct Tables {
        std::vector<double> w;
        std::vector<double> logw;           // log weights, for the log-sum-exp pass
        std::vector<double> s00, s01, s11;  // entries of Sigma at each point
    };
    struct RayTriple { double t00, t01, t11; };

    static double dot(const DualMatrix& eta, const RayTriple& t) {
        if (eta.dim() == 1) return eta(0, 0) * t.t00;
        return eta(0, 0) * t.t00 + 2.0 * eta(0, 1) * t.t01 + eta(1, 1) * t.t11;
    }

    void build_tables(const Activation& act, int n_rad, int n_ang, Tables& tab) {
        if (dim_ == 1) {
            auto mesh = quad::GaussianMesh::build_1d(radius_, n_rad);
            tab.w = mesh.w;
            tab.logw.resize(mesh.size());
            for (std::size_t i = 0; i < mesh.size(); ++i) tab.logw[i] = std::log(mesh.w[i]);
            tab.s00.resize(mesh.size());
            for (std::size_t i = 0; i < mesh.size(); ++i) {
                const double s = act(root_(0, 0) * mesh.px[i]);
                tab.s00[i] = s * s;
            }
        } else {
            std::vector<double> angles;
            for (int r = 0; r < 2; ++r) {
                const double nx = root_(r, 0), ny = root_(r, 1);
                if (nx * nx + ny * ny > 0.0 && !act.breakpoints().empty()) {
                    const double th = std::atan2(ny, nx) + M_PI / 2.0;  // kink line direction
                    angles.push_back(th);
                    angles.push_back(th + M_PI);
                }
            }
            auto mesh = quad::GaussianMesh::build_2d(angles, radius_, n_rad, n_ang);
            tab.w = mesh.w;
            tab.logw.resize(mesh.size());
            for (std::size_t i = 0; i < mesh.size(); ++i) tab.logw[i] = std::log(mesh.w[i]);
            tab.s00.resize(mesh.size());
            tab.s01.resize(mesh.size());
            tab.s11.resize(mesh.size());
            for (std::size_t i = 0; i < mesh.size(); ++i) {
                const double y0 = root_(0, 0) * mesh.px[i] + root_(0, 1) * mesh.py[i];
                const double y1 = root_(1, 0) * mesh.px[i] + root_(1, 1) * mesh.py[i];
                const double s0 = act(y0), s1 = act(y1);
                tab.s00[i] = s0 * s0;
                tab.s01[i] = s0 * s1;
                tab.s11[i] = s1 * s1;
            }
        }
    }

    void build_ray_table(const Activation& act) {
        constexpr int kAngles = 2048;
        if (dim_ == 1) {
            for (int dir : {+1, -1}) {
                const double a = act.asymptotic_slope(root_(0, 0) * dir);
                rays_.push_back({a * a, 0.0, 0.0});
            }
        } else {
            rays_.reserve(kAngles);
            for (int k = 0; k < kAngles; ++k) {
                const double th = 2.0 * M_PI * k / kAngles;
                const double wx = std::cos(th), wy = std::sin(th);
                const double a0 = act.asymptotic_slope(root_(0, 0) * wx + root_(0, 1) * wy);
                const double a1 = act.asymptotic_slope(root_(1, 0) * wx + root_(1, 1) * wy);
                rays_.push_back({a0 * a0, a0 * a1, a1 * a1});
            }
        }
    }

    // log sum_i w_i exp(<eta, Sigma_i>) with the max shift taken over the full
    // per-point log terms log(w_i) + x_i (shifting over x_i alone underflows:
    // far points carry huge exponents but negligible weight). Optional gradient
    // accumulators share the pass (ratio of tilted means).
    double accumulate(const Tables& t, const DualMatrix& eta, bool want_grad,
                      double grad_out[3]) const {
        const std::size_t n = t.w.size();
        const bool two = (dim_ == 2);
        const double e00 = eta(0, 0);
        const double e01 = two ? 2.0 * eta(0, 1) : 0.0;
        const double e11 = two ? eta(1, 1) : 0.0;
        double mx = -kInf;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = two ? e00 * t.s00[i] + e01 * t.s01[i] + e11 * t.s11[i]
                                 : e00 * t.s00[i];
            const double term = t.logw[i] + x;
            if (term > mx) mx = term;
        }
        double den = 0.0, n00 = 0.0, n01 = 0.0, n11 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = two ? e00 * t.s00[i] + e01 * t.s01[i] + e11 * t.s11[i]
                                 : e00 * t.s00[i];
            const double ew = std::exp(t.logw[i] + x - mx);
            den += ew;
            if (want_grad) {
                n00 += ew * t.s00[i];
                if (two) {
                    n01 += ew * t.s01[i];
                    n11 += ew * t.s11[i];
                }
            }
        }
        if (want_grad) {
            grad_out[0] = n00 / den;
            grad_out[1] = n01 / den;
            grad_out[2] = n11 / den;
        }
        return mx + std::log(den);
    }

    int dim_;
    double radius_;
    Matrix root_;
    Tables main_, check_;
    std::vector<RayTriple> rays_;
};

// ---------------------------------------------------------------------------
// Monte Carlo with counter-based common random numbers
// ---------------------------------------------------------------------------

struct McOptions {
    long long samples = 1'000'000;
    std::uint64_t seed = 0;
    int workers = 1;
};

struct McKappaResult {
    double kappa = 0.0;
    double std_error = 0.0;
    bool infinite = false;
    bool unreliable = false;
    Matrix grad;           // ratio estimator, set when requested
    Matrix grad_std_error; // delete-batch jackknife per entry
    std::string note;
};

namespace detail {

struct McBatch {
    double mx = -kInf;       // max exponent in batch
    double den = 0.0;        // sum exp(x - mx)
    std::vector<double> num; // per Sigma entry: sum Sigma exp(x - mx)
    long long count = 0;
};

// One pass over samples [lo, hi); Sigma entries indexed (00,01,11,...) upper triangle.
inline void mc_scan(const Matrix& root, const Activation& act, const DualMatrix* eta,
                    std::uint64_t key, long long lo, long long hi, bool want_grad,
                    std::size_t topk, McBatch& out,
                    std::priority_queue<double, std::vector<double>, std::greater<double>>* heap) {
    const int m = static_cast<int>(root.rows());
    const int entries = m * (m + 1) / 2;
    out.num.assign(want_grad ? entries : 0, 0.0);
    Vector n(m), y(m), s(m);
    std::vector<double> sig(entries);
    for (long long i = lo; i < hi; ++i) {
        for (int d = 0; d < m; ++d) n(d) = rng::normal(key, static_cast<std::uint64_t>(i) * m + d);
        y.noalias() = root * n;
        for (int d = 0; d < m; ++d) s(d) = act(y(d));
        double x = 0.0;
        int e = 0;
        for (int a = 0; a < m; ++a)
            for (int b = a; b < m; ++b, ++e) {
                sig[e] = s(a) * s(b);
                x += (a == b ? 1.0 : 2.0) * (eta ? (*eta)(a, b) : 0.0) * sig[e];
            }
        if (x > out.mx) {
            const double rescale = std::exp(out.mx - x);
            out.den *= rescale;
            for (auto& v : out.num) v *= rescale;
            out.mx = x;
        }
        const double ew = std::exp(x - out.mx);
        out.den += ew;
        if (want_grad) {
            e = 0;
            for (int a = 0; a < m; ++a)
                for (int b = a; b < m; ++b, ++e) out.num[e] += ew * sig[e];
        }
        if (heap) {
            if (heap->size() < topk) heap->push(x);
            else if (x > heap->top()) {
                heap->pop();
                heap->push(x);
            }
        }
        ++out.count;
    }
}

} // namespace detail

/// Monte Carlo estimate of kappa (and optionally its gradient) with fixed-seed
/// counter-based streams: the same seed reuses the same normals for every eta,
/// so eta -> kappa_hat(eta;q) is a smooth surface for the Legendre solver.
inline McKappaResult mc_kappa(const DualMatrix* eta, const CovMatrix& q, const Activation& act,
                              const McOptions& opts, bool want_grad) {
    const int m = static_cast<int>(q.dim());
    const Matrix root = matrix_root(q).mat();
    const std::uint64_t key = rng::substream(opts.seed, 0x6b617070);  // kappa sampling stream
    const long long n = std::max<long long>(1, opts.samples);
    const int nb = static_cast<int>(std::min<long long>(1024, n));
    const std::size_t topk = static_cast<std::size_t>(std::max<long long>(1, n / 1000));

    std::vector<detail::McBatch> batches(nb);
    using MinHeap = std::priority_queue<double, std::vector<double>, std::greater<double>>;
    const int workers = std::max(1, opts.workers);
    std::vector<MinHeap> heaps(workers);

    auto run = [&](int wid) {
        for (int b = wid; b < nb; b += workers) {
            const long long lo = n * b / nb, hi = n * (b + 1) / nb;
            detail::mc_scan(root, act, eta, key, lo, hi, want_grad, topk, batches[b], &heaps[wid]);
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(run, t);
        for (auto& th : pool) th.join();
    }

    // Merge in fixed batch order under a global max shift.
    double gmax = -kInf;
    for (const auto& b : batches) gmax = std::max(gmax, b.mx);
    const int entries = m * (m + 1) / 2;
    std::vector<double> bden(nb), bcount(nb);
    std::vector<std::vector<double>> bnum(nb);
    double den = 0.0;
    std::vector<double> num(want_grad ? entries : 0, 0.0);
    for (int b = 0; b < nb; ++b) {
        const double sc = std::exp(batches[b].mx - gmax);
        bden[b] = batches[b].den * sc;
        bcount[b] = static_cast<double>(batches[b].count);
        den += bden[b];
        if (want_grad) {
            bnum[b].resize(entries);
            for (int e = 0; e < entries; ++e) {
                bnum[b][e] = batches[b].num[e] * sc;
                num[e] += bnum[b][e];
            }
        }
    }

    McKappaResult res;
    res.kappa = gmax + std::log(den / static_cast<double>(n));
    if (res.kappa > 700.0) {
        res.infinite = true;
        res.note = "running estimate exceeded overflow guard";
    }

    // Delete-batch jackknife.
    if (nb > 1) {
        std::vector<double> loo(nb);
        double mean = 0.0;
        for (int b = 0; b < nb; ++b) {
            loo[b] = gmax + std::log((den - bden[b]) / (static_cast<double>(n) - bcount[b]));
            mean += loo[b];
        }
        mean /= nb;
        double ss = 0.0;
        for (int b = 0; b < nb; ++b) ss += (loo[b] - mean) * (loo[b] - mean);
        res.std_error = std::sqrt(ss * (nb - 1.0) / nb);
    }

    if (want_grad) {
        res.grad = Matrix(m, m);
        res.grad_std_error = Matrix::Zero(m, m);
        int e = 0;
        for (int a = 0; a < m; ++a)
            for (int b = a; b < m; ++b, ++e) {
                res.grad(a, b) = res.grad(b, a) = num[e] / den;
                if (nb > 1) {
                    double mean = 0.0;
                    std::vector<double> loo(nb);
                    for (int k = 0; k < nb; ++k) {
                        loo[k] = (num[e] - bnum[k][e]) / (den - bden[k]);
                        mean += loo[k];
                    }
                    mean /= nb;
                    double ss = 0.0;
                    for (int k = 0; k < nb; ++k) ss += (loo[k] - mean) * (loo[k] - mean);
                    const double se = std::sqrt(ss * (nb - 1.0) / nb);
                    res.grad_std_error(a, b) = res.grad_std_error(b, a) = se;
                }
            }
    }

    // Heavy-tail diagnostic: share of the top 0.1% order statistics.
    MinHeap merged;
    for (auto& h : heaps) {
        while (!h.empty()) {
            if (merged.size() < topk) merged.push(h.top());
            else if (h.top() > merged.top()) {
                merged.pop();
                merged.push(h.top());
            }
            h.pop();
        }
    }
    double top_sum = 0.0;
    while (!merged.empty()) {
        top_sum += std::exp(merged.top() - gmax);
        merged.pop();
    }
    if (top_sum > 0.5 * den) {
        res.unreliable = true;
        res.note = "heavy-tail unreliable: top 0.1% of samples dominate the estimate";
    }
    return res;
}

// ---------------------------------------------------------------------------
// Public evaluators
// ---------------------------------------------------------------------------

/// Radius of the ball {||eta||_F < (2 C ||q^#||_F)^{-2}} on which kappa is
/// guaranteed finite. Returns +inf for q = 0.
inline double finiteness_radius(const CovMatrix& q, const Activation& act) {
    const double root_norm = frobenius_norm(matrix_root(q).mat());
    if (root_norm == 0.0) return kInf;
    const double c = growth_bound(act);
    const double d = 2.0 * c * root_norm;
    return 1.0 / (d * d);
}

inline bool is_diagonal(const Matrix& q) {
    const double scale = 1.0 + q.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (Eigen::Index j = 0; j < q.cols(); ++j)
            if (i != j && std::abs(q(i, j)) > 1e-14 * scale) return false;
    return true;
}

/// kappa(eta;q) = log E[exp(<eta, Sigma(q;N)>)] by the requested method.
/// budget: samples for mc, per-axis order for quadrature, truncation order for series.
inline KappaEstimate kappa_eval(const DualMatrix& eta, const CovMatrix& q, const Activation& act,
                                KappaMethod method, long long budget = 0,
                                std::uint64_t seed = 0, int workers = 1) {
    if (eta.dim() != q.dim()) throw std::invalid_argument("kappa_eval: dimension mismatch");
    KappaEstimate est;
    est.method = method;
    switch (method) {
        case KappaMethod::closed_relu_1d: {
            if (q.dim() != 1 || !act.is_relu())
                throw std::invalid_argument("kappa_eval: closed form requires |A|=1 and ReLU");
            est = kappa_closed_relu_1d(eta(0, 0), q(0, 0));
            return est;
        }
        case KappaMethod::quadrature: {
            if (q.dim() > 2)
                throw std::invalid_argument("kappa_eval: quadrature requires |A| <= 2");
            const int order = budget > 0 ? static_cast<int>(budget) : 64;
            KernelMesh mesh(q, act, order);
            auto ev = mesh.evaluate(eta, false);
            if (ev.unreliable && !ev.infinite && ev.note.find("radius") != std::string::npos) {
                // One-off retry with a radius adapted to this eta.
                const double c = 0.5 - mesh.divergence_coefficient(eta);
                const double bigger = std::min(std::sqrt(60.0 / c) * 1.5, 2000.0);
                KernelMesh wide(q, act, order, bigger);
                ev = wide.evaluate(eta, false);
            }
            est.value = ev.kappa;
            est.infinite = ev.infinite;
            est.unreliable = ev.unreliable;
            est.note = ev.note;
            est.samples_or_order = order;
            return est;
        }
        case KappaMethod::series: {
            if (!act.is_relu())
                throw std::invalid_argument("kappa_eval: series requires ReLU");
            if (!is_diagonal(q.mat()))
                throw std::invalid_argument("kappa_eval: series requires diagonal q");
            const int order = budget > 0 ? static_cast<int>(budget) : 16;
            auto sr = kappa_relu_series(eta, q.mat().diagonal(), order);
            est.value = sr.value;
            est.samples_or_order = order;
            est.unreliable = !sr.valid;
            if (!sr.valid) est.note = "series tail bound not under control at this order";
            return est;
        }
        case KappaMethod::mc: {
            McOptions opts;
            opts.samples = budget > 0 ? budget : 1'000'000;
            opts.seed = seed;
            opts.workers = workers;
            auto r = mc_kappa(&eta, q, act, opts, false);
            est.value = r.infinite ? kInf : r.kappa;
            est.infinite = r.infinite;
            est.std_error = r.std_error;
            est.unreliable = r.unreliable;
            est.note = r.note;
            est.samples_or_order = opts.samples;
            return est;
        }
    }
    throw std::logic_error("kappa_eval: unknown method");
}

struct GradientEstimate {
    Matrix grad;
    Matrix std_error;  // zero for deterministic methods
    bool infinite = false;
    bool unreliable = false;
};

/// nabla_eta kappa = E[Sigma e^{<eta,Sigma>}] / E[e^{<eta,Sigma>}], sharing
/// random numbers with kappa_eval at the same seed.
inline GradientEstimate kappa_gradient(const DualMatrix& eta, const CovMatrix& q,
                                       const Activation& act, long long budget = 0,
                                       std::uint64_t seed = 0, int workers = 1) {
    GradientEstimate out;
    const int m = static_cast<int>(q.dim());
    out.std_error = Matrix::Zero(m, m);
    if (m == 1 && act.is_relu()) {
        const double g = kappa_closed_relu_1d_grad(eta(0, 0), q(0, 0));
        out.infinite = !std::isfinite(g);
        out.grad = Matrix::Constant(1, 1, g);
        return out;
    }
    if (m <= 2) {
        const int order = budget > 0 ? static_cast<int>(budget) : 64;
        KernelMesh mesh(q, act, order);
        auto ev = mesh.evaluate(eta, true);
        out.grad = ev.infinite ? Matrix::Constant(m, m, kInf) : ev.grad;
        out.infinite = ev.infinite;
        out.unreliable = ev.unreliable;
        return out;
    }
    McOptions opts;
    opts.samples = budget > 0 ? budget : 1'000'000;
    opts.seed = seed;
    opts.workers = workers;
    auto r = mc_kappa(&eta, q, act, opts, true);
    out.grad = r.grad;
    out.std_error = r.grad_std_error;
    out.infinite = r.infinite;
    out.unreliable = r.unreliable;
    return out;
}

/// E[Sigma(q;N)]: deterministic quadrature for |A| <= 2, Monte Carlo otherwise.
inline CovMatrix mean_sigma(const CovMatrix& q, const Activation& act, long long budget = 0,
                            std::uint64_t seed = 0, int workers = 1) {
    const int m = static_cast<int>(q.dim());
    if (m <= 2) {
        const int order = budget > 0 ? static_cast<int>(budget) : 64;
        KernelMesh mesh(q, act, order);
        return CovMatrix(detail::symmetrize_exact(mesh.mean_sigma()));
    }
    McOptions opts;
    opts.samples = budget > 0 ? budget : 1'000'000;
    opts.seed = seed;
    opts.workers = workers;
    DualMatrix zero = DualMatrix::zero(m);
    auto r = mc_kappa(&zero, q, act, opts, true);
    return CovMatrix(detail::symmetrize_exact(r.grad));
}

} // namespace ldnn
