#pragma once

#include "ldnn/kappa.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <string>

namespace ldnn {

enum class LegendreStatus { converged, boundary_limit, diverged_infeasible };

inline const char* to_string(LegendreStatus s) {
    switch (s) {
        case LegendreStatus::converged: return "converged";
        case LegendreStatus::boundary_limit: return "boundary_limit";
        case LegendreStatus::diverged_infeasible: return "diverged_infeasible";
    }
    return "?";
}

struct LegendreResult {
    double value = 0.0;  // >= 0; +inf when infinite is set
    bool infinite = false;
    std::optional<DualMatrix> maximizer;
    LegendreStatus status = LegendreStatus::boundary_limit;
    int iterations = 0;
    double residual = kInf;  // ||y - grad kappa(maximizer)||_F

    double as_double() const { return infinite ? kInf : value; }
};

struct LegendreOptions {
    double tol = 1e-7;     // stop when ||y - grad|| <= tol * (1 + ||y||_F)
    int max_iters = 500;
    double ceiling = 1e6;  // objective above this => infeasible (sup = +inf)
    long long budget = 0;  // quadrature order (|A|<=2) or MC samples (|A|>2)
    std::uint64_t seed = 0;
    int workers = 1;
};

/// Value-and-gradient oracle for kappa(.;q), bound to one q. Uses the closed
/// form for 1-D ReLU, a precomputed quadrature mesh for |A| <= 2, and common
/// random number Monte Carlo beyond that.
class KappaSurface {
public:
    KappaSurface(const CovMatrix& q, const Activation& act, const LegendreOptions& opts = {})
        : q_(q), act_(act), opts_(opts), dim_(static_cast<int>(q.dim())) {
        if (dim_ == 1 && act.is_relu()) {
            mode_ = Mode::closed;
        } else if (dim_ <= 2) {
            mode_ = Mode::mesh;
            const int order = opts.budget > 0 ? static_cast<int>(opts.budget) : 64;
            mesh_ = std::make_unique<KernelMesh>(q, act, order);
        } else {
            mode_ = Mode::mc;
        }
    }

    struct VG {
        double value = 0.0;
        Matrix grad;
        bool infinite = false;
        bool unreliable = false;
    };

    VG eval(const DualMatrix& eta) const {
        VG out;
        switch (mode_) {
            case Mode::closed: {
                auto k = kappa_closed_relu_1d(eta(0, 0), q_(0, 0));
                out.value = k.as_double();
                out.infinite = k.infinite;
                out.grad = Matrix::Constant(1, 1,
                    k.infinite ? kInf : kappa_closed_relu_1d_grad(eta(0, 0), q_(0, 0)));
                return out;
            }
            case Mode::mesh: {
                auto ev = mesh_->evaluate(eta, true, /*want_check=*/false);
                out.value = ev.infinite ? kInf : ev.kappa;
                out.grad = ev.infinite ? Matrix::Constant(dim_, dim_, kInf) : ev.grad;
                out.infinite = ev.infinite;
                out.unreliable = ev.unreliable;
                return out;
            }
            case Mode::mc: {
                McOptions mo;
                mo.samples = opts_.budget > 0 ? opts_.budget : 200'000;
                mo.seed = opts_.seed;
                mo.workers = opts_.workers;
                auto r = mc_kappa(&eta, q_, act_, mo, true);
                out.value = r.infinite ? kInf : r.kappa;
                out.grad = r.grad;
                out.infinite = r.infinite;
                out.unreliable = r.unreliable;
                return out;
            }
        }
        return out;
    }

    Matrix mean() const {
        if (mode_ == Mode::closed) return Matrix::Constant(1, 1, 0.5 * q_(0, 0));
        if (mode_ == Mode::mesh) return mesh_->mean_sigma();
        return eval(DualMatrix::zero(dim_)).grad;
    }

    double safe_radius() const { return finiteness_radius(q_, act_); }
    int dim() const { return dim_; }
    const CovMatrix& q() const { return q_; }
    const Activation& activation() const { return act_; }

private:
    enum class Mode { closed, mesh, mc };
    CovMatrix q_;
    Activation act_;
    LegendreOptions opts_;
    int dim_;
    Mode mode_ = Mode::mc;
    std::unique_ptr<KernelMesh> mesh_;
};

/// kappa*(y;q) = sup_eta { <eta,y> - kappa(eta;q) } by ascent on the concave
/// dual: Barzilai-Borwein steps with backtracking that rejects any step where
/// the kappa evaluation is flagged infinite or unreliable. Starts at eta = 0,
/// which keeps the running best value nonnegative.
inline LegendreResult kappa_star_on(const KappaSurface& surf, const Matrix& y_in,
                                    const LegendreOptions& opts = {},
                                    const DualMatrix* warm_start = nullptr) {
    detail::require_square_symmetric(y_in, "kappa_star: y");
    const Matrix y = detail::symmetrize_exact(y_in);
    if (y.rows() != surf.dim()) throw std::invalid_argument("kappa_star: dimension mismatch");

    const double y_norm = frobenius_norm(y);
    const double grad_tol = opts.tol * (1.0 + y_norm);

    LegendreResult res;
    auto objective = [&](const DualMatrix& eta, const KappaSurface::VG& vg) {
        return frobenius_inner(eta.mat(), y) - vg.value;
    };

    DualMatrix eta = DualMatrix::zero(surf.dim());
    KappaSurface::VG vg = surf.eval(eta);
    double h = objective(eta, vg);
    if (warm_start && warm_start->dim() == surf.dim()) {
        auto wvg = surf.eval(*warm_start);
        if (!wvg.infinite && !wvg.unreliable) {
            const double wh = objective(*warm_start, wvg);
            if (wh > h) {
                eta = *warm_start;
                vg = wvg;
                h = wh;
            }
        }
    }

    double best_h = std::max(0.0, h);
    DualMatrix best_eta = eta;
    double best_residual = frobenius_norm(y - vg.grad);

    Matrix grad = y - vg.grad;
    double step = 0.0;
    Matrix prev_eta_mat, prev_grad;
    double last_improvement = kInf;

    for (int it = 0; it < opts.max_iters; ++it) {
        const double gnorm = frobenius_norm(grad);
        // A small residual alone is not enough when the sup is approached
        // along an unbounded ray (the gradient decays while the value still
        // climbs); require the last accepted step to have stopped paying too.
        if (gnorm <= grad_tol &&
            (it == 0 || last_improvement <= 1e-10 * (1.0 + std::abs(h)))) {
            res.status = LegendreStatus::converged;
            res.value = std::max(0.0, h);
            res.maximizer = eta;
            res.iterations = it;
            res.residual = gnorm;
            return res;
        }
        if (h > opts.ceiling) break;  // unbounded direction

        if (it == 0) {
            const double radius = surf.safe_radius();
            step = std::isfinite(radius) ? std::min(1.0, 0.25 * radius / gnorm) : 1.0;
        } else {
            // BB2 spectral step from the last displacement pair.
            const Matrix d_eta = eta.mat() - prev_eta_mat;
            const Matrix d_grad = grad - prev_grad;
            const double denom = frobenius_inner(d_grad, d_grad);
            const double numer = std::abs(frobenius_inner(d_eta, d_grad));
            if (denom > 0.0 && numer > 0.0) step = numer / denom;
            step = std::clamp(step, 1e-14, 1e290);  // suprema along rays need huge steps
        }

        bool accepted = false;
        double alpha = step;
        for (int bt = 0; bt < 64; ++bt, alpha *= 0.5) {
            DualMatrix cand(eta.mat() + alpha * grad);
            auto cvg = surf.eval(cand);
            if (cvg.infinite || cvg.unreliable) continue;
            const double ch = objective(cand, cvg);
            const bool armijo = ch >= h + 1e-4 * alpha * gnorm * gnorm;
            const bool monotone = ch >= h - 1e-15 * (1.0 + std::abs(h));
            if (armijo || (bt >= 40 && monotone)) {
                prev_eta_mat = eta.mat();
                prev_grad = grad;
                last_improvement = ch - h;
                eta = cand;
                vg = cvg;
                h = ch;
                grad = y - vg.grad;
                accepted = true;
                break;
            }
        }
        if (h > best_h) {
            best_h = h;
            best_eta = eta;
            best_residual = frobenius_norm(grad);
        }
        if (!accepted) {
            // No admissible ascent step left; converged if the residual is met.
            if (frobenius_norm(grad) <= grad_tol) {
                res.status = LegendreStatus::converged;
                res.value = std::max(0.0, h);
                res.maximizer = eta;
                res.residual = frobenius_norm(grad);
                return res;
            }
            break;
        }
        res.iterations = it + 1;
    }

    if (h > opts.ceiling) {
        res.status = LegendreStatus::diverged_infeasible;
        res.infinite = true;
        res.value = kInf;
        res.residual = frobenius_norm(grad);
        return res;
    }
    res.status = LegendreStatus::boundary_limit;
    res.value = best_h;
    res.maximizer = best_eta;
    res.residual = best_residual;
    return res;
}

inline LegendreResult kappa_star(const Matrix& y, const CovMatrix& q, const Activation& act,
                                 const LegendreOptions& opts = {}) {
    KappaSurface surf(q, act, opts);
    return kappa_star_on(surf, y, opts);
}

/// Conditional layer rate J(g_next | g_prev) = gamma * kappa*((g_next - C_b 1)/C_W ; g_prev),
/// with the infinity*0 rule: for gamma = inf the rate is 0 exactly on the
/// deterministic kernel image and +inf elsewhere.
inline LegendreResult conditional_rate_J(const CovMatrix& g_next, const CovMatrix& g_prev,
                                         double gamma_l, double c_b, double c_w,
                                         const Activation& act, const LegendreOptions& opts = {}) {
    if (!(gamma_l >= 1.0)) throw std::invalid_argument("conditional_rate_J: gamma must be in [1, inf]");
    if (!(c_b >= 0.0) || !(c_w > 0.0))
        throw std::invalid_argument("conditional_rate_J: require C_b >= 0 and C_W > 0");
    const auto dim = g_next.dim();
    if (dim != g_prev.dim()) throw std::invalid_argument("conditional_rate_J: dimension mismatch");

    if (std::isinf(gamma_l)) {
        const Matrix image = c_b * ones(dim) + c_w * mean_sigma(g_prev, act, opts.budget,
                                                                opts.seed, opts.workers).mat();
        LegendreResult res;
        const double gap = frobenius_norm(g_next.mat() - image);
        if (gap <= 1e-6 * (1.0 + frobenius_norm(g_next.mat()))) {
            res.status = LegendreStatus::converged;
            res.value = 0.0;
            res.residual = gap;
        } else {
            res.status = LegendreStatus::diverged_infeasible;
            res.infinite = true;
            res.value = kInf;
            res.residual = gap;
        }
        return res;
    }

    const Matrix y = (g_next.mat() - c_b * ones(dim)) / c_w;
    LegendreResult res = kappa_star(y, g_prev, act, opts);
    if (!res.infinite) res.value *= gamma_l;
    return res;
}

/// Overload reusing a prebuilt surface for g_prev (the hot path in chain rates).
inline LegendreResult conditional_rate_J_on(const KappaSurface& surf, const CovMatrix& g_next,
                                            double gamma_l, double c_b, double c_w,
                                            const LegendreOptions& opts = {},
                                            const DualMatrix* warm_start = nullptr) {
    if (!(gamma_l >= 1.0)) throw std::invalid_argument("conditional_rate_J: gamma must be in [1, inf]");
    const auto dim = g_next.dim();
    if (std::isinf(gamma_l)) {
        const Matrix image = c_b * ones(dim) + c_w * surf.mean();
        LegendreResult res;
        const double gap = frobenius_norm(g_next.mat() - image);
        if (gap <= 1e-6 * (1.0 + frobenius_norm(g_next.mat()))) {
            res.status = LegendreStatus::converged;
            res.value = 0.0;
            res.residual = gap;
        } else {
            res.status = LegendreStatus::diverged_infeasible;
            res.infinite = true;
            res.value = kInf;
            res.residual = gap;
        }
        return res;
    }
    const Matrix y = (g_next.mat() - c_b * ones(dim)) / c_w;
    LegendreResult res = kappa_star_on(surf, y, opts, warm_start);
    if (!res.infinite) res.value *= gamma_l;
    return res;
}

} // namespace ldnn
