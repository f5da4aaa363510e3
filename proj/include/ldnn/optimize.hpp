#pragma once

#include "ldnn/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace ldnn::opt {

struct NelderMeadOptions {
    int max_evals = 4000;
    double x_tol = 1e-9;
    double f_tol = 1e-11;
    double init_step = 0.5;  // per-coordinate, scaled by max(1,|x0_i|)
};

struct NelderMeadResult {
    Vector x;
    double f = std::numeric_limits<double>::infinity();
    int evals = 0;
    bool converged = false;
};

/// Derivative-free simplex minimizer; tolerates +inf objective values
/// (infeasible candidates rank last).
inline NelderMeadResult nelder_mead(const std::function<double(const Vector&)>& f,
                                    const Vector& x0, const NelderMeadOptions& opts = {}) {
    const int n = static_cast<int>(x0.size());
    NelderMeadResult res;
    if (n == 0) {
        res.x = x0;
        res.f = f(x0);
        res.evals = 1;
        res.converged = true;
        return res;
    }
    int evals = 0;
    auto feval = [&](const Vector& x) {
        ++evals;
        const double v = f(x);
        return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
    };

    std::vector<Vector> xs(n + 1, x0);
    std::vector<double> fs(n + 1);
    for (int i = 1; i <= n; ++i)
        xs[i](i - 1) += opts.init_step * std::max(1.0, std::abs(x0(i - 1)));
    for (int i = 0; i <= n; ++i) fs[i] = feval(xs[i]);

    std::vector<int> order(n + 1);
    while (evals < opts.max_evals) {
        for (int i = 0; i <= n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) { return fs[a] < fs[b]; });
        const int lo = order[0], hi = order[n], second_hi = order[n - 1];

        // Convergence: simplex collapsed in x and f.
        double fspread = fs[hi] - fs[lo];
        double xspread = 0.0;
        for (int i = 0; i <= n; ++i) xspread = std::max(xspread, (xs[i] - xs[lo]).cwiseAbs().maxCoeff());
        if (std::isfinite(fs[lo]) && std::isfinite(fs[hi]) &&
            fspread <= opts.f_tol * (1.0 + std::abs(fs[lo])) && xspread <= opts.x_tol) {
            res.converged = true;
            break;
        }

        Vector centroid = Vector::Zero(n);
        for (int i = 0; i <= n; ++i)
            if (i != hi) centroid += xs[i];
        centroid /= n;

        const Vector refl = centroid + (centroid - xs[hi]);
        const double f_refl = feval(refl);
        if (f_refl < fs[lo]) {
            const Vector expa = centroid + 2.0 * (centroid - xs[hi]);
            const double f_expa = feval(expa);
            if (f_expa < f_refl) {
                xs[hi] = expa;
                fs[hi] = f_expa;
            } else {
                xs[hi] = refl;
                fs[hi] = f_refl;
            }
        } else if (f_refl < fs[second_hi]) {
            xs[hi] = refl;
            fs[hi] = f_refl;
        } else {
            const bool outside = f_refl < fs[hi];
            Vector contr;
            if (outside) contr = centroid + 0.5 * (refl - centroid);
            else contr = centroid - 0.5 * (centroid - xs[hi]);
            const double f_contr = feval(contr);
            if (f_contr < std::min(f_refl, fs[hi])) {
                xs[hi] = contr;
                fs[hi] = f_contr;
            } else {
                for (int i = 0; i <= n; ++i) {
                    if (i == lo) continue;
                    xs[i] = xs[lo] + 0.5 * (xs[i] - xs[lo]);
                    fs[i] = feval(xs[i]);
                }
            }
        }
    }

    int best = 0;
    for (int i = 1; i <= n; ++i)
        if (fs[i] < fs[best]) best = i;
    res.x = xs[best];
    res.f = fs[best];
    res.evals = evals;
    return res;
}

} // namespace ldnn::opt
