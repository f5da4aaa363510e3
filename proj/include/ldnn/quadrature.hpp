#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace ldnn::quad {

/// Gauss-Legendre rule on [-1, 1].
struct GaussLegendre {
    std::vector<double> x;
    std::vector<double> w;
};

namespace detail {

inline GaussLegendre compute_gauss_legendre(int n) {
    GaussLegendre gl;
    gl.x.resize(n);
    gl.w.resize(n);
    const int mid = (n + 1) / 2;
    for (int i = 0; i < mid; ++i) {
        // Newton iteration on P_n from the Chebyshev-like initial guess.
        double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / pp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        gl.x[i] = -z;
        gl.x[n - 1 - i] = z;
        gl.w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        gl.w[n - 1 - i] = gl.w[i];
    }
    return gl;
}

} // namespace detail

/// Cached Gauss-Legendre table.
inline const GaussLegendre& gauss_legendre(int n) {
    static std::map<int, GaussLegendre> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, detail::compute_gauss_legendre(n)).first;
    return it->second;
}

/// Radial panel boundaries 0, 2, 6, 18, ... up to R (geometric x3).
inline std::vector<double> radial_panels(double R) {
    std::vector<double> b{0.0};
    double edge = 2.0;
    while (edge < R) {
        b.push_back(edge);
        edge *= 3.0;
    }
    b.push_back(R);
    return b;
}

/// Precomputed integration rule for E[f(N)] over a standard normal N in R^m,
/// m = 1 or 2. Points live in N-space; weights include the Gaussian density.
/// In 2-D the rule is polar with wedges split at the given angles, so that an
/// integrand with kinks along rays through the origin is smooth per panel.
struct GaussianMesh {
    int dim = 0;
    double radius = 0.0;
    std::vector<double> px;
    std::vector<double> py;  // empty in 1-D
    std::vector<double> w;

    std::size_t size() const { return w.size(); }

    static GaussianMesh build_1d(double R, int n_rad) {
        GaussianMesh mesh;
        mesh.dim = 1;
        mesh.radius = R;
        const auto& gl = gauss_legendre(n_rad);
        const auto panels = radial_panels(R);
        const double norm = 1.0 / std::sqrt(2.0 * M_PI);
        for (int dir : {+1, -1}) {
            for (std::size_t p = 0; p + 1 < panels.size(); ++p) {
                const double a = panels[p], b = panels[p + 1];
                const double h = 0.5 * (b - a), c = 0.5 * (b + a);
                for (int i = 0; i < n_rad; ++i) {
                    const double r = c + h * gl.x[i];
                    mesh.px.push_back(dir * r);
                    mesh.w.push_back(norm * h * gl.w[i] * std::exp(-0.5 * r * r));
                }
            }
        }
        return mesh;
    }

    static GaussianMesh build_2d(std::vector<double> wedge_angles, double R,
                                 int n_rad, int n_ang) {
        GaussianMesh mesh;
        mesh.dim = 2;
        mesh.radius = R;

        // Wedge boundaries: supplied kink angles, padded with quadrant marks
        // so no panel spans more than a quarter turn.
        std::vector<double> bounds;
        for (double a : wedge_angles) {
            double t = std::fmod(a, 2.0 * M_PI);
            if (t < 0.0) t += 2.0 * M_PI;
            bounds.push_back(t);
        }
        for (int k = 0; k < 4; ++k) bounds.push_back(k * M_PI / 2.0);
        std::sort(bounds.begin(), bounds.end());
        bounds.erase(std::unique(bounds.begin(), bounds.end(),
                                 [](double a, double b) { return std::abs(a - b) < 1e-12; }),
                     bounds.end());
        bounds.push_back(bounds.front() + 2.0 * M_PI);

        const auto& glr = gauss_legendre(n_rad);
        const auto& gla = gauss_legendre(n_ang);
        const auto panels = radial_panels(R);
        const double norm = 1.0 / (2.0 * M_PI);

        for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
            const double ta = bounds[s], tb = bounds[s + 1];
            const double ht = 0.5 * (tb - ta), ct = 0.5 * (tb + ta);
            for (int j = 0; j < n_ang; ++j) {
                const double theta = ct + ht * gla.x[j];
                const double wt = ht * gla.w[j];
                const double cth = std::cos(theta), sth = std::sin(theta);
                for (std::size_t p = 0; p + 1 < panels.size(); ++p) {
                    const double a = panels[p], b = panels[p + 1];
                    const double hr = 0.5 * (b - a), cr = 0.5 * (b + a);
                    for (int i = 0; i < n_rad; ++i) {
                        const double r = cr + hr * glr.x[i];
                        mesh.px.push_back(r * cth);
                        mesh.py.push_back(r * sth);
                        mesh.w.push_back(norm * wt * hr * glr.w[i] * r * std::exp(-0.5 * r * r));
                    }
                }
            }
        }
        return mesh;
    }

    /// Total mass; should be 1 up to truncation at R.
    double weight_sum() const {
        double s = 0.0;
        for (double v : w) s += v;
        return s;
    }
};

} // namespace ldnn::quad
