#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ldnn {

/// Scalar activation with its linear-growth metadata.
///
/// Slope convention: sigma(x) = c_plus*x + o(x) as x -> +inf and
/// sigma(x) = -c_minus*x + o(x) as x -> -inf with c_minus in [-c_plus, 0],
/// so the conventional left slope is -c_minus >= 0.
class Activation {
public:
    Activation(std::string name, std::function<double(double)> f,
               double c_plus, double c_minus, double growth_c,
               std::vector<double> breakpoints = {})
        : name_(std::move(name)), f_(std::move(f)),
          c_plus_(c_plus), c_minus_(c_minus), growth_c_(growth_c),
          breakpoints_(std::move(breakpoints)) {
        if (!(c_plus_ >= 0.0))
            throw std::invalid_argument("Activation " + name_ + ": c_plus must be >= 0");
        if (!(c_minus_ >= -c_plus_ && c_minus_ <= 0.0))
            throw std::invalid_argument("Activation " + name_ + ": c_minus must lie in [-c_plus, 0]");
        if (!(growth_c_ > 0.0))
            throw std::invalid_argument("Activation " + name_ + ": growth bound must be positive");
        validate_on_grid();
    }

    const std::string& name() const { return name_; }
    double operator()(double x) const { return f_(x); }
    double c_plus() const { return c_plus_; }
    double c_minus() const { return c_minus_; }
    /// Conventional (nonnegative) slope as x -> -inf.
    double left_slope() const { return -c_minus_; }
    double growth_c() const { return growth_c_; }
    /// Points where sigma is non-smooth or jumps; quadrature panels split here.
    const std::vector<double>& breakpoints() const { return breakpoints_; }

    bool is_relu() const { return name_ == "relu"; }

    /// Limit slope of sigma(r*u)/r as r -> +inf, for fixed u.
    double asymptotic_slope(double u) const {
        if (u > 0.0) return c_plus_ * u;
        if (u < 0.0) return -c_minus_ * u;
        return 0.0;
    }

private:
    // Checks |sigma(x)| <= C(1+|x|) and nontriviality on a dense log/linear grid
    // spanning [-1e6, 1e6].
    void validate_on_grid() const {
        double max_abs = 0.0;
        for (double x : certification_grid()) {
            const double v = f_(x);
            if (!std::isfinite(v))
                throw std::invalid_argument("Activation " + name_ + ": non-finite value at x=" +
                                            std::to_string(x));
            max_abs = std::max(max_abs, std::abs(v));
            if (std::abs(v) > growth_c_ * (1.0 + std::abs(x)) * (1.0 + 1e-12))
                throw std::invalid_argument("Activation " + name_ + ": growth bound violated at x=" +
                                            std::to_string(x));
        }
        if (max_abs == 0.0)
            throw std::invalid_argument("Activation " + name_ + ": trivial (identically zero on grid)");
    }

public:
    static std::vector<double> certification_grid() {
        std::vector<double> xs;
        xs.reserve(4203);
        for (int i = 0; i <= 2000; ++i) xs.push_back(-10.0 + i * 0.01);  // linear core
        for (int i = 0; i <= 1100; ++i) {
            const double mag = std::pow(10.0, -5.0 + i * 0.01);          // decades up to 1e6
            xs.push_back(mag);
            xs.push_back(-mag);
        }
        xs.push_back(0.0);
        return xs;
    }

private:
    std::string name_;
    std::function<double(double)> f_;
    double c_plus_;
    double c_minus_;
    double growth_c_;
    std::vector<double> breakpoints_;
};

inline std::vector<double> evaluate(const Activation& act, const std::vector<double>& xs) {
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = act(xs[i]);
    return out;
}

/// Certification report for the Assumption-1 metadata of an activation.
struct CertificationReport {
    double c_plus_est = 0.0;          // estimated right slope
    double c_minus_est = 0.0;         // estimated conventional left slope (= -c_minus)
    double c_minus_signed = 0.0;      // same estimate in the stored (nonpositive) convention
    double growth_c = 0.0;
    bool pass = false;
    std::vector<double> right_slopes; // sigma(10^k)/10^k, k = 3..8
    std::vector<double> left_slopes;  // sigma(-10^k)/(-10^k), k = 3..8
    std::string message;
};

/// Estimates the asymptotic slopes at x = +-10^k, k = 3..8, and certifies them
/// against the stored constants (tolerance 1e-3 at the two largest scales).
inline CertificationReport asymptotic_constants(const Activation& act) {
    CertificationReport rep;
    for (int k = 3; k <= 8; ++k) {
        const double x = std::pow(10.0, k);
        rep.right_slopes.push_back(act(x) / x);
        rep.left_slopes.push_back(act(-x) / (-x));
    }
    rep.c_plus_est = rep.right_slopes.back();
    rep.c_minus_est = rep.left_slopes.back();
    rep.c_minus_signed = -rep.c_minus_est;
    rep.growth_c = act.growth_c();

    const double tol = 1e-3;
    auto settled = [&](const std::vector<double>& s, double target) {
        const auto n = s.size();
        return std::abs(s[n - 1] - target) <= tol && std::abs(s[n - 2] - target) <= tol;
    };
    const bool right_ok = settled(rep.right_slopes, act.c_plus());
    const bool left_ok = settled(rep.left_slopes, act.left_slope());
    rep.pass = right_ok && left_ok;
    if (!rep.pass)
        rep.message = "activation '" + act.name() + "' failed slope certification (" +
                      (right_ok ? "" : "right ") + (left_ok ? "" : "left") + ")";
    return rep;
}

/// Verifies |sigma(x)| <= C + C|x| on the certification grid and returns C.
inline double growth_bound(const Activation& act) {
    const double c = act.growth_c();
    for (double x : Activation::certification_grid()) {
        if (std::abs(act(x)) > c * (1.0 + std::abs(x)) * (1.0 + 1e-12))
            throw std::domain_error("growth bound violated for '" + act.name() +
                                    "' at x=" + std::to_string(x) + ": |sigma(x)|=" +
                                    std::to_string(std::abs(act(x))));
    }
    return c;
}

namespace activations {

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Activation relu() {
    return Activation("relu", [](double x) { return x > 0.0 ? x : 0.0; }, 1.0, 0.0, 1.0, {0.0});
}

inline Activation parametric_relu(double a) {
    if (!(a >= 0.0 && a < 1.0))
        throw std::invalid_argument("parametric ReLU slope must lie in [0,1)");
    return Activation("prelu:" + std::to_string(a),
                      [a](double x) { return x > 0.0 ? x : a * x; }, 1.0, -a, 1.0, {0.0});
}

inline Activation sigmoid() {
    return Activation("sigmoid", [](double x) { return stable_sigmoid(x); }, 0.0, 0.0, 1.0);
}

inline Activation binary_step() {
    return Activation("step", [](double x) { return x >= 0.0 ? 1.0 : 0.0; }, 0.0, 0.0, 1.0, {0.0});
}

inline Activation gelu() {
    return Activation("gelu",
                      [](double x) { return x * 0.5 * std::erfc(-x / std::sqrt(2.0)); },
                      1.0, 0.0, 1.0);
}

inline Activation swish() {
    return Activation("swish", [](double x) { return x * stable_sigmoid(x); }, 1.0, 0.0, 1.0);
}

inline Activation softplus() {
    return Activation("softplus",
                      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x))
                                                    : std::log1p(std::exp(x)); },
                      1.0, 0.0, 1.0);
}

} // namespace activations

/// Parses "relu" | "prelu:a" | "sigmoid" | "step" | "gelu" | "swish" | "softplus".
inline Activation parse_activation(const std::string& spec) {
    if (spec == "relu") return activations::relu();
    if (spec == "sigmoid") return activations::sigmoid();
    if (spec == "step") return activations::binary_step();
    if (spec == "gelu") return activations::gelu();
    if (spec == "swish") return activations::swish();
    if (spec == "softplus") return activations::softplus();
    if (spec.rfind("prelu:", 0) == 0) {
        std::size_t pos = 0;
        double a;
        try {
            a = std::stod(spec.substr(6), &pos);
        } catch (const std::exception&) {
            throw std::invalid_argument("invalid parametric ReLU spec '" + spec + "'");
        }
        if (pos != spec.size() - 6)
            throw std::invalid_argument("invalid parametric ReLU spec '" + spec + "'");
        return activations::parametric_relu(a);
    }
    throw std::invalid_argument("unknown activation '" + spec + "'");
}

} // namespace ldnn
