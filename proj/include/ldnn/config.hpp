#pragma once

#include "ldnn/activation.hpp"
#include "ldnn/rate.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>

namespace ldnn {

using json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "ldnn-1";

/// Experiment configuration as found in a config file: the network plus
/// seed/budget knobs. Unknown keys are rejected.
struct ExperimentConfig {
    NetworkConfig net;
    std::uint64_t seed = 0;
    long long budget = 0;   // evaluator budget: MC samples or quadrature order
    int restarts = 8;
    int workers = 1;
};

namespace detail {

inline double gamma_from_json(const json& v) {
    if (v.is_string()) {
        if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
        throw std::invalid_argument("config: gamma string must be \"inf\"");
    }
    if (v.is_number()) return v.get<double>();
    throw std::invalid_argument("config: gamma must be a number or \"inf\"");
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    static const std::set<std::string> known{
        "activation", "C_b", "C_W", "L", "gammas", "n0", "inputs", "n_out",
        "seed", "budget", "restarts", "workers"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");

    auto require = [&](const char* key) -> const json& {
        if (!j.contains(key)) throw std::invalid_argument(std::string("config: missing key '") + key + "'");
        return j.at(key);
    };

    ExperimentConfig cfg;
    cfg.net.activation = parse_activation(require("activation").get<std::string>());
    cfg.net.c_b = require("C_b").get<double>();
    cfg.net.c_w = require("C_W").get<double>();
    cfg.net.layers = require("L").get<int>();
    cfg.net.gammas.clear();
    for (const auto& g : require("gammas")) cfg.net.gammas.push_back(detail::gamma_from_json(g));
    cfg.net.n0 = require("n0").get<int>();
    cfg.net.inputs.clear();
    for (const auto& row : require("inputs")) {
        Vector x(row.size());
        Eigen::Index i = 0;
        for (const auto& v : row) x(i++) = v.get<double>();
        cfg.net.inputs.push_back(std::move(x));
    }
    cfg.net.n_out = require("n_out").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("budget")) cfg.budget = j.at("budget").get<long long>();
    if (j.contains("restarts")) cfg.restarts = j.at("restarts").get<int>();
    if (j.contains("workers")) cfg.workers = j.at("workers").get<int>();
    cfg.net.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config: JSON parse error in '" + path + "': " + e.what());
    }
    return parse_experiment_config(j);
}

// --- JSON <-> matrix helpers (row-major nested arrays) ----------------------

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index jcol = 0; jcol < m.cols(); ++jcol) row.push_back(m(i, jcol));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j) {
    if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
    if (!j.is_array() || j.empty()) throw std::invalid_argument("matrix: expected number or nested array");
    if (j.front().is_number()) {  // single row
        Matrix m(1, j.size());
        Eigen::Index c = 0;
        for (const auto& v : j) m(0, c++) = v.get<double>();
        return m;
    }
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(j.front().size());
    Matrix m(rows, cols);
    Eigen::Index r = 0;
    for (const auto& row : j) {
        if (static_cast<Eigen::Index>(row.size()) != cols)
            throw std::invalid_argument("matrix: ragged rows");
        Eigen::Index c = 0;
        for (const auto& v : row) m(r, c++) = v.get<double>();
        ++r;
    }
    return m;
}

/// Serializes a possibly infinite value; JSON lacks an infinity literal, so
/// infinities become the string "inf" (matching the gamma convention).
inline json finite_or_inf(double v) {
    if (std::isinf(v)) return json(v > 0 ? "inf" : "-inf");
    return json(v);
}

} // namespace ldnn
