#pragma once

#include "ldnn/config.hpp"
#include "ldnn/errors.hpp"
#include "ldnn/kappa.hpp"
#include "ldnn/legendre.hpp"
#include "ldnn/rate.hpp"
#include "ldnn/simulate.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace ldnn::cli {

/// Shortest round-trip decimal representation (CSV number format).
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(what + ": JSON parse error: " + e.what());
    }
}

/// Matrix argument: inline JSON (number or nested array) or a path to a JSON
/// or CSV file.
inline Matrix parse_matrix_arg(const std::string& arg, const std::string& what) {
    if (std::filesystem::exists(arg)) {
        std::ifstream in(arg);
        std::stringstream ss;
        ss << in.rdbuf();
        const std::string text = ss.str();
        // JSON first, then CSV rows of comma-separated numbers.
        try {
            return matrix_from_json(json::parse(text));
        } catch (const json::exception&) {
        }
        std::vector<std::vector<double>> rows;
        std::istringstream lines(text);
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::vector<double> row;
            std::istringstream cells(line);
            std::string cell;
            while (std::getline(cells, cell, ',')) {
                try {
                    row.push_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw std::invalid_argument(what + ": bad CSV cell '" + cell + "' in " + arg);
                }
            }
            if (!row.empty()) rows.push_back(std::move(row));
        }
        if (rows.empty()) throw std::invalid_argument(what + ": no data in " + arg);
        Matrix m(rows.size(), rows[0].size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != rows[0].size())
                throw std::invalid_argument(what + ": ragged CSV rows in " + arg);
            for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
        }
        return m;
    }
    return matrix_from_json(parse_json_text(arg, what));
}

inline std::optional<std::uint64_t> env_seed() {
    if (const char* e = std::getenv("LDPNN_SEED")) {
        try {
            return static_cast<std::uint64_t>(std::stoull(e));
        } catch (const std::exception&) {
            throw std::invalid_argument("LDPNN_SEED: not an unsigned integer");
        }
    }
    return std::nullopt;
}

// Flag wins over environment, environment over the config/default.
inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                                  std::uint64_t fallback) {
    if (flag) return *flag;
    if (auto e = env_seed()) return *e;
    return fallback;
}

inline KappaMethod parse_method(const std::string& name, const CovMatrix& q,
                                const Activation& act) {
    if (name == "mc") return KappaMethod::mc;
    if (name == "quad") return KappaMethod::quadrature;
    if (name == "closed") return KappaMethod::closed_relu_1d;
    if (name == "series") return KappaMethod::series;
    if (name == "auto") {
        if (q.dim() == 1 && act.is_relu()) return KappaMethod::closed_relu_1d;
        if (q.dim() <= 2) return KappaMethod::quadrature;
        return KappaMethod::mc;
    }
    throw std::invalid_argument("unknown method '" + name + "'");
}

inline GridSpec parse_grid(const std::string& s) {
    GridSpec g;
    std::istringstream in(s);
    std::string a, b, step;
    if (!std::getline(in, a, ':') || !std::getline(in, b, ':') || !std::getline(in, step))
        throw std::invalid_argument("grid must be start:stop:step, got '" + s + "'");
    try {
        g.start = std::stod(a);
        g.stop = std::stod(b);
        g.step = std::stod(step);
    } catch (const std::exception&) {
        throw std::invalid_argument("grid must be numeric start:stop:step, got '" + s + "'");
    }
    return g;
}

inline void write_figure_csv(const std::string& path, const char* xname, const char* yname,
                             const std::vector<std::pair<double, double>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot write '" + path + "'");
    out << "# schema: " << kSchemaVersion << "\n" << xname << "," << yname << "\n";
    for (const auto& [x, y] : rows) out << format_double(x) << "," << format_double(y) << "\n";
}

} // namespace detail

/// Entry point used by the binary and by tests; args exclude the program name.
inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    CLI::App app{"large-deviation rate functions of deep Gaussian neural networks"};
    app.require_subcommand(1);
    app.fallthrough();  // lets --workers appear after the subcommand too

    int workers = 1;
    app.add_option("--workers", workers, "worker threads for sampling")->capture_default_str();

    // --- kappa ---------------------------------------------------------
    auto* kappa_cmd = app.add_subcommand("kappa", "evaluate the log-moment generating function");
    std::string k_eta, k_q, k_act = "relu", k_method = "auto";
    long long k_budget = 0;
    std::optional<std::uint64_t> k_seed;
    kappa_cmd->add_option("--eta", k_eta, "dual matrix (inline JSON or file)")->required();
    kappa_cmd->add_option("--q", k_q, "covariance matrix (inline JSON or file)")->required();
    kappa_cmd->add_option("--activation", k_act, "activation spec")->capture_default_str();
    kappa_cmd->add_option("--method", k_method, "mc|quad|closed|series|auto")->capture_default_str();
    kappa_cmd->add_option("--budget", k_budget, "samples (mc), order (quad/series)");
    kappa_cmd->add_option("--seed", k_seed, "RNG seed (overrides LDPNN_SEED)");

    // --- legendre ------------------------------------------------------
    auto* leg_cmd = app.add_subcommand("legendre", "Legendre transform kappa*(y;q)");
    std::string l_y, l_q, l_act = "relu";
    long long l_budget = 0;
    std::optional<std::uint64_t> l_seed;
    leg_cmd->add_option("--y", l_y, "target matrix (inline JSON or file)")->required();
    leg_cmd->add_option("--q", l_q, "covariance matrix")->required();
    leg_cmd->add_option("--activation", l_act, "activation spec")->capture_default_str();
    leg_cmd->add_option("--budget", l_budget, "evaluator budget");
    leg_cmd->add_option("--seed", l_seed, "RNG seed (overrides LDPNN_SEED)");

    // --- rate ----------------------------------------------------------
    auto* rate_cmd = app.add_subcommand("rate", "output rate function I_Z(z)");
    std::string r_config, r_z, r_mode = "simplified";
    std::optional<std::uint64_t> r_seed;
    rate_cmd->add_option("--config", r_config, "experiment config JSON")->required();
    rate_cmd->add_option("--z", r_z, "output matrix (CSV/JSON file or inline)")->required();
    rate_cmd->add_option("--mode", r_mode, "simplified|full")->capture_default_str();
    rate_cmd->add_option("--seed", r_seed, "RNG seed (overrides LDPNN_SEED)");

    // --- simulate ------------------------------------------------------
    auto* sim_cmd = app.add_subcommand("simulate", "finite-width simulations");
    auto* tail_cmd = sim_cmd->add_subcommand("tail", "tail-probability slope experiment");
    std::string t_config, t_v = "50,100,200", t_dir = "above", t_summary = "gram", t_csv = "tail.csv";
    double t_threshold = 0.0;
    long long t_samples = 100000;
    int t_alpha = 0, t_outcol = 0;
    std::optional<std::uint64_t> t_seed;
    tail_cmd->add_option("--config", t_config, "experiment config JSON")->required();
    tail_cmd->add_option("--t", t_threshold, "event threshold")->required();
    tail_cmd->add_option("--v", t_v, "comma-separated base widths")->capture_default_str();
    tail_cmd->add_option("--samples", t_samples, "samples per width")->capture_default_str();
    tail_cmd->add_option("--direction", t_dir, "above|below")->capture_default_str();
    tail_cmd->add_option("--summary", t_summary, "gram|output")->capture_default_str();
    tail_cmd->add_option("--alpha", t_alpha, "input index of the summary")->capture_default_str();
    tail_cmd->add_option("--out-col", t_outcol, "output column (summary=output)")->capture_default_str();
    tail_cmd->add_option("--csv", t_csv, "per-width CSV output path")->capture_default_str();
    tail_cmd->add_option("--seed", t_seed, "RNG seed (overrides LDPNN_SEED)");

    // --- figure --------------------------------------------------------
    auto* fig_cmd = app.add_subcommand("figure", "kappa / kappa* curves as CSV");
    std::string f_act = "relu", f_eta_grid = "-2:0.02:0.6", f_y_grid = "0.01:0.02:3";
    std::string f_out_kappa = "kappa.csv", f_out_kstar = "kappa_star.csv";
    double f_q = 1.0;
    fig_cmd->add_option("--activation", f_act, "activation spec")->capture_default_str();
    fig_cmd->add_option("--q", f_q, "scalar covariance")->capture_default_str();
    fig_cmd->add_option("--eta-grid", f_eta_grid, "start:stop:step")->capture_default_str();
    fig_cmd->add_option("--y-grid", f_y_grid, "start:stop:step")->capture_default_str();
    fig_cmd->add_option("--out-kappa", f_out_kappa, "kappa CSV path")->capture_default_str();
    fig_cmd->add_option("--out-kappa-star", f_out_kstar, "kappa* CSV path")->capture_default_str();

    // --- certify-activation ---------------------------------------------
    auto* cert_cmd = app.add_subcommand("certify-activation", "check Assumption-1 metadata");
    std::string c_act;
    cert_cmd->add_option("--activation", c_act, "activation spec")->required();

    std::vector<const char*> argv;
    argv.push_back("ldnn");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::CallForHelp& e) {
            out << app.help();
            return 0;
        } catch (const CLI::ParseError& e) {
            err << "error: " << e.what() << "\n";
            return 1;
        }

        if (*kappa_cmd) {
            const Activation act = parse_activation(k_act);
            const CovMatrix q(detail::parse_matrix_arg(k_q, "--q"));
            const DualMatrix eta(detail::parse_matrix_arg(k_eta, "--eta"));
            const KappaMethod method = detail::parse_method(k_method, q, act);
            const std::uint64_t seed = detail::resolve_seed(k_seed, 0);
            const KappaEstimate est = kappa_eval(eta, q, act, method, k_budget, seed, workers);
            json j{{"schema", kSchemaVersion},
                   {"value", est.infinite ? json("inf") : json(est.value)},
                   {"std_error", est.std_error},
                   {"method", to_string(est.method)},
                   {"infinite", est.infinite},
                   {"unreliable", est.unreliable},
                   {"samples_or_order", est.samples_or_order}};
            if (!est.note.empty()) j["note"] = est.note;
            out << j.dump() << "\n";
            return 0;
        }

        if (*leg_cmd) {
            const Activation act = parse_activation(l_act);
            const CovMatrix q(detail::parse_matrix_arg(l_q, "--q"));
            const Matrix y = detail::parse_matrix_arg(l_y, "--y");
            LegendreOptions opts;
            opts.budget = l_budget;
            opts.seed = detail::resolve_seed(l_seed, 0);
            opts.workers = workers;
            const LegendreResult res = kappa_star(y, q, act, opts);
            json j{{"schema", kSchemaVersion},
                   {"value", finite_or_inf(res.as_double())},
                   {"status", to_string(res.status)},
                   {"iterations", res.iterations},
                   {"residual", res.residual},
                   {"infinite", res.infinite},
                   {"maximizer", res.maximizer ? matrix_to_json(res.maximizer->mat()) : json()}};
            out << j.dump() << "\n";
            return 0;
        }

        if (*rate_cmd) {
            ExperimentConfig cfg = load_experiment_config(r_config);
            const Matrix z = detail::parse_matrix_arg(r_z, "--z");
            RateOptions opts;
            opts.seed = detail::resolve_seed(r_seed, cfg.seed);
            opts.restarts = cfg.restarts;
            opts.workers = std::max(workers, cfg.workers);
            opts.legendre.budget = cfg.budget;
            opts.legendre.seed = opts.seed;
            RateMode mode;
            if (r_mode == "simplified") mode = RateMode::simplified;
            else if (r_mode == "full") mode = RateMode::full_crosscheck;
            else throw std::invalid_argument("rate: --mode must be simplified|full");
            const RateCertificate cert = rate_I_Z(z, cfg.net, opts, mode);
            json chain = json::array();
            for (const auto& g : cert.chain) chain.push_back(matrix_to_json(g.mat()));
            json j{{"schema", kSchemaVersion},
                   {"value", finite_or_inf(cert.as_double())},
                   {"infinite", cert.infinite},
                   {"chain", chain},
                   {"r_min", cert.r_min.size() > 0 ? matrix_to_json(cert.r_min) : json()},
                   {"diagnostics",
                    json{{"restarts", cert.diagnostics.restarts_used},
                         {"best", finite_or_inf(cert.diagnostics.best)},
                         {"worst", finite_or_inf(cert.diagnostics.worst)},
                         {"evals", cert.diagnostics.evals},
                         {"full_value", cert.diagnostics.full_value},
                         {"gap", cert.diagnostics.gap},
                         {"constraint_residual", cert.diagnostics.constraint_residual}}}};
            out << j.dump() << "\n";
            return 0;
        }

        if (*tail_cmd) {
            ExperimentConfig cfg = load_experiment_config(t_config);
            std::vector<int> vs;
            {
                std::istringstream in(t_v);
                std::string tok;
                while (std::getline(in, tok, ',')) vs.push_back(std::stoi(tok));
            }
            TailDirection dir;
            if (t_dir == "above") dir = TailDirection::above;
            else if (t_dir == "below") dir = TailDirection::below;
            else throw std::invalid_argument("simulate tail: --direction must be above|below");
            TailSummarySpec spec;
            spec.alpha = t_alpha;
            spec.out_col = t_outcol;
            if (t_summary == "gram") spec.kind = TailSummarySpec::Kind::gram_diag;
            else if (t_summary == "output") spec.kind = TailSummarySpec::Kind::output_entry;
            else throw std::invalid_argument("simulate tail: --summary must be gram|output");
            RateOptions ropts;
            ropts.seed = detail::resolve_seed(t_seed, cfg.seed);
            ropts.legendre.budget = cfg.budget;
            const std::uint64_t seed = detail::resolve_seed(t_seed, cfg.seed);
            const int nw = std::max(workers, cfg.workers);
            const TailExperimentResult res =
                tail_experiment(cfg.net, t_threshold, dir, vs, t_samples, seed, spec, nw, ropts);

            std::ofstream csv(t_csv);
            if (!csv) throw std::invalid_argument("cannot write '" + t_csv + "'");
            csv << "# schema: " << kSchemaVersion << "\n"
                << "v,samples,hits,p_hat,neg_log_p_over_v,std_err\n";
            for (const auto& r : res.rows)
                csv << r.v << "," << r.samples << "," << r.hits << "," << format_double(r.p_hat)
                    << "," << format_double(r.neg_log_p_over_v) << "," << format_double(r.std_err)
                    << "\n";

            json rows = json::array();
            for (const auto& r : res.rows)
                rows.push_back(json{{"v", r.v},
                                    {"samples", r.samples},
                                    {"hits", r.hits},
                                    {"p_hat", r.p_hat},
                                    {"neg_log_p_over_v", r.neg_log_p_over_v},
                                    {"std_err", r.std_err},
                                    {"excluded", r.excluded}});
            json j{{"schema", kSchemaVersion},
                   {"slope", res.fit.slope},
                   {"slope_std_error", res.fit.slope_std_error},
                   {"intercept", res.fit.intercept},
                   {"predicted_rate", finite_or_inf(res.predicted_rate)},
                   {"relative_gap", res.relative_gap},
                   {"csv", t_csv},
                   {"rows", rows}};
            out << j.dump() << "\n";
            return 0;
        }

        if (*fig_cmd) {
            const Activation act = parse_activation(f_act);
            const FigureData fig =
                figure_data(act, f_q, detail::parse_grid(f_eta_grid), detail::parse_grid(f_y_grid));
            detail::write_figure_csv(f_out_kappa, "x", "kappa", fig.kappa_rows);
            detail::write_figure_csv(f_out_kstar, "y", "kappa_star", fig.kappa_star_rows);
            json j{{"schema", kSchemaVersion},
                   {"kappa_csv", f_out_kappa},
                   {"kappa_star_csv", f_out_kstar},
                   {"rows_kappa", fig.kappa_rows.size()},
                   {"rows_kappa_star", fig.kappa_star_rows.size()}};
            out << j.dump() << "\n";
            return 0;
        }

        if (*cert_cmd) {
            const Activation act = parse_activation(c_act);
            const CertificationReport rep = asymptotic_constants(act);
            json j{{"schema", kSchemaVersion},
                   {"activation", act.name()},
                   {"c_plus", rep.c_plus_est},
                   {"c_minus", rep.c_minus_signed},
                   {"c_minus_conventional", rep.c_minus_est},
                   {"growth_C", growth_bound(act)},
                   {"pass", rep.pass},
                   {"right_slopes", rep.right_slopes},
                   {"left_slopes", rep.left_slopes}};
            if (!rep.message.empty()) j["message"] = rep.message;
            out << j.dump() << "\n";
            return 0;
        }

        err << "error: no subcommand\n";
        return 1;
    } catch (const NumericalFailure& e) {
        err << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace ldnn::cli
