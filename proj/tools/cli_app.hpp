#pragma once

// smarteff command-line driver. `run_cli` is the whole program minus
// process plumbing so tests can call it in-process.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "smarteff/smarteff.hpp"

namespace smarteff::cli {

using nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kInputError = 2, kNumericalError = 3 };

struct GlobalOptions {
    std::string format = "json";
    std::uint64_t seed = 1;
    bool seed_given = false;
    unsigned jobs = 0;
    bool jobs_given = false;
    std::string output;
};

struct AnalyzeOptions {
    std::string data;
    std::string config;
    std::string technique = "t0";
    std::vector<std::string> contrasts;
    std::vector<std::string> covariates;
    std::vector<std::string> k1;
    std::vector<std::string> k2;
    std::string weights;
    int t_star = 0;
    int T = 0;
    std::optional<double> p11;
    std::optional<double> p21;
    bool small_sample = false;
};

struct SimulateOptions {
    std::string config;
    std::string preset;
    std::vector<double> rho;
    std::vector<double> nu;
    std::optional<double> delta;
    std::optional<int> n;
    std::optional<int> reps;
    std::vector<std::string> techniques;
    std::string contrast;
    std::string per_rep;
};

// ---------------------------------------------------------------- formatting

inline std::string fixed(double v, int digits = 4) {
    if (!std::isfinite(v)) return std::isnan(v) ? "NA" : (v > 0 ? "Inf" : "-Inf");
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline std::string num(double v) {
    if (!std::isfinite(v)) return std::isnan(v) ? "NA" : (v > 0 ? "Inf" : "-Inf");
    return detail::format_double(v);
}

/// Left-aligned first column, right-aligned rest.
inline std::string render_table(const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size() && c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t c = 0; c < w.size(); ++c) {
            const std::string cell = c < r.size() ? r[c] : "";
            if (c) out << "  ";
            if (c == 0) out << std::left << std::setw(static_cast<int>(w[c])) << cell;
            else out << std::right << std::setw(static_cast<int>(w[c])) << cell;
        }
        out << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto x : w) total += x;
    out << std::string(total + 2 * (w.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return out.str();
}

inline std::string render_csv(const std::vector<std::string>& header,
                              const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << detail::csv_escape(r[c]);
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out.str();
}

inline ordered_json json_number(double v) {
    if (!std::isfinite(v)) return nullptr;
    return v;
}

inline ordered_json contrast_json(const ContrastResult& c) {
    return {{"contrast", c.label},
            {"estimate", json_number(c.estimate)},
            {"se", json_number(c.se)},
            {"ci", {json_number(c.ci_low), json_number(c.ci_high)}},
            {"ci_length", json_number(c.ci_length())},
            {"z", json_number(c.z)},
            {"p_value", json_number(c.p_value)},
            {"variance", variance_method_name(c.method)}};
}

inline std::vector<std::string> contrast_row(const std::string& technique, const ContrastResult& c) {
    return {technique, c.label, fixed(c.estimate), fixed(c.se), fixed(c.ci_low), fixed(c.ci_high),
            fixed(c.ci_length()), fixed(c.z, 3), fixed(c.p_value, 4)};
}

inline const std::vector<std::string>& contrast_header() {
    static const std::vector<std::string> h{"technique", "contrast", "estimate", "se", "ci_low",
                                            "ci_high", "ci_length", "z", "p_value"};
    return h;
}

inline ordered_json validation_json(const ValidationReport& rep) {
    ordered_json checks = ordered_json::array();
    for (const auto& c : rep.checks)
        checks.push_back({{"name", c.name}, {"passed", c.passed}, {"message", c.message},
                          {"offending_ids", c.offending_ids}});
    return {{"passed", rep.passed()},
            {"cell_counts", rep.cell_counts},
            {"ai_row_counts", rep.ai_row_counts},
            {"checks", checks}};
}

// ------------------------------------------------------------------ commands

inline SmartDataset read_data(const AnalyzeOptions& a, const AnalysisSpec& spec) {
    std::ifstream in(a.data);
    if (!in) throw InputError("cannot open data file '" + a.data + "'");
    RandProbs probs = spec.probs.value_or(RandProbs{});
    if (a.p11) probs.p11 = *a.p11;
    if (a.p21) probs.p21 = *a.p21;
    const int T = a.T > 0 ? a.T : spec.T.value_or(0);
    return load_dataset(in, CsvSchema{}, T, -1, probs);
}

struct PreparedAnalysis {
    AnalysisSpec spec;
    SmartDataset data;
    ValidationReport validation;
    TechniquePlan plan;
};

/// Command-line values override config-file values.
inline PreparedAnalysis prepare_analysis(const AnalyzeOptions& a, const CLI::App& sub) {
    PreparedAnalysis p;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw InputError("cannot open config file '" + a.config + "'");
        p.spec = analysis_from_config(ConfigMap::parse(in));
    }
    auto& s = p.spec;
    if (sub.count("--technique") || !s.technique) s.technique = parse_technique(a.technique);
    if (sub.count("--covariates")) s.options.covariates = a.covariates;
    if (sub.count("--k1")) s.options.k1 = a.k1;
    if (sub.count("--k2")) s.options.k2 = a.k2;
    if (sub.count("--t-star")) s.options.t_star = a.t_star;
    if (sub.count("--small-sample")) s.options.small_sample_correction = a.small_sample;
    if (sub.count("--weights")) s.weights = parse_weight_kind(a.weights);
    if (!a.contrasts.empty()) s.contrasts = a.contrasts;
    if (s.contrasts.empty()) s.contrasts = {"(1,1)-(-1,-1)"};

    p.data = read_data(a, s);
    if (s.options.t_star > 0) {
        if (p.data.T >= 2 && (s.options.t_star >= p.data.T))
            throw InputError("t_star must satisfy 1 <= t_star < T");
        p.data.t_star = s.options.t_star;
    }
    p.validation = validate(p.data);
    if (!p.validation.passed()) {
        std::string msg = "data failed validation:";
        for (const auto& c : p.validation.checks)
            if (!c.passed) msg += " [" + c.name + "] " + c.message;
        throw InputError(msg);
    }
    p.plan = plan_technique(*s.technique, p.data, s.options);
    if (s.weights) {
        if (*s.weights == WeightKind::modeled) {
            if (s.options.k1.empty()) throw InputError("modeled weights require --k1");
            if (s.options.k2.empty()) throw InputError("modeled weights require --k2");
            p.plan.weights = WeightModel::modeled(s.options.k1, s.options.k2);
        } else {
            p.plan.weights = {*s.weights, {}, {}};
        }
        p.plan.variance = *s.weights == WeightKind::known ? VarianceMethod::known : VarianceMethod::weight_adjusted;
    }
    return p;
}

inline ordered_json plan_json(const PreparedAnalysis& p, const std::string& data_path) {
    const auto& o = p.spec.options;
    return {{"data", data_path},
            {"technique", technique_id(p.plan.technique)},
            {"mean_model", p.plan.mean_model.kind == MeanModelKind::cross_sectional      ? "cross_sectional"
                           : p.plan.mean_model.kind == MeanModelKind::covariate_adjusted ? "covariate_adjusted"
                                                                                          : "longitudinal"},
            {"weights", weight_kind_name(p.plan.weights.kind)},
            {"covariance", covariance_kind_name(p.plan.covariance)},
            {"variance", variance_method_name(p.plan.variance)},
            {"T", p.data.T},
            {"t_star", p.data.t_star},
            {"covariates", o.covariates},
            {"k1", p.plan.weights.k1},
            {"k2", p.plan.weights.k2},
            {"p11", p.data.rand_probs.p11},
            {"p21", p.data.rand_probs.p21},
            {"small_sample_correction", o.small_sample_correction},
            {"contrasts", p.spec.contrasts}};
}

inline ordered_json fit_json(const TechniqueFit& tf) {
    ordered_json coef = ordered_json::object();
    const auto names = tf.fit.spec.param_names();
    const Eigen::MatrixXd& V = vcov_for(tf.fit, tf.plan.variance);
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        coef[names[k]] = {{"estimate", json_number(tf.fit.theta[i])}, {"se", json_number(std::sqrt(V(i, i)))}};
    }
    return {{"coefficients", coef},
            {"sigma", tf.fit.sigma},
            {"rho", tf.fit.rho},
            {"rho_projected", tf.fit.rho_projected},
            {"iterations", tf.fit.iterations},
            {"converged", tf.fit.converged},
            {"extreme_weight_warning", tf.weights.extreme_weight_warning}};
}

inline std::string cmd_analyze(const GlobalOptions& g, const AnalyzeOptions& a, const CLI::App& sub,
                               bool pairwise) {
    const PreparedAnalysis p = prepare_analysis(a, sub);
    const TechniqueFit tf = run_plan(p.plan, p.data, p.spec.options);
    const std::string id = technique_id(p.plan.technique);

    std::vector<ContrastResult> results;
    if (pairwise) {
        results = tf.pairwise();
    } else {
        for (const auto& c : p.spec.contrasts) results.push_back(tf.contrast(parse_contrast(c)));
    }

    if (g.format == "json") {
        ordered_json cfg = plan_json(p, a.data);
        cfg["format"] = g.format;
        cfg["seed"] = g.seed;
        ordered_json j;
        j["command"] = pairwise ? "pairwise" : "analyze";
        j["config"] = cfg;
        j["technique"] = id;
        j["n"] = p.data.n();
        j["n_responders"] = p.data.n_responders();
        j["validation"] = validation_json(p.validation);
        j["fit"] = fit_json(tf);
        ordered_json rows = ordered_json::array();
        for (const auto& r : results) rows.push_back(contrast_json(r));
        j[pairwise ? "pairwise" : "contrasts"] = rows;
        return j.dump(2) + "\n";
    }
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : results) rows.push_back(contrast_row(id, r));
    if (pairwise) {
        for (auto& r : rows) r.erase(r.begin());
        std::vector<std::string> h(contrast_header().begin() + 1, contrast_header().end());
        h[0] = "pair";
        return g.format == "csv" ? render_csv(h, rows) : render_table(h, rows);
    }
    return g.format == "csv" ? render_csv(contrast_header(), rows) : render_table(contrast_header(), rows);
}

inline std::string cmd_validate(const GlobalOptions& g, const AnalyzeOptions& a) {
    const SmartDataset ds = read_data(a, {});
    const ValidationReport rep = validate(ds);
    if (g.format == "json") {
        ordered_json j;
        j["command"] = "validate";
        j["config"] = {{"data", a.data}, {"format", g.format}};
        j["n"] = ds.n();
        j["n_responders"] = ds.n_responders();
        j["T"] = ds.T;
        j["has_baseline"] = ds.has_baseline;
        j["covariates"] = ds.covariate_names;
        j["auxiliaries"] = ds.aux_names;
        auto v = validation_json(rep);
        for (auto it = v.begin(); it != v.end(); ++it) j[it.key()] = it.value();
        return j.dump(2) + "\n";
    }
    std::vector<std::vector<std::string>> rows;
    for (const auto& c : rep.checks) {
        std::string ids;
        for (const auto& id : c.offending_ids) ids += (ids.empty() ? "" : " ") + id;
        rows.push_back({c.name, c.passed ? "pass" : "FAIL", c.message, ids});
    }
    const std::vector<std::string> h{"check", "status", "message", "offending_ids"};
    if (g.format == "csv") return render_csv(h, rows);
    std::string out = render_table(h, rows);
    out += "\ncell counts (1-6):";
    for (auto c : rep.cell_counts) out += " " + std::to_string(c);
    out += "\nresult: " + std::string(rep.passed() ? "passed" : "failed") + "\n";
    return out;
}

inline ordered_json sim_config_json(const SimConfig& c, const SimStudySpec& s, unsigned jobs) {
    std::vector<std::string> techs;
    for (auto t : c.techniques) techs.push_back(technique_id(t));
    return {{"design", design_name(c.design)},
            {"n", c.n},
            {"reps", c.reps},
            {"seed", c.seed},
            {"rho", s.rho},
            {"nu", s.nu},
            {"delta", c.delta},
            {"sigma", c.sigma},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"response_rate", c.response_rate},
            {"eta1", c.eta1},
            {"covariate_correlation", c.covariate_correlation},
            {"techniques", techs},
            {"contrast", c.target.label()},
            {"jobs", jobs}};
}

inline std::string cmd_simulate(const GlobalOptions& g, const SimulateOptions& o) {
    SimStudySpec spec;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw InputError("cannot open config file '" + o.config + "'");
        spec = sim_study_from_config(ConfigMap::parse(in));
    }
    auto& b = spec.base;
    if (!o.preset.empty()) b.design = parse_design(o.preset);
    if (!o.rho.empty()) spec.rho = o.rho;
    if (!o.nu.empty()) spec.nu = o.nu;
    if (o.delta) b.delta = *o.delta;
    if (o.n) b.n = *o.n;
    if (o.reps) b.reps = *o.reps;
    if (g.seed_given) b.seed = g.seed;
    if (!o.techniques.empty()) {
        b.techniques.clear();
        for (const auto& id : o.techniques) b.techniques.push_back(parse_technique(id));
    }
    if (!o.contrast.empty()) b.target = parse_contrast(o.contrast);
    unsigned jobs = g.jobs;
    if (!g.jobs_given && spec.jobs) jobs = *spec.jobs;
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    if (!o.per_rep.empty() && spec.rho.size() * spec.nu.size() != 1)
        throw InputError("--per-rep needs a single (rho, nu) cell");

    std::vector<SimResult> cells;
    for (double rho : spec.rho)
        for (double nu : spec.nu) {
            SimConfig c = b;
            c.rho = rho;
            c.nu = nu;
            c.keep_replications = !o.per_rep.empty();
            cells.push_back(run_study(c, jobs));
        }

    if (!o.per_rep.empty()) {
        const auto& res = cells.front();
        std::ostringstream csv;
        csv << "rep,technique,estimate,se,covered\n";
        for (const auto& r : res.replications) {
            if (!r.ok) continue;
            for (const auto& e : r.estimates)
                csv << r.rep << ',' << technique_id(e.technique) << ',' << num(e.estimate) << ',' << num(e.se)
                    << ',' << (std::abs(e.estimate - res.theta) <= kZ975 * e.se ? 1 : 0) << '\n';
        }
        std::ofstream f(o.per_rep);
        if (!f) throw InputError("cannot write per-rep file '" + o.per_rep + "'");
        f << csv.str();
    }

    const auto techs = study_techniques(b);
    if (g.format == "json") {
        ordered_json j;
        j["command"] = "simulate";
        j["config"] = sim_config_json(b, spec, jobs);
        ordered_json arr = ordered_json::array();
        for (const auto& r : cells) {
            ordered_json t = ordered_json::array();
            for (const auto& s : r.summaries)
                t.push_back({{"technique", technique_id(s.technique)},
                             {"rmse", json_number(s.rmse)},
                             {"relative_efficiency", json_number(s.relative_efficiency)},
                             {"pct_closer", s.pct_closer ? json_number(*s.pct_closer) : ordered_json(nullptr)},
                             {"bias", json_number(s.bias)},
                             {"coverage", json_number(s.coverage)},
                             {"mean_se", json_number(s.mean_se)},
                             {"sd_estimate", json_number(s.sd_estimate)}});
            arr.push_back({{"rho", r.config.rho},
                           {"nu", r.config.nu},
                           {"theta", r.theta},
                           {"reps_used", r.reps_used},
                           {"reps_failed", r.reps_failed},
                           {"failures", r.failure_messages},
                           {"techniques", t}});
        }
        j["cells"] = arr;
        return j.dump(2) + "\n";
    }
    if (g.format == "csv") {
        const std::vector<std::string> h{"rho", "nu", "technique", "rmse", "relative_efficiency", "pct_closer",
                                         "bias", "coverage", "mean_se", "sd_estimate", "reps_used", "reps_failed"};
        std::vector<std::vector<std::string>> rows;
        for (const auto& r : cells)
            for (const auto& s : r.summaries)
                rows.push_back({num(r.config.rho), num(r.config.nu), technique_id(s.technique), num(s.rmse),
                                num(s.relative_efficiency), s.pct_closer ? num(*s.pct_closer) : "", num(s.bias),
                                num(s.coverage), num(s.mean_se), num(s.sd_estimate), std::to_string(r.reps_used),
                                std::to_string(r.reps_failed)});
        return render_csv(h, rows);
    }
    // one row per (rho, nu) cell: RE and % closer for every non-baseline technique
    std::vector<std::string> h{"rho", "nu"};
    for (std::size_t k = 1; k < techs.size(); ++k) {
        h.push_back(std::string("RE ") + technique_id(techs[k]));
        h.push_back(std::string("%closer ") + technique_id(techs[k]));
    }
    h.push_back("failed");
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : cells) {
        std::vector<std::string> row{fixed(r.config.rho, 2), fixed(r.config.nu, 2)};
        for (std::size_t k = 1; k < r.summaries.size(); ++k) {
            row.push_back(fixed(r.summaries[k].relative_efficiency, 2));
            row.push_back(fixed(r.summaries[k].pct_closer.value_or(NAN), 1));
        }
        row.push_back(std::to_string(r.reps_failed));
        rows.push_back(row);
    }
    return render_table(h, rows);
}

// ---------------------------------------------------------------------- main

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Weighted estimating-equation analysis of two-stage SMARTs", "smarteff"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "csv", "table"}));
    app.add_option("--seed", g.seed, "Random seed (simulate)");
    app.add_option("--jobs", g.jobs, "Worker threads for simulate (default: all cores)");
    app.add_option("--output", g.output, "Write results to this file instead of standard output");

    AnalyzeOptions a;
    auto add_data_options = [&](CLI::App* s, bool fit) {
        s->add_option("--data", a.data, "CSV file")->required();
        s->add_option("--T", a.T, "Expected number of outcome occasions");
        s->add_option("--p11", a.p11, "Design P(A1 = 1)");
        s->add_option("--p21", a.p21, "Design P(A2 = 1) among non-responders");
        if (!fit) return;
        s->add_option("--config", a.config, "Analysis config file");
        s->add_option("--technique", a.technique, "t0, t1, t2e, t2m, t3, t4, ensemble_e, ensemble_m");
        s->add_option("--covariates", a.covariates, "Baseline covariates (t1, ensembles)")->delimiter(',');
        s->add_option("--k1", a.k1, "Stage-1 assignment model regressors")->delimiter(',');
        s->add_option("--k2", a.k2, "Stage-2 assignment model regressors")->delimiter(',');
        s->add_option("--weights", a.weights, "Override weights: known, empirical, modeled");
        s->add_option("--t-star", a.t_star, "Last occasion before the second randomization");
        s->add_flag("--small-sample", a.small_sample, "Scale variances by n/(n-p)");
    };

    auto* analyze = app.add_subcommand("analyze", "Fit one technique and report contrasts");
    add_data_options(analyze, true);
    analyze->add_option("--contrast", a.contrasts, "Contrast(s): \"(1,1)-(-1,-1)\", first-stage, second-stage, "
                                                   "second-stage|nonresponders, or a coefficient vector");
    auto* pairwise = app.add_subcommand("pairwise", "All six pairwise AI comparisons");
    add_data_options(pairwise, true);
    auto* validate_cmd = app.add_subcommand("validate", "Check a data file against the design assumptions");
    add_data_options(validate_cmd, false);

    SimulateOptions so;
    auto* simulate = app.add_subcommand("simulate", "Monte Carlo comparison of the techniques");
    simulate->add_option("--config", so.config, "Simulation config file");
    simulate->add_option("--preset", so.preset, "proto or asic_like");
    simulate->add_option("--rho", so.rho, "Within-person correlation(s)")->delimiter(',');
    simulate->add_option("--nu", so.nu, "Covariate-outcome correlation(s)")->delimiter(',');
    simulate->add_option("--delta", so.delta, "Standardized effect size");
    simulate->add_option("--n", so.n, "Units per replication");
    simulate->add_option("--reps", so.reps, "Replications");
    simulate->add_option("--techniques", so.techniques, "Techniques to compare")->delimiter(',');
    simulate->add_option("--contrast", so.contrast, "Target contrast");
    simulate->add_option("--per-rep", so.per_rep, "Write per-replication CSV here");

    std::vector<std::string> argv_store{"smarteff"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    g.seed_given = app.count("--seed") > 0;
    g.jobs_given = app.count("--jobs") > 0;

    try {
        std::string result;
        if (analyze->parsed()) result = cmd_analyze(g, a, *analyze, false);
        else if (pairwise->parsed()) result = cmd_analyze(g, a, *pairwise, true);
        else if (validate_cmd->parsed()) result = cmd_validate(g, a);
        else result = cmd_simulate(g, so);

        if (!g.output.empty()) {
            std::ofstream f(g.output);
            if (!f) throw InputError("cannot write output file '" + g.output + "'");
            f << result;
        } else {
            out << result;
        }
        return kOk;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kNumericalError;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << '\n';
        return kNumericalError;
    }
}

}  // namespace smarteff::cli
