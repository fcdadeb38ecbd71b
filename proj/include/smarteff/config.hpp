#pragma once

// key = value configuration files: '#' starts a comment, lists are written
// [a, b, c]. Keys mirror the SimConfig and analysis option names.

#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smarteff/errors.hpp"
#include "smarteff/simulator.hpp"
#include "smarteff/techniques.hpp"
#include "smarteff/trial_data.hpp"

namespace smarteff {

class ConfigMap {
public:
    static ConfigMap parse(std::istream& in) {
        ConfigMap cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto t = detail::trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string_view::npos)
                throw InputError("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key{detail::trim(t.substr(0, eq))};
            const std::string value{detail::trim(t.substr(eq + 1))};
            if (key.empty()) throw InputError("config line " + std::to_string(lineno) + ": empty key");
            if (cfg.values_.contains(key))
                throw InputError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static ConfigMap parse(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    bool has(const std::string& key) const { return values_.contains(key); }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get_string(const std::string& key) const { return values_.at(key); }

    double get_double(const std::string& key) const {
        auto v = detail::parse_double(values_.at(key));
        if (!v) throw InputError("config key '" + key + "' must be a number");
        return *v;
    }

    long long get_int(const std::string& key) const {
        const double v = get_double(key);
        if (v != static_cast<double>(static_cast<long long>(v)))
            throw InputError("config key '" + key + "' must be an integer");
        return static_cast<long long>(v);
    }

    bool get_bool(const std::string& key) const {
        const auto& v = values_.at(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw InputError("config key '" + key + "' must be true or false");
    }

    /// "[a, b]" or a bare scalar; quotes around items are stripped.
    std::vector<std::string> get_list(const std::string& key) const {
        std::string v = values_.at(key);
        if (!v.empty() && v.front() == '[') {
            if (v.back() != ']') throw InputError("config key '" + key + "': unterminated list");
            v = v.substr(1, v.size() - 2);
        }
        std::vector<std::string> out;
        if (detail::trim(v).empty()) return out;
        for (auto& item : detail::split_csv_line(v)) {
            std::string s{detail::trim(item)};
            if (s.size() >= 2 && (s.front() == '\'' || s.front() == '"') && s.back() == s.front())
                s = s.substr(1, s.size() - 2);
            out.push_back(s);
        }
        return out;
    }

    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : get_list(key)) {
            auto v = detail::parse_double(s);
            if (!v) throw InputError("config key '" + key + "' must hold numbers");
            out.push_back(*v);
        }
        return out;
    }

    void require_known(const std::vector<std::string>& known) const {
        for (const auto& [k, v] : values_) {
            bool ok = false;
            for (const auto& name : known) ok = ok || name == k;
            if (!ok) throw InputError("unknown config key '" + k + "'");
        }
    }

private:
    std::map<std::string, std::string> values_;
};

/// A simulation study: a base configuration plus the (rho, nu) grid.
struct SimStudySpec {
    SimConfig base;
    std::vector<double> rho{0.5};
    std::vector<double> nu{0.3};
    std::optional<unsigned> jobs;
};

inline const std::vector<std::string>& sim_config_keys() {
    static const std::vector<std::string> keys{
        "design", "n", "reps", "seed", "rho", "nu", "delta", "sigma", "lambda1", "lambda2",
        "response_rate", "eta1", "covariate_correlation", "techniques", "contrast", "jobs"};
    return keys;
}

inline SimStudySpec sim_study_from_config(const ConfigMap& c) {
    c.require_known(sim_config_keys());
    SimStudySpec s;
    auto& b = s.base;
    if (c.has("design")) b.design = parse_design(c.get_string("design"));
    if (c.has("n")) b.n = static_cast<int>(c.get_int("n"));
    if (c.has("reps")) b.reps = static_cast<int>(c.get_int("reps"));
    if (c.has("seed")) {
        const long long seed = c.get_int("seed");
        if (seed < 0) throw InputError("seed must be non-negative");
        b.seed = static_cast<std::uint64_t>(seed);
    }
    if (c.has("rho")) s.rho = c.get_double_list("rho");
    if (c.has("nu")) s.nu = c.get_double_list("nu");
    if (c.has("delta")) b.delta = c.get_double("delta");
    if (c.has("sigma")) b.sigma = c.get_double("sigma");
    if (c.has("lambda1")) b.lambda1 = c.get_double("lambda1");
    if (c.has("lambda2")) b.lambda2 = c.get_double("lambda2");
    if (c.has("response_rate")) b.response_rate = c.get_double("response_rate");
    if (c.has("eta1")) b.eta1 = c.get_double("eta1");
    if (c.has("covariate_correlation")) b.covariate_correlation = c.get_double("covariate_correlation");
    if (c.has("techniques")) {
        b.techniques.clear();
        for (const auto& id : c.get_list("techniques")) b.techniques.push_back(parse_technique(id));
    }
    if (c.has("contrast")) b.target = parse_contrast(c.get_string("contrast"));
    if (c.has("jobs")) s.jobs = static_cast<unsigned>(c.get_int("jobs"));
    if (s.rho.empty() || s.nu.empty()) throw InputError("rho and nu lists must be non-empty");
    return s;
}

/// Analysis options read from a config file.
struct AnalysisSpec {
    std::optional<Technique> technique;
    std::optional<WeightKind> weights;  // overrides the technique's weights
    TechniqueOptions options;
    std::vector<std::string> contrasts;
    std::optional<int> T;
    std::optional<RandProbs> probs;
};

inline WeightKind parse_weight_kind(std::string_view s) {
    if (s == "known") return WeightKind::known;
    if (s == "empirical") return WeightKind::empirical;
    if (s == "modeled") return WeightKind::modeled;
    throw InputError("weights must be known, empirical or modeled");
}

inline AnalysisSpec analysis_from_config(const ConfigMap& c) {
    c.require_known({"technique", "weights", "k1", "k2", "covariates", "t_star", "contrast", "T", "p11", "p21",
                     "small_sample_correction"});
    AnalysisSpec a;
    if (c.has("technique")) a.technique = parse_technique(c.get_string("technique"));
    if (c.has("weights")) a.weights = parse_weight_kind(c.get_string("weights"));
    if (c.has("k1")) a.options.k1 = c.get_list("k1");
    if (c.has("k2")) a.options.k2 = c.get_list("k2");
    if (c.has("covariates")) a.options.covariates = c.get_list("covariates");
    if (c.has("t_star")) a.options.t_star = static_cast<int>(c.get_int("t_star"));
    if (c.has("small_sample_correction")) a.options.small_sample_correction = c.get_bool("small_sample_correction");
    if (c.has("contrast")) {
        const auto v = c.get_string("contrast");
        // a bare contrast string contains commas of its own
        a.contrasts = !v.empty() && v.front() == '[' ? c.get_list("contrast") : std::vector<std::string>{v};
    }
    if (c.has("T")) a.T = static_cast<int>(c.get_int("T"));
    if (c.has("p11") || c.has("p21")) {
        RandProbs p;
        if (c.has("p11")) p.p11 = c.get_double("p11");
        if (c.has("p21")) p.p21 = c.get_double("p21");
        a.probs = p;
    }
    return a;
}

}  // namespace smarteff
