#pragma once

// Linear contrasts of the fitted coefficients: AI differences, stage main
// effects, Wald intervals; plus the non-responder second-stage comparison.

#include <Eigen/Dense>

#include <array>
#include <cctype>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "smarteff/errors.hpp"
#include "smarteff/msm.hpp"
#include "smarteff/trial_data.hpp"

namespace smarteff {

inline constexpr double kZ975 = 1.959964;

enum class VarianceMethod { known, weight_adjusted };

inline const char* variance_method_name(VarianceMethod m) {
    return m == VarianceMethod::known ? "known" : "weight_adjusted";
}

/// Weight-adjusted when the fit carries it, known otherwise.
inline VarianceMethod default_variance_method(const GeeFit& fit) {
    return fit.vcov_weight_adjusted ? VarianceMethod::weight_adjusted : VarianceMethod::known;
}

enum class ContrastKind { ai_difference, first_stage_main, second_stage_main, custom, nonresponder_second_stage };

struct ContrastSpec {
    ContrastKind kind = ContrastKind::ai_difference;
    AiLabel lhs{1, 1};
    AiLabel rhs{-1, -1};
    std::vector<double> coefficients;  // custom only

    static ContrastSpec difference(AiLabel a, AiLabel b) { return {ContrastKind::ai_difference, a, b, {}}; }
    static ContrastSpec first_stage() { return {ContrastKind::first_stage_main, {}, {}, {}}; }
    static ContrastSpec second_stage() { return {ContrastKind::second_stage_main, {}, {}, {}}; }
    static ContrastSpec nonresponders() { return {ContrastKind::nonresponder_second_stage, {}, {}, {}}; }
    static ContrastSpec custom(std::vector<double> c) { return {ContrastKind::custom, {}, {}, std::move(c)}; }

    std::string label() const {
        switch (kind) {
            case ContrastKind::ai_difference: return lhs.str() + "-" + rhs.str();
            case ContrastKind::first_stage_main: return "first-stage";
            case ContrastKind::second_stage_main: return "second-stage";
            case ContrastKind::nonresponder_second_stage: return "second-stage|nonresponders";
            case ContrastKind::custom: {
                std::string s = "[";
                for (std::size_t i = 0; i < coefficients.size(); ++i) {
                    if (i) s += ",";
                    s += detail::format_double(coefficients[i]);
                }
                return s + "]";
            }
        }
        return "?";
    }
};

struct ContrastResult {
    std::string label;
    double estimate = 0.0;
    double se = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double z = 0.0;
    double p_value = 1.0;
    VarianceMethod method = VarianceMethod::known;

    double ci_length() const { return ci_high - ci_low; }
};

namespace detail {

inline AiLabel parse_ai(std::string_view s) {
    auto t = trim(s);
    if (t.size() < 2 || t.front() != '(' || t.back() != ')')
        throw InputError("malformed AI label '" + std::string(s) + "'");
    auto parts = split_csv_line(t.substr(1, t.size() - 2));
    if (parts.size() != 2) throw InputError("AI label needs two codes: '" + std::string(s) + "'");
    auto a1 = parse_code(parts[0]);
    auto a2 = parse_code(parts[1]);
    if (!a1 || !a2) throw InputError("malformed AI label '" + std::string(s) + "'");
    return AiLabel::make(*a1, *a2);
}

}  // namespace detail

/// Accepts "(1,1)-(-1,-1)", "first-stage", "second-stage",
/// "second-stage|nonresponders", or a coefficient vector "0,2,2,0" / "[0,2,2,0]".
inline ContrastSpec parse_contrast(std::string_view text) {
    const std::string s{detail::trim(text)};
    if (s == "first-stage") return ContrastSpec::first_stage();
    if (s == "second-stage") return ContrastSpec::second_stage();
    if (s == "second-stage|nonresponders") return ContrastSpec::nonresponders();
    if (!s.empty() && s.front() == '(') {
        const auto close = s.find(')');
        if (close == std::string::npos || close + 1 >= s.size() || s[close + 1] != '-')
            throw InputError("malformed contrast '" + s + "'");
        return ContrastSpec::difference(detail::parse_ai(s.substr(0, close + 1)),
                                        detail::parse_ai(s.substr(close + 2)));
    }
    std::string body = s;
    if (!body.empty() && body.front() == '[') {
        if (body.back() != ']') throw InputError("malformed contrast vector '" + s + "'");
        body = body.substr(1, body.size() - 2);
    }
    std::vector<double> c;
    for (const auto& part : detail::split_csv_line(body)) {
        auto v = detail::parse_double(part);
        if (!v) throw InputError("unrecognized contrast '" + s + "'");
        c.push_back(*v);
    }
    if (c.empty()) throw InputError("empty contrast");
    return ContrastSpec::custom(std::move(c));
}

/// Coefficient-space vector c with estimate c' theta, evaluated at
/// `final_time` for longitudinal models.
inline Eigen::VectorXd contrast_vector(const ContrastSpec& spec, const MeanModelSpec& model, int final_time) {
    const auto p = static_cast<Eigen::Index>(model.param_count());
    const std::vector<double> zeros(model.covariate_params(), 0.0);
    const std::array<int, 1> at{final_time};
    auto row = [&](AiLabel ai) -> Eigen::VectorXd {
        return design_rows(ai, model, zeros, at).row(0).transpose();
    };
    switch (spec.kind) {
        case ContrastKind::ai_difference: return row(spec.lhs) - row(spec.rhs);
        case ContrastKind::first_stage_main:
            return 0.5 * ((row({1, 1}) - row({-1, 1})) + (row({1, -1}) - row({-1, -1})));
        case ContrastKind::second_stage_main:
            return 0.5 * ((row({1, 1}) - row({1, -1})) + (row({-1, 1}) - row({-1, -1})));
        case ContrastKind::custom: {
            if (static_cast<Eigen::Index>(spec.coefficients.size()) != p)
                throw InputError("contrast vector has " + std::to_string(spec.coefficients.size()) +
                                 " entries; the model has " + std::to_string(p) + " coefficients");
            return Eigen::Map<const Eigen::VectorXd>(spec.coefficients.data(), p);
        }
        case ContrastKind::nonresponder_second_stage:
            throw InputError("the non-responder comparison is not a contrast of the marginal model");
    }
    return Eigen::VectorXd::Zero(p);
}

inline ContrastResult wald_result(std::string label, double estimate, double variance, VarianceMethod method) {
    ContrastResult r;
    r.label = std::move(label);
    r.method = method;
    r.estimate = estimate;
    r.se = std::sqrt(std::max(variance, 0.0));
    r.ci_low = estimate - kZ975 * r.se;
    r.ci_high = estimate + kZ975 * r.se;
    if (r.se > 0.0) {
        r.z = estimate / r.se;
        r.p_value = std::erfc(std::abs(r.z) / std::sqrt(2.0));
    } else {
        r.z = estimate == 0.0 ? 0.0 : std::copysign(INFINITY, estimate);
        r.p_value = estimate == 0.0 ? 1.0 : 0.0;
    }
    return r;
}

inline const Eigen::MatrixXd& vcov_for(const GeeFit& fit, VarianceMethod method) {
    if (method == VarianceMethod::weight_adjusted) {
        if (!fit.vcov_weight_adjusted)
            throw InputError("weight-adjusted variance requested but the weights were not estimated");
        return *fit.vcov_weight_adjusted;
    }
    return fit.vcov_known;
}

inline ContrastResult estimate_contrast(const GeeFit& fit, const Eigen::VectorXd& c, VarianceMethod method,
                                        std::string label = "contrast") {
    if (c.size() != fit.theta.size()) throw InputError("contrast length does not match the fit");
    const Eigen::MatrixXd& V = vcov_for(fit, method);
    return wald_result(std::move(label), c.dot(fit.theta), c.dot(V * c), method);
}

inline ContrastResult estimate_contrast(const GeeFit& fit, const ContrastSpec& spec, VarianceMethod method) {
    return estimate_contrast(fit, contrast_vector(spec, fit.spec, fit.final_time()), method, spec.label());
}

inline ContrastResult estimate_contrast(const GeeFit& fit, const ContrastSpec& spec) {
    return estimate_contrast(fit, spec, default_variance_method(fit));
}

/// The six pairwise AI differences, in the fixed report order.
inline constexpr std::array<std::pair<AiLabel, AiLabel>, 6> kPairwiseOrder{{
    {{1, 1}, {-1, -1}},
    {{-1, 1}, {-1, -1}},
    {{1, -1}, {-1, -1}},
    {{1, -1}, {-1, 1}},
    {{1, 1}, {1, -1}},
    {{1, 1}, {-1, 1}},
}};

inline std::vector<ContrastResult> pairwise_table(const GeeFit& fit, VarianceMethod method) {
    std::vector<ContrastResult> out;
    for (const auto& [a, b] : kPairwiseOrder)
        out.push_back(estimate_contrast(fit, ContrastSpec::difference(a, b), method));
    return out;
}

inline std::vector<ContrastResult> pairwise_table(const GeeFit& fit) {
    return pairwise_table(fit, default_variance_method(fit));
}

/// Difference in mean final outcome between a2 = 1 and a2 = -1 among
/// non-responders, weighted by the inverse stage-2 probability, with a
/// heteroskedasticity-robust variance.
inline ContrastResult nonresponder_second_stage(const SmartDataset& ds) {
    std::vector<const TrialRecord*> nr;
    for (const auto& rec : ds.records)
        if (!rec.responder()) nr.push_back(&rec);
    if (nr.empty()) throw InputError("no non-responders in the data");
    int n_pos = 0;
    for (auto* rec : nr) n_pos += *rec->a2 == 1;
    if (n_pos == 0 || n_pos == static_cast<int>(nr.size()))
        throw InputError("non-responders observed under one second-stage option only");

    Eigen::Matrix2d B = Eigen::Matrix2d::Zero();
    Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
    for (auto* rec : nr) {
        const double w = 1.0 / detail::received_prob(*rec->a2, ds.rand_probs.p21);
        const Eigen::Vector2d x(1.0, *rec->a2);
        B += w * x * x.transpose();
        rhs += w * x * rec->y.back();
    }
    const Eigen::Matrix2d Binv = B.inverse();
    const Eigen::Vector2d b = Binv * rhs;
    Eigen::Matrix2d meat = Eigen::Matrix2d::Zero();
    for (auto* rec : nr) {
        const double w = 1.0 / detail::received_prob(*rec->a2, ds.rand_probs.p21);
        const Eigen::Vector2d x(1.0, *rec->a2);
        const double e = rec->y.back() - x.dot(b);
        meat += (w * e) * (w * e) * x * x.transpose();
    }
    const Eigen::Matrix2d V = Binv * meat * Binv;
    return wald_result("second-stage|nonresponders", 2.0 * b[1], 4.0 * V(1, 1), VarianceMethod::known);
}

}  // namespace smarteff
