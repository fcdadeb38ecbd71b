#pragma once

// Named analysis configurations: mean model x weights x working covariance
// x variance estimator, keyed by the fixed technique identifiers.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "smarteff/contrasts.hpp"
#include "smarteff/errors.hpp"
#include "smarteff/msm.hpp"
#include "smarteff/trial_data.hpp"
#include "smarteff/weights.hpp"

namespace smarteff {

enum class Technique { t0, t1, t2e, t2m, t3, t4, ensemble_e, ensemble_m };

inline constexpr std::array<Technique, 8> kAllTechniques{
    Technique::t0, Technique::t1, Technique::t2e, Technique::t2m,
    Technique::t3, Technique::t4, Technique::ensemble_e, Technique::ensemble_m};

inline const char* technique_id(Technique t) {
    switch (t) {
        case Technique::t0: return "t0";
        case Technique::t1: return "t1";
        case Technique::t2e: return "t2e";
        case Technique::t2m: return "t2m";
        case Technique::t3: return "t3";
        case Technique::t4: return "t4";
        case Technique::ensemble_e: return "ensemble_e";
        case Technique::ensemble_m: return "ensemble_m";
    }
    return "?";
}

inline std::string valid_technique_ids() {
    std::string s;
    for (auto t : kAllTechniques) {
        if (!s.empty()) s += ", ";
        s += technique_id(t);
    }
    return s;
}

inline Technique parse_technique(std::string_view id) {
    for (auto t : kAllTechniques)
        if (id == technique_id(t)) return t;
    throw InputError("unknown technique '" + std::string(id) + "'; valid ids: " + valid_technique_ids());
}

inline bool is_longitudinal(Technique t) {
    return t == Technique::t3 || t == Technique::t4 || t == Technique::ensemble_e || t == Technique::ensemble_m;
}

struct TechniqueOptions {
    std::vector<std::string> covariates;  // t1 and the ensembles
    std::vector<std::string> k1;          // t2m, ensemble_m
    std::vector<std::string> k2;
    int t_star = 0;                       // 0: take it from the dataset
    bool small_sample_correction = false;
};

struct TechniquePlan {
    Technique technique = Technique::t0;
    MeanModelSpec mean_model;
    WeightModel weights;
    CovarianceKind covariance = CovarianceKind::independence;
    VarianceMethod variance = VarianceMethod::known;
    bool final_occasion_only = true;
};

inline TechniquePlan plan_technique(Technique t, const SmartDataset& ds, const TechniqueOptions& opts) {
    const std::string id = technique_id(t);
    auto need_covariates = [&] {
        if (opts.covariates.empty()) throw InputError("technique " + id + " requires --covariates");
    };
    auto need_k = [&] {
        if (opts.k1.empty() && opts.k2.empty()) throw InputError("technique " + id + " requires --k1 and --k2");
        if (opts.k1.empty()) throw InputError("technique " + id + " requires --k1");
        if (opts.k2.empty()) throw InputError("technique " + id + " requires --k2");
    };
    int t_star = opts.t_star > 0 ? opts.t_star : (ds.t_star > 0 ? ds.t_star : 1);
    if (is_longitudinal(t) && ds.T < 2) throw InputError("longitudinal technique requires T ≥ 2");

    TechniquePlan plan;
    plan.technique = t;
    switch (t) {
        case Technique::t0: break;
        case Technique::t1:
            need_covariates();
            plan.mean_model = MeanModelSpec::covariate_adjusted(opts.covariates);
            break;
        case Technique::t2e:
            plan.weights = WeightModel::empirical();
            break;
        case Technique::t2m:
            need_k();
            plan.weights = WeightModel::modeled(opts.k1, opts.k2);
            break;
        case Technique::t3:
            plan.mean_model = MeanModelSpec::longitudinal(t_star);
            plan.covariance = CovarianceKind::exch_homogeneous;
            break;
        case Technique::t4:
            plan.mean_model = MeanModelSpec::longitudinal(t_star);
            plan.covariance = CovarianceKind::exch_heterogeneous;
            break;
        case Technique::ensemble_e:
            need_covariates();
            plan.mean_model = MeanModelSpec::longitudinal(t_star, opts.covariates);
            plan.weights = WeightModel::empirical();
            plan.covariance = CovarianceKind::exch_heterogeneous;
            break;
        case Technique::ensemble_m:
            need_covariates();
            need_k();
            plan.mean_model = MeanModelSpec::longitudinal(t_star, opts.covariates);
            plan.weights = WeightModel::modeled(opts.k1, opts.k2);
            plan.covariance = CovarianceKind::exch_heterogeneous;
            break;
    }
    plan.final_occasion_only = !is_longitudinal(t);
    plan.variance = plan.weights.kind == WeightKind::known ? VarianceMethod::known : VarianceMethod::weight_adjusted;
    return plan;
}

struct TechniqueFit {
    TechniquePlan plan;
    SmartDataset data;  // the data the model was fitted to
    WeightFit weights;
    GeeFit fit;

    ContrastResult contrast(const ContrastSpec& spec) const {
        if (spec.kind == ContrastKind::nonresponder_second_stage) return nonresponder_second_stage(data);
        return estimate_contrast(fit, spec, plan.variance);
    }
    std::vector<ContrastResult> pairwise() const { return pairwise_table(fit, plan.variance); }
};

inline TechniqueFit run_plan(const TechniquePlan& plan, const SmartDataset& ds, const TechniqueOptions& opts = {}) {
    TechniqueFit out;
    out.plan = plan;
    out.data = plan.final_occasion_only ? final_occasion_only(ds) : ds;
    // assignment models see the full record, including intermediate outcomes
    out.weights = compute_weights(ds, plan.weights);
    SolverOptions so;
    so.small_sample_correction = opts.small_sample_correction;
    out.fit = solve_estimating_equation(out.data, out.weights, plan.mean_model, plan.covariance, so);
    return out;
}

inline TechniqueFit run_technique(Technique t, const SmartDataset& ds, const TechniqueOptions& opts = {}) {
    return run_plan(plan_technique(t, ds, opts), ds, opts);
}

}  // namespace smarteff
