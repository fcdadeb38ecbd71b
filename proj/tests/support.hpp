#pragma once

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smarteff/smarteff.hpp"

namespace testsupport {

using namespace smarteff;

struct RandomSpec {
    int n_min = 20;
    int n_max = 200;
    int T = 1;
    int covariates = 0;
    int aux = 0;
    bool baseline = false;
    int t_star = 0;  // 0: dataset default
    RandProbs probs{};
};

/// A valid dataset with every design cell occupied. Outcomes carry a
/// treatment signal, covariate effects and within-unit correlation.
inline SmartDataset random_dataset(std::mt19937_64& rng, const RandomSpec& spec) {
    std::uniform_int_distribution<int> nd(spec.n_min, spec.n_max);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    const int n = nd(rng);

    SmartDataset ds;
    ds.T = spec.T;
    ds.t_star = spec.t_star > 0 ? spec.t_star : (spec.T >= 2 ? 1 : 0);
    ds.has_baseline = spec.baseline;
    ds.rand_probs = spec.probs;
    for (int j = 0; j < spec.covariates; ++j) ds.covariate_names.push_back("c" + std::to_string(j + 1));
    for (int j = 0; j < spec.aux; ++j) ds.aux_names.push_back("aux" + std::to_string(j + 1));

    const double effect1 = z(rng), effect2 = z(rng), resp_shift = 0.5 * z(rng);
    for (int i = 0; i < n; ++i) {
        TrialRecord rec;
        rec.id = "u" + std::to_string(i + 1);
        int cell;
        if (i < 6) {
            cell = i + 1;  // one unit per design cell first
        } else {
            const int a1 = u(rng) < spec.probs.p11 ? 1 : -1;
            const bool resp = u(rng) < 0.4;
            const int a2 = u(rng) < spec.probs.p21 ? 1 : -1;
            cell = (a1 == 1 ? 1 : 4) + (resp ? 0 : (a2 == 1 ? 1 : 2));
        }
        rec.a1 = cell <= 3 ? 1 : -1;
        const int within = (cell - 1) % 3;
        rec.r = within == 0 ? 1 : 0;
        if (within == 1) rec.a2 = 1;
        if (within == 2) rec.a2 = -1;

        double xb = 0.0;
        for (int j = 0; j < spec.covariates; ++j) {
            rec.x.push_back(z(rng) + 0.3 * j);
            xb += 0.4 * rec.x.back();
        }
        for (int j = 0; j < spec.aux; ++j) rec.aux.push_back(u(rng) < 0.5 ? 1.0 : 0.0);
        const double unit = z(rng);
        if (spec.baseline) rec.y0 = xb + 0.8 * unit + 0.6 * z(rng);
        const double a2v = rec.a2.value_or(0);
        for (int t = 1; t <= spec.T; ++t) {
            const double trend = 0.3 * t + 0.2 * rec.a1 * t * effect1 +
                                 (t > ds.t_star && ds.t_star > 0 ? effect2 * a2v + resp_shift * rec.r : 0.0);
            const double single = spec.T == 1 ? effect1 * rec.a1 + effect2 * a2v + resp_shift * rec.r : 0.0;
            rec.y.push_back(1.0 + trend + single + xb + 0.8 * unit + (0.5 + 0.2 * t) * z(rng));
        }
        ds.records.push_back(std::move(rec));
    }
    std::shuffle(ds.records.begin(), ds.records.end(), rng);
    return ds;
}

/// Dataset with exact 50/50 splits at both stages: for each a1,
/// `resp` responders and `nr_per_arm` non-responders per a2 arm.
inline SmartDataset balanced_dataset(std::mt19937_64& rng, int resp, int nr_per_arm, int T = 1,
                                     bool baseline = false, int covariates = 0) {
    std::normal_distribution<double> z;
    SmartDataset ds;
    ds.T = T;
    ds.t_star = T >= 2 ? 1 : 0;
    ds.has_baseline = baseline;
    for (int j = 0; j < covariates; ++j) ds.covariate_names.push_back("c" + std::to_string(j + 1));
    int id = 0;
    auto add = [&](int a1, int r, std::optional<int> a2) {
        TrialRecord rec;
        rec.id = "b" + std::to_string(++id);
        rec.a1 = a1;
        rec.r = r;
        rec.a2 = a2;
        for (int j = 0; j < covariates; ++j) rec.x.push_back(z(rng));
        if (baseline) rec.y0 = z(rng);
        const double unit = z(rng);
        for (int t = 1; t <= T; ++t) rec.y.push_back(0.5 * a1 + 0.3 * a2.value_or(0) + unit + z(rng));
        ds.records.push_back(std::move(rec));
    };
    for (int a1 : {1, -1}) {
        for (int k = 0; k < resp; ++k) add(a1, 1, std::nullopt);
        for (int a2 : {1, -1})
            for (int k = 0; k < nr_per_arm; ++k) add(a1, 0, a2);
    }
    return ds;
}

/// Model covariate values for a record, centered by the fit's means.
inline std::vector<double> centered_covariates(const GeeFit& fit, const SmartDataset& ds, const TrialRecord& rec) {
    std::vector<double> x;
    const auto& names = fit.spec.covariates;
    for (std::size_t k = 0; k < fit.spec.covariate_params(); ++k) {
        double v;
        if (names[k] == "y_0") v = *rec.y0;
        else v = rec.x[*ds.covariate_index(names[k])];
        x.push_back(v - fit.covariate_means[k]);
    }
    return x;
}

/// Outcome vector at the fit's occasions.
inline Eigen::VectorXd outcome_vector(const GeeFit& fit, const TrialRecord& rec) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(fit.times.size()));
    for (std::size_t k = 0; k < fit.times.size(); ++k) {
        const int t = fit.times[k];
        y[static_cast<Eigen::Index>(k)] = t == 0 ? *rec.y0 : rec.y[static_cast<std::size_t>(t - 1)];
    }
    return y;
}

/// sum_i sum_d W_i 1_d D_d' V_d^-1 (Y_i - mu_d) / n, assembled directly
/// from design_rows and working_cov_matrix.
inline Eigen::VectorXd estimating_equation_oracle(const GeeFit& fit, const SmartDataset& ds, const WeightFit& wf) {
    const auto m = static_cast<Eigen::Index>(fit.times.size());
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(fit.theta.size());
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        const auto x = centered_covariates(fit, ds, rec);
        const Eigen::VectorXd y = outcome_vector(fit, rec);
        for (const auto& ai : consistent_ais(rec)) {
            const Eigen::MatrixXd D = design_rows(ai, fit.spec, x, fit.times);
            const Eigen::MatrixXd V = working_cov_matrix(fit.working_covariance(ai.index()), m);
            acc += wf.weights[i] * D.transpose() * V.inverse() * (y - D * fit.theta);
        }
    }
    return acc / static_cast<double>(ds.n());
}

/// Clustered heteroskedasticity-robust covariance written out with explicit
/// loops: (sum W D'V^-1 D)^-1 (sum_i U_i U_i') (sum W D'V^-1 D)^-1.
inline Eigen::MatrixXd clustered_hc_oracle(const GeeFit& fit, const SmartDataset& ds, const WeightFit& wf) {
    const auto m = static_cast<Eigen::Index>(fit.times.size());
    const auto p = fit.theta.size();
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(p, p), meat = Eigen::MatrixXd::Zero(p, p);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        const auto x = centered_covariates(fit, ds, rec);
        const Eigen::VectorXd y = outcome_vector(fit, rec);
        Eigen::VectorXd U = Eigen::VectorXd::Zero(p);
        for (const auto& ai : consistent_ais(rec)) {
            const Eigen::MatrixXd D = design_rows(ai, fit.spec, x, fit.times);
            const Eigen::MatrixXd Vi = working_cov_matrix(fit.working_covariance(ai.index()), m).inverse();
            B += wf.weights[i] * D.transpose() * Vi * D;
            U += wf.weights[i] * D.transpose() * Vi * (y - D * fit.theta);
        }
        meat += U * U.transpose();
    }
    const Eigen::MatrixXd Bi = B.inverse();
    return Bi * meat * Bi;
}

inline SmartDataset permuted(const SmartDataset& ds, std::uint64_t seed) {
    SmartDataset out = ds;
    std::mt19937_64 rng(seed);
    std::shuffle(out.records.begin(), out.records.end(), rng);
    return out;
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace testsupport
