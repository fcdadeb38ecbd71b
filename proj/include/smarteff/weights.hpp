#pragma once

// Inverse-probability-of-assignment weights: known (design probabilities),
// empirical (sample proportions) and modeled (logistic assignment models),
// with per-record score contributions for the estimated-weight variance.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "smarteff/errors.hpp"
#include "smarteff/trial_data.hpp"

namespace smarteff {

enum class WeightKind { known, empirical, modeled };

inline const char* weight_kind_name(WeightKind k) {
    switch (k) {
        case WeightKind::known: return "known";
        case WeightKind::empirical: return "empirical";
        case WeightKind::modeled: return "modeled";
    }
    return "?";
}

/// Assignment-model specification. The stage-2 model always carries an
/// intercept and an a1 term, so empty k1/k2 reproduce the empirical weights.
struct WeightModel {
    WeightKind kind = WeightKind::known;
    std::vector<std::string> k1;
    std::vector<std::string> k2;

    static WeightModel known() { return {WeightKind::known, {}, {}}; }
    static WeightModel empirical() { return {WeightKind::empirical, {}, {}}; }
    static WeightModel modeled(std::vector<std::string> k1, std::vector<std::string> k2) {
        return {WeightKind::modeled, std::move(k1), std::move(k2)};
    }
};

struct LogisticFit {
    Eigen::VectorXd coefficients;
    bool converged = false;
    int iterations = 0;
    double max_abs_gradient = 0.0;
};

struct WeightFit {
    WeightKind kind = WeightKind::known;
    std::vector<double> weights;  // one per record
    Eigen::VectorXd omega_hat;    // stage-1 then stage-2 coefficients
    Eigen::MatrixXd scores;       // n x q; q = 0 for known weights
    std::vector<std::string> omega_names;
    bool extreme_weight_warning = false;

    bool estimated() const { return scores.cols() > 0; }
};

inline constexpr double kExtremeWeight = 1e6;

inline double expit(double v) {
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Newton-Raphson maximum likelihood for a logistic regression. Converges
/// when the max absolute gradient is below `tol` and the Newton step has
/// collapsed; a step that stays large while the gradient vanishes is the
/// signature of separation and keeps iterating until probabilities hit 0/1.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                                double tol = 1e-8, int max_iter = 50) {
    const Eigen::Index n = design.rows();
    const Eigen::Index q = design.cols();
    if (response.size() != n) throw InputError("logistic response length does not match design");
    for (Eigen::Index i = 0; i < n; ++i)
        if (response[i] != 0.0 && response[i] != 1.0)
            throw InputError("logistic response must be 0/1");
    if (n == 0 || q == 0) throw InputError("empty logistic design");

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < q) throw NumericalError("assignment model design is rank deficient");

    const double ysum = response.sum();
    if (ysum == 0.0 || ysum == static_cast<double>(n))
        throw NumericalError("separation: response is constant in the assignment model");

    constexpr double kBoundary = 1e-10;
    auto loglik = [&](const Eigen::VectorXd& eta) {
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double e = eta[i];
            // log(1 + exp(e)) without overflow
            const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
            ll += response[i] * e - log1pexp;
        }
        return ll;
    };

    LogisticFit fit;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);
    Eigen::VectorXd eta = design * beta;
    double ll = loglik(eta);
    for (int iter = 1; iter <= max_iter; ++iter) {
        fit.iterations = iter;
        Eigen::VectorXd p(n), w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p[i] = expit(eta[i]);
            if (p[i] < kBoundary || p[i] > 1.0 - kBoundary)
                throw NumericalError("separation: fitted assignment probability within 1e-10 of 0 or 1");
            w[i] = p[i] * (1.0 - p[i]);
        }
        const Eigen::VectorXd grad = design.transpose() * (response - p);
        const Eigen::MatrixXd info = design.transpose() * w.asDiagonal() * design;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        if (ldlt.info() != Eigen::Success) throw NumericalError("singular logistic information matrix");
        Eigen::VectorXd step = ldlt.solve(grad);
        fit.max_abs_gradient = grad.cwiseAbs().maxCoeff();
        if (fit.max_abs_gradient < tol && step.cwiseAbs().maxCoeff() < 1e-6) {
            // final full step
            beta += step;
            fit.converged = true;
            break;
        }
        // step halving keeps the log-likelihood monotone
        double scale = 1.0;
        Eigen::VectorXd candidate = beta + step;
        Eigen::VectorXd cand_eta = design * candidate;
        double cand_ll = loglik(cand_eta);
        const double slack = 1e-10 * (1.0 + std::abs(ll));  // round-off in the log-likelihood sum
        while (cand_ll < ll - slack && scale > 1e-8) {
            scale *= 0.5;
            candidate = beta + scale * step;
            cand_eta = design * candidate;
            cand_ll = loglik(cand_eta);
        }
        beta = std::move(candidate);
        eta = std::move(cand_eta);
        ll = cand_ll;
    }
    if (!fit.converged) throw NumericalError("logistic assignment model did not converge");
    fit.coefficients = std::move(beta);
    return fit;
}

namespace detail {

inline double received_prob(int code, double p_one) { return code == 1 ? p_one : 1.0 - p_one; }

using ColumnGetter = std::function<double(const TrialRecord&)>;

/// Resolves an assignment-model regressor name. Stage 1 accepts baseline
/// covariates and the baseline outcome; stage 2 also accepts auxiliaries and
/// outcomes measured up to t_star.
inline ColumnGetter resolve_regressor(const SmartDataset& ds, const std::string& name, int stage) {
    if (auto k = ds.covariate_index(name)) return [k = *k](const TrialRecord& r) { return r.x[k]; };
    if (name == "y_0" && ds.has_baseline) return [](const TrialRecord& r) { return *r.y0; };
    if (stage == 2) {
        if (auto k = ds.aux_index(name)) return [k = *k](const TrialRecord& r) { return r.aux[k]; };
        if (name.starts_with("y_")) {
            auto t = detail::parse_code(std::string_view(name).substr(2));
            if (t && *t >= 1 && *t <= ds.t_star)
                return [k = static_cast<std::size_t>(*t - 1)](const TrialRecord& r) { return r.y[k]; };
        }
        if (name == "a1") return [](const TrialRecord& r) { return static_cast<double>(r.a1); };
    }
    throw InputError("unknown stage-" + std::to_string(stage) + " weight-model regressor '" + name +
                     "'" + (stage == 1 ? " (stage 1 takes baseline covariates only)" : ""));
}

inline void check_weights(WeightFit& wf) {
    for (double w : wf.weights) {
        if (!(w > 0.0) || !std::isfinite(w)) throw NumericalError("non-positive or non-finite weight");
        if (w > kExtremeWeight) wf.extreme_weight_warning = true;
    }
}

inline void check_empirical_positivity(const SmartDataset& ds) {
    std::size_t n1 = 0;
    std::array<std::size_t, 2> nr{}, nr_a2{};
    for (const auto& rec : ds.records) {
        if (rec.a1 == 1) ++n1;
        if (!rec.responder()) {
            const int s = rec.a1 == 1 ? 0 : 1;
            ++nr[s];
            if (rec.a2 == 1) ++nr_a2[s];
        }
    }
    if (n1 == 0 || n1 == ds.n()) throw InputError("empirical positivity violated at stage 1");
    for (int s = 0; s < 2; ++s)
        if (nr[s] == 0 || nr_a2[s] == 0 || nr_a2[s] == nr[s])
            throw InputError("empirical positivity violated at stage 2 (a1 = " +
                             std::string(s == 0 ? "1" : "-1") + ")");
}

}  // namespace detail

/// Design weights: 1/p(A1) for responders, 1/(p(A1) p(A2)) for non-responders.
/// With p11 = p21 = 0.5 this is 2R + 4(1 - R).
inline WeightFit known_weights(const SmartDataset& ds) {
    const auto& p = ds.rand_probs;
    if (!(p.p11 > 0.0 && p.p11 < 1.0 && p.p21 > 0.0 && p.p21 < 1.0))
        throw InputError("randomization probabilities must lie in (0, 1)");
    WeightFit wf;
    wf.kind = WeightKind::known;
    wf.weights.reserve(ds.n());
    for (const auto& rec : ds.records) {
        double prob = detail::received_prob(rec.a1, p.p11);
        if (!rec.responder()) prob *= detail::received_prob(rec.a2.value_or(1), p.p21);
        wf.weights.push_back(1.0 / prob);
    }
    wf.scores.resize(static_cast<Eigen::Index>(ds.n()), 0);
    detail::check_weights(wf);
    return wf;
}

inline WeightFit modeled_weights(const SmartDataset& ds, const WeightModel& model) {
    const auto n = static_cast<Eigen::Index>(ds.n());

    std::vector<detail::ColumnGetter> k1;
    std::vector<std::string> names1{"stage1:intercept"};
    for (const auto& name : model.k1) {
        k1.push_back(detail::resolve_regressor(ds, name, 1));
        names1.push_back("stage1:" + name);
    }
    std::vector<detail::ColumnGetter> k2;
    std::vector<std::string> names2{"stage2:intercept", "stage2:a1"};
    for (const auto& name : model.k2) {
        if (name == "a1") continue;  // always present
        k2.push_back(detail::resolve_regressor(ds, name, 2));
        names2.push_back("stage2:" + name);
    }

    const auto q1 = static_cast<Eigen::Index>(k1.size() + 1);
    const auto q2 = static_cast<Eigen::Index>(k2.size() + 2);

    Eigen::MatrixXd d1(n, q1);
    Eigen::VectorXd y1(n);
    std::vector<Eigen::Index> nonresp;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& rec = ds.records[static_cast<std::size_t>(i)];
        d1(i, 0) = 1.0;
        for (Eigen::Index j = 1; j < q1; ++j) d1(i, j) = k1[static_cast<std::size_t>(j - 1)](rec);
        y1[i] = rec.a1 == 1 ? 1.0 : 0.0;
        if (!rec.responder()) nonresp.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(nonresp.size());
    if (m == 0) throw InputError("stage-2 assignment model needs non-responders");
    Eigen::MatrixXd d2(m, q2);
    Eigen::VectorXd y2(m);
    for (Eigen::Index j = 0; j < m; ++j) {
        const auto& rec = ds.records[static_cast<std::size_t>(nonresp[static_cast<std::size_t>(j)])];
        d2(j, 0) = 1.0;
        d2(j, 1) = rec.a1;
        for (Eigen::Index c = 2; c < q2; ++c) d2(j, c) = k2[static_cast<std::size_t>(c - 2)](rec);
        y2[j] = rec.a2 == 1 ? 1.0 : 0.0;
    }

    const LogisticFit f1 = fit_logistic(d1, y1);
    const LogisticFit f2 = fit_logistic(d2, y2);

    WeightFit wf;
    wf.kind = model.kind == WeightKind::empirical ? WeightKind::empirical : WeightKind::modeled;
    wf.omega_hat.resize(q1 + q2);
    wf.omega_hat << f1.coefficients, f2.coefficients;
    wf.omega_names = names1;
    wf.omega_names.insert(wf.omega_names.end(), names2.begin(), names2.end());
    wf.scores = Eigen::MatrixXd::Zero(n, q1 + q2);
    wf.weights.assign(ds.n(), 0.0);

    const Eigen::VectorXd p1 = (d1 * f1.coefficients).unaryExpr([](double v) { return expit(v); });
    for (Eigen::Index i = 0; i < n; ++i) {
        wf.weights[static_cast<std::size_t>(i)] = 1.0 / detail::received_prob(ds.records[i].a1, p1[i]);
        wf.scores.row(i).head(q1) = d1.row(i) * (y1[i] - p1[i]);
    }
    const Eigen::VectorXd p2 = (d2 * f2.coefficients).unaryExpr([](double v) { return expit(v); });
    for (Eigen::Index j = 0; j < m; ++j) {
        const Eigen::Index i = nonresp[static_cast<std::size_t>(j)];
        wf.weights[static_cast<std::size_t>(i)] /= detail::received_prob(ds.records[i].a2.value_or(1), p2[j]);
        wf.scores.row(i).tail(q2) = d2.row(j) * (y2[j] - p2[j]);
    }
    detail::check_weights(wf);
    return wf;
}

/// Sample-proportion weights: the intercept-only special case of the modeled
/// weights (stage 2 saturated in the a1 strata).
inline WeightFit empirical_weights(const SmartDataset& ds) {
    detail::check_empirical_positivity(ds);
    return modeled_weights(ds, WeightModel::empirical());
}

inline WeightFit compute_weights(const SmartDataset& ds, const WeightModel& model) {
    switch (model.kind) {
        case WeightKind::known: return known_weights(ds);
        case WeightKind::empirical: return empirical_weights(ds);
        case WeightKind::modeled:
            detail::check_empirical_positivity(ds);
            return modeled_weights(ds, model);
    }
    throw InputError("unknown weight kind");
}

}  // namespace smarteff
