#pragma once

// Marginal structural mean models for the embedded AIs, the weighted
// estimating-equation solver (independence / exchangeable working
// covariances), and the plug-in sandwich variances.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smarteff/errors.hpp"
#include "smarteff/trial_data.hpp"
#include "smarteff/weights.hpp"

namespace smarteff {

enum class MeanModelKind { cross_sectional, covariate_adjusted, longitudinal };

/// Mean model for the AI means.
///  - cross_sectional:     g0 + g1 a1 + g2 a2 + g3 a1 a2 at the final occasion
///  - covariate_adjusted:  the same plus x'beta (covariates centered before fitting)
///  - longitudinal:        piecewise-linear trajectory with a knot at t_star,
///                         optionally plus x'beta
struct MeanModelSpec {
    MeanModelKind kind = MeanModelKind::cross_sectional;
    int t_star = 1;
    std::vector<std::string> covariates;

    static MeanModelSpec cross_sectional() { return {}; }
    static MeanModelSpec covariate_adjusted(std::vector<std::string> names) {
        return {MeanModelKind::covariate_adjusted, 1, std::move(names)};
    }
    static MeanModelSpec longitudinal(int t_star, std::vector<std::string> names = {}) {
        return {MeanModelKind::longitudinal, t_star, std::move(names)};
    }

    bool is_longitudinal() const { return kind == MeanModelKind::longitudinal; }
    std::size_t treatment_params() const { return is_longitudinal() ? 7 : 4; }
    std::size_t covariate_params() const {
        return kind == MeanModelKind::cross_sectional ? 0 : covariates.size();
    }
    std::size_t param_count() const { return treatment_params() + covariate_params(); }

    std::vector<std::string> param_names() const {
        std::vector<std::string> out;
        for (std::size_t k = 0; k < treatment_params(); ++k) out.push_back("gamma" + std::to_string(k));
        for (std::size_t k = 0; k < covariate_params(); ++k) out.push_back("beta:" + covariates[k]);
        return out;
    }
};

/// Jacobian of the mean trajectory for AI `ai` at the given occasions (one
/// row per occasion; a single row for the non-longitudinal models). `x` must
/// hold the model's covariates in order.
inline Eigen::MatrixXd design_rows(const AiLabel& ai, const MeanModelSpec& spec,
                                   std::span<const double> x, std::span<const int> times) {
    const auto p = static_cast<Eigen::Index>(spec.param_count());
    const auto k = static_cast<Eigen::Index>(spec.covariate_params());
    if (static_cast<Eigen::Index>(x.size()) != k)
        throw InputError("covariate vector length does not match the mean model");
    const double a1 = ai.a1, a2 = ai.a2nr;
    const Eigen::Index rows = spec.is_longitudinal() ? static_cast<Eigen::Index>(times.size()) : 1;
    Eigen::MatrixXd D(rows, p);
    for (Eigen::Index r = 0; r < rows; ++r) {
        Eigen::Index c = 0;
        if (spec.is_longitudinal()) {
            const double t = times[static_cast<std::size_t>(r)];
            const double pre = std::min<double>(t, spec.t_star);
            const double post = std::max<double>(t - spec.t_star, 0.0);
            D(r, c++) = 1.0;
            D(r, c++) = pre;
            D(r, c++) = a1 * pre;
            D(r, c++) = post;
            D(r, c++) = a1 * post;
            D(r, c++) = a2 * post;
            D(r, c++) = a1 * a2 * post;
        } else {
            D(r, c++) = 1.0;
            D(r, c++) = a1;
            D(r, c++) = a2;
            D(r, c++) = a1 * a2;
        }
        for (Eigen::Index j = 0; j < k; ++j) D(r, c++) = x[static_cast<std::size_t>(j)];
    }
    return D;
}

inline Eigen::MatrixXd design_rows(const AiLabel& ai, const MeanModelSpec& spec,
                                   std::span<const double> x, int T) {
    std::vector<int> times(static_cast<std::size_t>(std::max(T, 1)));
    for (std::size_t t = 0; t < times.size(); ++t) times[t] = static_cast<int>(t) + 1;
    return design_rows(ai, spec, x, times);
}

enum class CovarianceKind { independence, exch_homogeneous, exch_heterogeneous };

inline const char* covariance_kind_name(CovarianceKind k) {
    switch (k) {
        case CovarianceKind::independence: return "independence";
        case CovarianceKind::exch_homogeneous: return "exchangeable-homogeneous";
        case CovarianceKind::exch_heterogeneous: return "exchangeable-heterogeneous";
    }
    return "?";
}

struct WorkingCovariance {
    CovarianceKind kind = CovarianceKind::independence;
    std::vector<double> sigma{1.0};  // one entry, or one per occasion
    double rho = 0.0;
};

/// Lower end of the open interval of correlations giving a positive
/// definite exchangeable matrix of size m.
inline double exchangeable_rho_lower(Eigen::Index m) {
    return m >= 2 ? -1.0 / static_cast<double>(m - 1) : -1.0;
}

inline Eigen::MatrixXd working_cov_matrix(const WorkingCovariance& wc, Eigen::Index m) {
    if (wc.sigma.empty()) throw InputError("working covariance needs sigma");
    for (double s : wc.sigma)
        if (!(s > 0.0) || !std::isfinite(s)) throw InputError("working covariance sigma must be positive");
    const bool per_occasion = wc.kind == CovarianceKind::exch_heterogeneous;
    if (per_occasion && static_cast<Eigen::Index>(wc.sigma.size()) != m && wc.sigma.size() != 1)
        throw InputError("heterogeneous working covariance needs one sigma per occasion");
    Eigen::VectorXd s(m);
    for (Eigen::Index t = 0; t < m; ++t)
        s[t] = per_occasion && wc.sigma.size() > 1 ? wc.sigma[static_cast<std::size_t>(t)] : wc.sigma[0];
    if (wc.kind == CovarianceKind::independence) {
        return Eigen::MatrixXd(s.array().square().matrix().asDiagonal());
    }
    if (m >= 2 && !(wc.rho > exchangeable_rho_lower(m) && wc.rho < 1.0))
        throw InputError("exchangeable correlation outside its positive-definite range");
    Eigen::MatrixXd exch = Eigen::MatrixXd::Constant(m, m, wc.rho);
    exch.diagonal().setOnes();
    return s.asDiagonal() * exch * s.asDiagonal();
}

struct MomentEstimate {
    std::vector<double> sigma;  // one entry (homogeneous) or one per occasion
    double rho = 0.0;
    double raw_rho = 0.0;
    bool rho_projected = false;
    bool exact_fit = false;  // all residuals zero
};

inline constexpr double kRhoMargin = 1e-6;

/// Weighted moment estimates of the working covariance parameters from
/// per-row residual vectors (one row of `residuals` per replicated row).
inline MomentEstimate moment_update(const Eigen::MatrixXd& residuals, const Eigen::VectorXd& weights,
                                    bool heterogeneous) {
    const Eigen::Index m = residuals.cols();
    if (residuals.rows() != weights.size()) throw InputError("one weight per residual row required");
    const double wsum = weights.sum();
    if (!(wsum > 0.0)) throw NumericalError("zero total weight in moment update");

    MomentEstimate est;
    const Eigen::RowVectorXd var_t =
        (weights.transpose() * residuals.array().square().matrix()) / wsum;
    Eigen::VectorXd s(m);
    if (heterogeneous) {
        for (Eigen::Index t = 0; t < m; ++t) s[t] = std::sqrt(var_t[t]);
    } else {
        s.setConstant(std::sqrt(var_t.mean()));
    }
    if (s.isZero(0.0)) {
        // exact fit: nothing to estimate, any working covariance gives the same solution
        est.exact_fit = true;
        est.sigma.assign(heterogeneous ? static_cast<std::size_t>(m) : 1u, 0.0);
        return est;
    }
    for (Eigen::Index t = 0; t < m; ++t)
        if (!(s[t] > 0.0)) throw NumericalError("zero residual variance at occasion " + std::to_string(t));
    est.sigma = heterogeneous ? std::vector<double>(s.data(), s.data() + m) : std::vector<double>{s[0]};

    if (m < 2) return est;
    double acc = 0.0;
    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = a + 1; b < m; ++b)
            acc += weights.dot(residuals.col(a).cwiseProduct(residuals.col(b))) / (s[a] * s[b]);
    const double pairs = static_cast<double>(m * (m - 1) / 2);
    est.raw_rho = acc / (wsum * pairs);
    const double lo = exchangeable_rho_lower(m) + kRhoMargin;
    const double hi = 1.0 - kRhoMargin;
    est.rho = std::clamp(est.raw_rho, lo, hi);
    est.rho_projected = est.rho != est.raw_rho;
    return est;
}

/// Weighted cell means of the four embedded AIs at the final occasion with
/// the covariance of the estimated means.
struct CellMeans {
    std::array<double, 4> mu_hat{};
    Eigen::Matrix4d cov = Eigen::Matrix4d::Zero();
    std::array<std::array<bool, 4>, 4> shares_units{};  // false: covariance is structurally 0
};

inline CellMeans ipw_cell_means(const SmartDataset& ds, const WeightFit& wf) {
    if (wf.weights.size() != ds.n()) throw InputError("weight fit does not match dataset");
    CellMeans cm;
    std::array<double, 4> wsum{}, wy{};
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        for (const auto& ai : consistent_ais(rec)) {
            wsum[ai.index()] += wf.weights[i];
            wy[ai.index()] += wf.weights[i] * rec.y.back();
        }
    }
    for (int d = 0; d < 4; ++d) {
        if (!(wsum[d] > 0.0))
            throw InputError("no units consistent with AI " + kEmbeddedAis[d].str());
        cm.mu_hat[d] = wy[d] / wsum[d];
    }
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        const double w2 = wf.weights[i] * wf.weights[i];
        const auto ais = consistent_ais(rec);
        for (const auto& k : ais)
            for (const auto& l : ais) {
                cm.cov(k.index(), l.index()) +=
                    w2 * (rec.y.back() - cm.mu_hat[k.index()]) * (rec.y.back() - cm.mu_hat[l.index()]);
                cm.shares_units[k.index()][l.index()] = true;
            }
    }
    for (int k = 0; k < 4; ++k)
        for (int l = 0; l < 4; ++l) cm.cov(k, l) /= wsum[k] * wsum[l];
    return cm;
}

struct SolverOptions {
    double tol = 1e-8;
    int max_iter = 50;
    /// Working variance sigma(d) per AI; single-occasion models only.
    bool vary_by_ai = false;
    /// Multiply variances by n / (n - p).
    bool small_sample_correction = false;
};

struct GeeFit {
    MeanModelSpec spec;  // effective spec actually fitted
    CovarianceKind cov_kind = CovarianceKind::independence;
    std::vector<int> times;
    std::vector<double> covariate_means;
    Eigen::VectorXd theta;
    std::vector<double> sigma;
    double rho = 0.0;
    std::optional<std::array<double, 4>> sigma_by_ai;
    Eigen::MatrixXd vcov_known;
    std::optional<Eigen::MatrixXd> vcov_weight_adjusted;
    int iterations = 0;
    bool converged = false;
    bool rho_projected = false;
    bool small_sample_correction = false;
    std::size_t n = 0;

    Eigen::VectorXd gamma() const {
        return theta.head(static_cast<Eigen::Index>(spec.treatment_params()));
    }
    Eigen::VectorXd beta() const {
        return theta.tail(static_cast<Eigen::Index>(spec.covariate_params()));
    }
    int final_time() const { return times.empty() ? 1 : times.back(); }

    WorkingCovariance working_covariance(int ai_index = 0) const {
        WorkingCovariance wc{cov_kind, sigma, rho};
        if (sigma_by_ai) wc.sigma = {(*sigma_by_ai)[static_cast<std::size_t>(ai_index)]};
        return wc;
    }
};

namespace detail {

struct UnitFrame {
    double weight = 0.0;
    Eigen::VectorXd y;
    std::vector<int> ai;
    std::vector<Eigen::MatrixXd> D;
};

struct ModelFrame {
    MeanModelSpec spec;
    std::vector<int> times;
    std::vector<double> covariate_means;
    std::vector<UnitFrame> units;
    Eigen::Index p = 0;
    Eigen::Index m = 0;
    std::size_t rows = 0;
};

inline std::vector<double> model_covariates(const SmartDataset& ds, const TrialRecord& rec,
                                            const std::vector<std::string>& names) {
    std::vector<double> x;
    x.reserve(names.size());
    for (const auto& name : names) {
        if (auto k = ds.covariate_index(name)) {
            x.push_back(rec.x[*k]);
        } else if (name == "y_0" && ds.has_baseline) {
            x.push_back(*rec.y0);
        } else {
            throw InputError("unknown baseline covariate '" + name + "'");
        }
    }
    return x;
}

/// Reduces a longitudinal spec on single-occasion data to the equivalent
/// cross-sectional model and checks identifiability of the trajectory.
inline MeanModelSpec effective_spec(const SmartDataset& ds, const MeanModelSpec& spec) {
    if (!spec.is_longitudinal()) return spec;
    if (ds.T == 1 && !ds.has_baseline) {
        return spec.covariates.empty() ? MeanModelSpec::cross_sectional()
                                       : MeanModelSpec::covariate_adjusted(spec.covariates);
    }
    if (spec.t_star < 1 || spec.t_star >= ds.T)
        throw InputError("longitudinal model needs 1 <= t_star < T");
    if (spec.t_star == 1 && !ds.has_baseline)
        throw InputError("longitudinal model with t_star = 1 needs the baseline outcome column y_0");
    if (ds.has_baseline && std::find(spec.covariates.begin(), spec.covariates.end(), "y_0") != spec.covariates.end())
        throw InputError("y_0 is modeled as an outcome in the longitudinal model and cannot also be a covariate");
    return spec;
}

inline ModelFrame build_frame(const SmartDataset& ds, const WeightFit& wf, const MeanModelSpec& spec) {
    if (wf.weights.size() != ds.n()) throw InputError("weight fit does not match dataset");
    ModelFrame f;
    f.spec = effective_spec(ds, spec);
    if (f.spec.is_longitudinal()) {
        if (ds.has_baseline) f.times.push_back(0);
        for (int t = 1; t <= ds.T; ++t) f.times.push_back(t);
    } else {
        f.times = {ds.T};
    }
    f.m = static_cast<Eigen::Index>(f.times.size());
    f.p = static_cast<Eigen::Index>(f.spec.param_count());

    const std::size_t k = f.spec.covariate_params();
    std::vector<std::vector<double>> xs(ds.n());
    f.covariate_means.assign(k, 0.0);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        if (k > 0) xs[i] = model_covariates(ds, ds.records[i], f.spec.covariates);
        for (std::size_t j = 0; j < k; ++j) f.covariate_means[j] += xs[i][j];
    }
    if (ds.n() > 0)
        for (auto& v : f.covariate_means) v /= static_cast<double>(ds.n());

    f.units.reserve(ds.n());
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        UnitFrame u;
        u.weight = wf.weights[i];
        u.y.resize(f.m);
        if (f.spec.is_longitudinal()) {
            Eigen::Index c = 0;
            if (ds.has_baseline) u.y[c++] = *rec.y0;
            for (double v : rec.y) u.y[c++] = v;
        } else {
            u.y[0] = rec.y.back();
        }
        for (std::size_t j = 0; j < k; ++j) xs[i][j] -= f.covariate_means[j];
        for (const auto& ai : consistent_ais(rec)) {
            u.ai.push_back(ai.index());
            u.D.push_back(design_rows(ai, f.spec, xs[i], f.times));
            ++f.rows;
        }
        f.units.push_back(std::move(u));
    }
    return f;
}

using InverseCovs = std::array<Eigen::MatrixXd, 4>;

inline InverseCovs inverse_covs(const ModelFrame& f, const GeeFit& fit) {
    InverseCovs out;
    for (int d = 0; d < 4; ++d) {
        const Eigen::MatrixXd V = working_cov_matrix(fit.working_covariance(d), f.m);
        out[static_cast<std::size_t>(d)] = V.llt().solve(Eigen::MatrixXd::Identity(f.m, f.m));
    }
    return out;
}

/// Unnormalized bread sum_i sum_d W D' V^-1 D.
inline Eigen::MatrixXd bread(const ModelFrame& f, const InverseCovs& vinv) {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(f.p, f.p);
    for (const auto& u : f.units)
        for (std::size_t r = 0; r < u.ai.size(); ++r)
            B.noalias() += u.weight * u.D[r].transpose() * vinv[static_cast<std::size_t>(u.ai[r])] * u.D[r];
    return B;
}

inline Eigen::LDLT<Eigen::MatrixXd> factor_bread(const Eigen::MatrixXd& B) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(B);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-13)
        throw NumericalError("singular weighted information matrix");
    return ldlt;
}

inline Eigen::VectorXd gls_solve(const ModelFrame& f, const InverseCovs& vinv) {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(f.p);
    for (const auto& u : f.units)
        for (std::size_t r = 0; r < u.ai.size(); ++r)
            rhs.noalias() += u.weight * u.D[r].transpose() * (vinv[static_cast<std::size_t>(u.ai[r])] * u.y);
    return factor_bread(bread(f, vinv)).solve(rhs);
}

/// Per-unit estimating-function contributions M_i (n x p): replicated rows
/// of a unit are summed before any outer product is taken.
inline Eigen::MatrixXd unit_contributions(const ModelFrame& f, const InverseCovs& vinv,
                                          const Eigen::VectorXd& theta) {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(f.units.size()), f.p);
    for (std::size_t i = 0; i < f.units.size(); ++i) {
        const auto& u = f.units[i];
        for (std::size_t r = 0; r < u.ai.size(); ++r) {
            const Eigen::VectorXd e = u.y - u.D[r] * theta;
            M.row(static_cast<Eigen::Index>(i)).noalias() +=
                (u.weight * u.D[r].transpose() * (vinv[static_cast<std::size_t>(u.ai[r])] * e)).transpose();
        }
    }
    return M;
}

struct RowResiduals {
    Eigen::MatrixXd e;  // rows x m
    Eigen::VectorXd w;
    std::vector<int> ai;
};

inline RowResiduals row_residuals(const ModelFrame& f, const Eigen::VectorXd& theta) {
    RowResiduals out;
    out.e.resize(static_cast<Eigen::Index>(f.rows), f.m);
    out.w.resize(static_cast<Eigen::Index>(f.rows));
    Eigen::Index row = 0;
    for (const auto& u : f.units)
        for (std::size_t r = 0; r < u.ai.size(); ++r, ++row) {
            out.e.row(row) = (u.y - u.D[r] * theta).transpose();
            out.w[row] = u.weight;
            out.ai.push_back(u.ai[r]);
        }
    return out;
}

inline void update_working(GeeFit& fit, const ModelFrame& f, const Eigen::VectorXd& theta, bool vary_by_ai) {
    const RowResiduals res = row_residuals(f, theta);
    const bool hetero = fit.cov_kind == CovarianceKind::exch_heterogeneous;
    double yscale = 0.0;
    for (const auto& u : f.units) yscale = std::max(yscale, u.y.cwiseAbs().maxCoeff());
    // residuals at round-off level of the outcomes: the model fits exactly
    const bool exact = res.e.size() == 0 || res.e.cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + yscale);
    const MomentEstimate est = exact ? MomentEstimate{{}, 0.0, 0.0, false, true} : moment_update(res.e, res.w, hetero);
    if (est.exact_fit) {
        fit.sigma = {1.0};
        fit.rho = 0.0;
        fit.sigma_by_ai.reset();
        return;
    }
    fit.sigma = est.sigma;
    fit.rho = fit.cov_kind == CovarianceKind::independence ? 0.0 : est.rho;
    if (fit.cov_kind != CovarianceKind::independence) fit.rho_projected = est.rho_projected;
    if (vary_by_ai) {
        std::array<double, 4> by_ai{};
        for (int d = 0; d < 4; ++d) {
            std::vector<Eigen::Index> idx;
            for (std::size_t r = 0; r < res.ai.size(); ++r)
                if (res.ai[r] == d) idx.push_back(static_cast<Eigen::Index>(r));
            Eigen::MatrixXd e(static_cast<Eigen::Index>(idx.size()), f.m);
            Eigen::VectorXd w(static_cast<Eigen::Index>(idx.size()));
            for (std::size_t j = 0; j < idx.size(); ++j) {
                e.row(static_cast<Eigen::Index>(j)) = res.e.row(idx[j]);
                w[static_cast<Eigen::Index>(j)] = res.w[idx[j]];
            }
            const MomentEstimate ed = moment_update(e, w, false);
            by_ai[static_cast<std::size_t>(d)] = ed.exact_fit ? 1.0 : ed.sigma[0];
        }
        fit.sigma_by_ai = by_ai;
    }
}

inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& A) { return 0.5 * (A + A.transpose()); }

struct VarianceParts {
    Eigen::MatrixXd vcov_known;
    std::optional<Eigen::MatrixXd> vcov_adjusted;
};

inline VarianceParts variances(const ModelFrame& f, const GeeFit& fit, const WeightFit& wf) {
    const InverseCovs vinv = inverse_covs(f, fit);
    const Eigen::MatrixXd Bu = bread(f, vinv);
    const Eigen::MatrixXd Binv = factor_bread(Bu).solve(Eigen::MatrixXd::Identity(f.p, f.p));
    const Eigen::MatrixXd M = unit_contributions(f, vinv, fit.theta);
    const double n = static_cast<double>(f.units.size());
    const double scale = fit.small_sample_correction && n > static_cast<double>(f.p)
                             ? n / (n - static_cast<double>(f.p))
                             : 1.0;

    // (1/n) B^-1 ((1/n) sum M M') B^-1 with B = Bu / n
    VarianceParts out;
    const Eigen::MatrixXd meat = M.transpose() * M;
    out.vcov_known = scale * symmetrize(Binv * meat * Binv);

    if (wf.estimated()) {
        const Eigen::MatrixXd& S = wf.scores;
        if (S.isZero(0.0)) {
            out.vcov_adjusted = out.vcov_known;
            return out;
        }
        Eigen::LLT<Eigen::MatrixXd> llt(S.transpose() * S);
        if (llt.info() != Eigen::Success) throw NumericalError("singular score Gram matrix");
        const Eigen::MatrixXd SM = S.transpose() * M;
        const Eigen::MatrixXd Q = llt.matrixL().solve(SM);
        // projection of the meat onto the score space, removed exactly
        const Eigen::MatrixXd proj = Q.transpose() * Q;
        out.vcov_adjusted = scale * symmetrize(Binv * (meat - proj) * Binv);
    }
    return out;
}

}  // namespace detail

/// Solves the weighted estimating equation for `spec` under the chosen
/// working covariance. Starts from independence, then alternates a
/// generalized least squares step with a moment update of (sigma, rho)
/// until the largest coefficient change is below `opts.tol`.
inline GeeFit solve_estimating_equation(const SmartDataset& ds, const WeightFit& wf,
                                        const MeanModelSpec& spec, CovarianceKind wc_kind,
                                        const SolverOptions& opts = {}) {
    const detail::ModelFrame f = detail::build_frame(ds, wf, spec);
    if (opts.vary_by_ai && f.m != 1)
        throw InputError("AI-specific working variances are supported for single-occasion models only");

    GeeFit fit;
    fit.spec = f.spec;
    fit.cov_kind = wc_kind;
    fit.times = f.times;
    fit.covariate_means = f.covariate_means;
    fit.n = ds.n();
    fit.small_sample_correction = opts.small_sample_correction;
    fit.sigma = {1.0};

    // single occasion: scalar working covariance
    const bool iterate = (wc_kind != CovarianceKind::independence && f.m > 1) || opts.vary_by_ai;
    if (!iterate) fit.cov_kind = CovarianceKind::independence;

    fit.theta = detail::gls_solve(f, detail::inverse_covs(f, fit));
    fit.iterations = 1;
    if (!iterate) {
        detail::update_working(fit, f, fit.theta, false);
        fit.converged = true;
    } else {
        for (int iter = 2; iter <= opts.max_iter; ++iter) {
            detail::update_working(fit, f, fit.theta, opts.vary_by_ai);
            Eigen::VectorXd next = detail::gls_solve(f, detail::inverse_covs(f, fit));
            const double change = (next - fit.theta).cwiseAbs().maxCoeff();
            fit.theta = std::move(next);
            fit.iterations = iter;
            if (change < opts.tol) {
                fit.converged = true;
                break;
            }
        }
        if (!fit.converged)
            throw NumericalError("estimating equation did not converge in " +
                                 std::to_string(opts.max_iter) + " iterations");
    }

    auto parts = detail::variances(f, fit, wf);
    fit.vcov_known = std::move(parts.vcov_known);
    fit.vcov_weight_adjusted = std::move(parts.vcov_adjusted);
    return fit;
}

/// (1/n) sum_i M_i at the fitted coefficients and working covariance.
inline Eigen::VectorXd estimating_equation_value(const GeeFit& fit, const SmartDataset& ds,
                                                 const WeightFit& wf) {
    const detail::ModelFrame f = detail::build_frame(ds, wf, fit.spec);
    const Eigen::MatrixXd M = detail::unit_contributions(f, detail::inverse_covs(f, fit), fit.theta);
    return M.colwise().sum().transpose() / static_cast<double>(ds.n());
}

inline Eigen::MatrixXd sandwich_vcov(const GeeFit& fit, const SmartDataset& ds, const WeightFit& wf) {
    const detail::ModelFrame f = detail::build_frame(ds, wf, fit.spec);
    WeightFit known_only = wf;
    known_only.scores.resize(static_cast<Eigen::Index>(ds.n()), 0);
    return detail::variances(f, fit, known_only).vcov_known;
}

inline Eigen::MatrixXd weight_adjusted_vcov(const GeeFit& fit, const SmartDataset& ds, const WeightFit& wf) {
    if (!wf.estimated()) throw InputError("weight-adjusted variance needs estimated weights with scores");
    const detail::ModelFrame f = detail::build_frame(ds, wf, fit.spec);
    return *detail::variances(f, fit, wf).vcov_adjusted;
}

}  // namespace smarteff
