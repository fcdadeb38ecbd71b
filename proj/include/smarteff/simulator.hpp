#pragma once

// Monte Carlo engine: potential-outcome generation for the prototypical
// two-stage design (T = 2) and a four-covariate three-occasion preset
// (asic_like, T = 3), per-replication technique fits, and study summaries.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "smarteff/contrasts.hpp"
#include "smarteff/errors.hpp"
#include "smarteff/techniques.hpp"
#include "smarteff/trial_data.hpp"
#include "smarteff/weights.hpp"

namespace smarteff {

enum class Design { proto, asic_like };

inline const char* design_name(Design d) { return d == Design::proto ? "proto" : "asic_like"; }

inline Design parse_design(std::string_view s) {
    if (s == "proto") return Design::proto;
    if (s == "asic_like") return Design::asic_like;
    throw InputError("unknown design '" + std::string(s) + "'; expected proto or asic_like");
}

struct SimConfig {
    Design design = Design::proto;
    int n = 250;
    int reps = 1000;
    std::uint64_t seed = 1;
    double rho = 0.5;
    double nu = 0.3;      // Corr(X, Y0); asic_like: Corr(beta'X, Y0)
    double delta = 0.3;   // (1,1) vs (-1,-1) final-occasion difference in sigma units
    double sigma = 1.0;
    double lambda1 = 0.2;
    double lambda2 = 0.1;
    double response_rate = 0.4;
    double eta1 = 1.0;
    double covariate_correlation = 0.2;  // asic_like
    std::vector<Technique> techniques{kAllTechniques.begin(), kAllTechniques.end()};
    ContrastSpec target = ContrastSpec::difference({1, 1}, {-1, -1});
    bool keep_replications = false;

    int T() const { return design == Design::proto ? 2 : 3; }
    int covariate_count() const { return design == Design::proto ? 1 : 4; }

    void validate() const {
        if (n < 20) throw InputError("n must be at least 20");
        if (reps < 1) throw InputError("reps must be at least 1");
        if (!(rho >= 0.0 && rho < 1.0)) throw InputError("rho must lie in [0, 1)");
        if (!(nu >= 0.0 && nu < 1.0)) throw InputError("nu must lie in [0, 1)");
        if (!(sigma > 0.0)) throw InputError("sigma must be positive");
        if (!(response_rate > 0.0 && response_rate < 1.0)) throw InputError("response_rate must lie in (0, 1)");
        if (!(covariate_correlation > -1.0 / 3.0 && covariate_correlation < 1.0))
            throw InputError("covariate_correlation outside the positive-definite range");
        if (!std::isfinite(delta)) throw InputError("delta must be finite");
        if (techniques.empty()) throw InputError("at least one technique is required");
        if (target.kind == ContrastKind::custom || target.kind == ContrastKind::nonresponder_second_stage)
            throw InputError("simulation target must be an AI difference or a stage main effect");
    }
};

/// Arm index convention: 0 for code +1, 1 for code -1.
inline constexpr int arm(int code) { return code == 1 ? 0 : 1; }

struct GenerativeParams {
    std::array<double, 7> gamma{};
    double lambda1 = 0.0, lambda2 = 0.0;
    double beta0 = 0.0;              // coefficient per covariate
    std::vector<double> beta;        // length k
    Eigen::MatrixXd covariate_chol;  // lower Cholesky factor of Cov(X)
    double sigma = 1.0, rho = 0.0;
    double eta0 = 0.0, eta1 = 1.0;
    double response_rate = 0.4;
    double deviation_sd = 1.0;       // sd of (Y1 - E[Y1 | a1]) / sigma
    std::array<double, 2> v_bar{};   // mean non-linear residual budget per a1 arm
    std::array<double, 2> v_resp{};  // v(R = 1)
    std::array<std::array<double, 2>, 2> v_nonresp{};  // v(R = 0) per (a1, a2)
    double w3 = 0.0, var3 = 0.0;     // third-occasion carry-over and innovation variance
    int T = 2;
    double theta = 0.0;              // true value of the target contrast

    double stage2_effect(int a1, int a2) const { return (gamma[5] + gamma[6] * a1) * a2; }
    double lambda(int a1) const { return lambda1 + lambda2 * a1; }

    /// True mean of the AI (a1, a2) outcome at occasion t.
    double true_mean(int a1, int a2, int t) const {
        const double m1 = gamma[0] + gamma[1] + gamma[2] * a1;
        const double m2 = gamma[0] + (gamma[1] + gamma[2] * a1) / (1.0 + rho) + gamma[3] + gamma[4] * a1 +
                          stage2_effect(a1, a2);
        switch (t) {
            case 0: return gamma[0];
            case 1: return m1;
            case 2: return m2;
            default: return 2.0 * m2 - m1;
        }
    }
};

namespace detail {

/// E[f(U)] for U ~ N(0, sd^2) by the trapezoid rule on +-10 sd.
template <class F>
double normal_expectation(F&& f, double sd, int points = 4001) {
    const double lo = -10.0 * sd, h = 20.0 * sd / (points - 1);
    double acc = 0.0;
    for (int k = 0; k < points; ++k) {
        const double u = lo + k * h;
        const double z = u / sd;
        const double wgt = (k == 0 || k == points - 1) ? 0.5 : 1.0;
        acc += wgt * f(u) * std::exp(-0.5 * z * z);
    }
    return acc * h / (sd * std::sqrt(2.0 * M_PI));
}

inline double contrast_of_means(const ContrastSpec& c, const GenerativeParams& p, int t) {
    auto m = [&](int a1, int a2) { return p.true_mean(a1, a2, t); };
    switch (c.kind) {
        case ContrastKind::ai_difference: return m(c.lhs.a1, c.lhs.a2nr) - m(c.rhs.a1, c.rhs.a2nr);
        case ContrastKind::first_stage_main: return 0.5 * (m(1, 1) - m(-1, 1) + m(1, -1) - m(-1, -1));
        case ContrastKind::second_stage_main: return 0.5 * (m(1, 1) - m(1, -1) + m(-1, 1) - m(-1, -1));
        default: throw InputError("simulation target must be an AI difference or a stage main effect");
    }
}

}  // namespace detail

inline GenerativeParams derive_params(const SimConfig& cfg) {
    cfg.validate();
    GenerativeParams p;
    p.sigma = cfg.sigma;
    p.rho = cfg.rho;
    p.T = cfg.T();
    p.eta1 = cfg.eta1;
    p.response_rate = cfg.response_rate;
    p.lambda1 = cfg.lambda1;
    p.lambda2 = cfg.delta == 0.0 ? 0.0 : cfg.lambda2;

    // covariates and the linear predictor beta'X with Corr(beta'X, Y0) = nu
    const int k = cfg.covariate_count();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(k, k, k > 1 ? cfg.covariate_correlation : 0.0);
    cov.diagonal().setOnes();
    p.covariate_chol = cov.llt().matrixL();
    const double target_sd = cfg.nu * cfg.sigma / std::sqrt(1.0 - cfg.nu * cfg.nu);
    p.beta0 = target_sd / std::sqrt(cov.sum());
    p.beta.assign(static_cast<std::size_t>(k), p.beta0);

    // treatment coefficients scaled to the requested final-occasion effect
    p.gamma = {0.0, 0.1, 0.5, 0.1, 0.25, 0.25, 0.15};
    GenerativeParams unit = p;
    const ContrastSpec main = ContrastSpec::difference({1, 1}, {-1, -1});
    const double base = detail::contrast_of_means(main, unit, p.T);
    const double scale = cfg.delta * cfg.sigma / base;
    for (int j : {2, 4, 5, 6}) p.gamma[static_cast<std::size_t>(j)] *= scale;

    // response model: mean response rate matched by bisection on eta0
    p.deviation_sd = std::sqrt(1.0 + target_sd * target_sd / (cfg.sigma * cfg.sigma));
    auto mean_r = [&](double eta0) {
        return detail::normal_expectation([&](double u) { return expit(eta0 + p.eta1 * u); }, p.deviation_sd);
    };
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mean_r(mid) < cfg.response_rate ? lo : hi) = mid;
    }
    p.eta0 = 0.5 * (lo + hi);

    // second-occasion residual budget: sigma^2 minus the carried-over part
    // minus the response-deviation part, split 70/30 between R and L terms
    const double s2 = cfg.sigma * cfg.sigma;
    const double carried = 2.0 * cfg.rho * cfg.rho * s2 / (1.0 + cfg.rho);
    std::array<std::array<double, 2>, 2> V{};
    for (int a1 : {1, -1}) {
        for (int a2 : {1, -1}) {
            const double lam = p.lambda(a1), c = p.stage2_effect(a1, a2);
            const double var_r = detail::normal_expectation(
                [&](double u) {
                    const double r = expit(p.eta0 + p.eta1 * u);
                    const double d = lam - c / (1.0 - r);
                    return r * (1.0 - r) * d * d;
                },
                p.deviation_sd);
            V[arm(a1)][arm(a2)] = s2 - carried - var_r;
        }
        const int j = arm(a1);
        p.v_bar[j] = 0.5 * (V[j][0] + V[j][1]);
        p.v_resp[j] = 0.35 * p.v_bar[j];
        for (int b = 0; b < 2; ++b) {
            p.v_nonresp[j][b] =
                (V[j][b] - 0.3 * p.v_bar[j] - cfg.response_rate * p.v_resp[j]) / (1.0 - cfg.response_rate);
            if (!(V[j][b] > 0.0) || !(p.v_nonresp[j][b] > 0.0))
                throw InputError("residual variance budget is infeasible for these rho/lambda/delta values");
        }
    }

    p.w3 = cfg.rho / (1.0 + 2.0 * cfg.rho);
    p.var3 = s2 * (1.0 - 3.0 * cfg.rho * cfg.rho / (1.0 + 2.0 * cfg.rho));
    p.theta = detail::contrast_of_means(cfg.target, p, p.T);
    return p;
}

template <class N>
concept NoiseSource = requires(N& n) {
    { n.normal() } -> std::convertible_to<double>;
    { n.uniform() } -> std::convertible_to<double>;
};

/// Per-replication random stream: mt19937_64 keyed by (seed, rep).
class SimRng {
public:
    SimRng(std::uint64_t seed, std::uint64_t stream) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
        eng_.seed(seq);
    }
    double normal() { return normal_(eng_); }
    double uniform() { return uniform_(eng_); }

private:
    std::mt19937_64 eng_;
    std::normal_distribution<double> normal_;
    std::uniform_real_distribution<double> uniform_;
};

/// Noise that is identically zero; uniforms sit at one half.
struct ZeroNoise {
    double normal() { return 0.0; }
    double uniform() { return 0.5; }
};

struct PotentialOutcomes {
    std::vector<double> x;
    double y0 = 0.0;
    std::array<double, 2> y1{};            // by a1 arm
    std::array<double, 2> r_prob{};        // conditional response probability
    std::array<int, 2> R{};
    std::array<int, 2> L{};
    std::array<std::array<double, 2>, 2> y2{};  // by (a1, a2) arm
    std::optional<double> y3;              // assigned pathway only
};

struct SimUnit {
    PotentialOutcomes po;
    TrialRecord observed;
};

template <NoiseSource N>
SimUnit generate_unit(N& noise, const GenerativeParams& p, std::string id = "") {
    SimUnit u;
    auto& po = u.po;
    const auto k = p.covariate_chol.rows();
    Eigen::VectorXd z(k);
    for (Eigen::Index j = 0; j < k; ++j) z[j] = noise.normal();
    const Eigen::VectorXd x = p.covariate_chol * z;
    po.x.assign(x.data(), x.data() + k);
    double bx = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) bx += p.beta[static_cast<std::size_t>(j)] * x[j];

    const auto& g = p.gamma;
    const double s = p.sigma, rho = p.rho;
    const double kk = rho / (1.0 + rho);
    const double Z = g[0] + bx;
    po.y0 = Z + s * noise.normal();

    std::array<double, 2> eps2_z{};
    for (int a1 : {1, -1}) {
        const int j = arm(a1);
        const double m1 = g[0] + g[1] + g[2] * a1;
        po.y1[j] = (1.0 - rho) * Z + rho * po.y0 + g[1] + g[2] * a1 + std::sqrt(1.0 - rho * rho) * s * noise.normal();
        po.r_prob[j] = expit(p.eta0 + p.eta1 * (po.y1[j] - m1) / s);
        po.R[j] = noise.uniform() < po.r_prob[j] ? 1 : 0;
        const double l_prob = expit(0.5 * (po.y0 - g[0]) / s + 0.3 * x[0]);
        po.L[j] = noise.uniform() < l_prob ? 1 : 0;
        eps2_z[j] = noise.normal();
        for (int a2 : {1, -1}) {
            const double r = po.r_prob[j];
            const int R = po.R[j];
            const double v_r = R ? p.v_resp[j] : p.v_nonresp[j][arm(a2)];
            const double v_l = 0.3 * p.v_bar[j] * (po.L[j] ? 1.5 : 0.5);
            po.y2[j][arm(a2)] = (1.0 - 2.0 * kk) * Z + kk * (po.y0 + po.y1[j]) +
                                (1.0 - 2.0 * kk) * (g[1] + g[2] * a1) + g[3] + g[4] * a1 +
                                (1.0 - R) / (1.0 - r) * p.stage2_effect(a1, a2) + (R - r) * p.lambda(a1) +
                                std::sqrt(v_r + v_l) * eps2_z[j];
        }
    }

    const int A1 = noise.uniform() < 0.5 ? 1 : -1;
    const int A2 = noise.uniform() < 0.5 ? 1 : -1;
    const int j = arm(A1);
    const int R = po.R[j];
    const int a2_path = R ? 1 : A2;  // responders' outcomes do not depend on a2

    if (p.T >= 3) {
        // pathway-specific means with the non-responder effect at the unit level
        const double q = (1.0 - R) / (1.0 - po.r_prob[j]) * p.stage2_effect(A1, a2_path);
        const double m0 = g[0];
        const double m1 = g[0] + g[1] + g[2] * A1;
        const double m2 = p.true_mean(A1, a2_path, 2) - p.stage2_effect(A1, a2_path) + q;
        const double m3 = 2.0 * m2 - m1;
        const double carry = (po.y0 - m0 - bx) + (po.y1[j] - m1 - bx) + (po.y2[j][arm(a2_path)] - m2 - bx);
        po.y3 = m3 + bx + p.w3 * carry + std::sqrt(p.var3) * noise.normal();
    }

    auto& rec = u.observed;
    rec.id = std::move(id);
    rec.a1 = A1;
    rec.r = R;
    if (!R) rec.a2 = A2;
    rec.x = po.x;
    rec.aux = {static_cast<double>(po.L[j])};
    rec.y0 = po.y0;
    rec.y = {po.y1[j], po.y2[j][arm(a2_path)]};
    if (po.y3) rec.y.push_back(*po.y3);
    return u;
}

inline std::vector<std::string> sim_covariate_names(const SimConfig& cfg) {
    std::vector<std::string> names;
    for (int j = 1; j <= cfg.covariate_count(); ++j) names.push_back("x" + std::to_string(j));
    return names;
}

template <NoiseSource N>
SmartDataset generate_dataset(N& noise, const GenerativeParams& p, const SimConfig& cfg,
                              std::vector<PotentialOutcomes>* potential = nullptr) {
    SmartDataset ds;
    ds.T = p.T;
    ds.t_star = 1;
    ds.has_baseline = true;
    ds.covariate_names = sim_covariate_names(cfg);
    ds.aux_names = {"L"};
    ds.records.reserve(static_cast<std::size_t>(cfg.n));
    for (int i = 0; i < cfg.n; ++i) {
        SimUnit u = generate_unit(noise, p, "s" + std::to_string(i + 1));
        if (potential) potential->push_back(std::move(u.po));
        ds.records.push_back(std::move(u.observed));
    }
    return ds;
}

inline SmartDataset simulate_dataset(const SimConfig& cfg, const GenerativeParams& p, std::uint64_t rep) {
    SimRng rng(cfg.seed, rep);
    return generate_dataset(rng, p, cfg);
}

/// Techniques fitted in each replication: the baseline t0 first, then the
/// requested ones without duplicates.
inline std::vector<Technique> study_techniques(const SimConfig& cfg) {
    std::vector<Technique> out{Technique::t0};
    for (auto t : cfg.techniques)
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    return out;
}

inline TechniqueOptions sim_technique_options(const SimConfig& cfg) {
    TechniqueOptions o;
    o.covariates = sim_covariate_names(cfg);
    o.k1 = o.covariates;
    o.k2 = o.covariates;
    o.k2.push_back("L");
    o.t_star = 1;
    return o;
}

struct RepEstimate {
    Technique technique = Technique::t0;
    double estimate = 0.0;
    double se = 0.0;
};

struct ReplicationResult {
    std::uint64_t rep = 0;
    bool ok = false;
    std::string error;
    std::vector<RepEstimate> estimates;  // study_techniques order
};

inline ReplicationResult run_replication(const SimConfig& cfg, const GenerativeParams& p, std::uint64_t rep) {
    ReplicationResult out;
    out.rep = rep;
    const SmartDataset ds = simulate_dataset(cfg, p, rep);
    const TechniqueOptions opts = sim_technique_options(cfg);
    try {
        for (auto t : study_techniques(cfg)) {
            const TechniqueFit tf = run_technique(t, ds, opts);
            const ContrastResult c = tf.contrast(cfg.target);
            out.estimates.push_back({t, c.estimate, c.se});
        }
        out.ok = true;
    } catch (const std::runtime_error& e) {
        out.estimates.clear();
        out.error = e.what();
    }
    return out;
}

struct TechniqueSummary {
    Technique technique = Technique::t0;
    double rmse = 0.0;
    double relative_efficiency = 1.0;
    std::optional<double> pct_closer;  // omitted for the baseline
    double bias = 0.0;
    double coverage = 0.0;             // percent
    double mean_se = 0.0;
    double sd_estimate = 0.0;          // divisor = number of reps used
};

struct SimResult {
    SimConfig config;
    GenerativeParams params;
    double theta = 0.0;
    int reps_used = 0;
    int reps_failed = 0;
    std::vector<std::string> failure_messages;  // first few
    std::vector<TechniqueSummary> summaries;     // study_techniques order
    std::vector<ReplicationResult> replications; // kept on request

    const TechniqueSummary* find(Technique t) const {
        for (const auto& s : summaries)
            if (s.technique == t) return &s;
        return nullptr;
    }
};

inline SimResult summarize(const SimConfig& cfg, const GenerativeParams& p,
                           std::vector<ReplicationResult> reps) {
    SimResult res;
    res.config = cfg;
    res.params = p;
    res.theta = p.theta;
    const auto techs = study_techniques(cfg);
    const std::size_t K = techs.size();
    std::vector<const ReplicationResult*> used;
    for (const auto& r : reps) {
        if (r.ok) {
            used.push_back(&r);
        } else {
            ++res.reps_failed;
            if (res.failure_messages.size() < 5)
                res.failure_messages.push_back("rep " + std::to_string(r.rep) + ": " + r.error);
        }
    }
    res.reps_used = static_cast<int>(used.size());
    if (used.empty()) throw NumericalError("all replications failed");
    const double N = static_cast<double>(used.size());

    for (std::size_t k = 0; k < K; ++k) {
        TechniqueSummary s;
        s.technique = techs[k];
        double sum = 0, sq = 0, se = 0, cover = 0, closer = 0;
        for (const auto* r : used) {
            const auto& e = r->estimates[k];
            const double err = e.estimate - p.theta;
            sum += err;
            sq += err * err;
            se += e.se;
            cover += std::abs(err) <= kZ975 * e.se;
            closer += std::abs(err) < std::abs(r->estimates[0].estimate - p.theta);
        }
        s.bias = sum / N;
        s.rmse = std::sqrt(sq / N);
        s.mean_se = se / N;
        s.coverage = 100.0 * cover / N;
        double var = 0;
        for (const auto* r : used) {
            const double d = r->estimates[k].estimate - p.theta - s.bias;
            var += d * d;
        }
        s.sd_estimate = std::sqrt(var / N);
        if (k > 0) s.pct_closer = 100.0 * closer / N;
        res.summaries.push_back(s);
    }
    const double rmse0 = res.summaries[0].rmse;
    for (auto& s : res.summaries) {
        if (s.rmse > 0.0) s.relative_efficiency = rmse0 / s.rmse;
        else s.relative_efficiency = rmse0 > 0.0 ? INFINITY : 1.0;
    }
    res.summaries[0].relative_efficiency = 1.0;
    if (cfg.keep_replications) res.replications = std::move(reps);
    return res;
}

/// Runs cfg.reps replications on `jobs` worker threads (0: hardware
/// concurrency). Results do not depend on the number of workers.
inline SimResult run_study(const SimConfig& cfg, unsigned jobs = 1) {
    const GenerativeParams p = derive_params(cfg);
    const auto R = static_cast<std::size_t>(cfg.reps);
    std::vector<ReplicationResult> reps(R);
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, R));

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < R; i = next++) reps[i] = run_replication(cfg, p, i);
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    }
    return summarize(cfg, p, std::move(reps));
}

}  // namespace smarteff
