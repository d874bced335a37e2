// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Numerical checks for attention dilution and geometric token persistence.
//
//  * dilution lower bound under near-tie distractors and its checker
//  * the exact dilution identity for reweighted (retained) attention
//  * Monte Carlo persistence of a token inside its relaxed top-K region
//    when query states follow a stable VAR(1) chain
//  * least-squares VAR(1) fitting, PCA projection, survival curves

#pragma once

#include "retkv/attention.hpp"
#include "retkv/numerics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace retkv {

/// The query-state chain or region violates a modelling assumption.
class AssumptionViolation : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Dilution

/// e^{-margin} (nD/nU) / (1 + e^{-margin} (nD/nU))
inline double dilution_lower_bound(double margin, Index n_distractors, Index n_useful) {
    if (n_useful < 1) throw Error("dilution_lower_bound: need at least one useful token");
    if (margin < 0.0) throw Error("dilution_lower_bound: margin must be >= 0");
    const double r = std::exp(-margin) * static_cast<double>(n_distractors) /
                     static_cast<double>(n_useful);
    return r / (1.0 + r);
}

struct DilutionInstance {
    Vector logits;
    UsefulSet useful;
    double margin = 0.0;          // every near-tie distractor is within margin of the best useful logit
    std::set<Index> near_tie;

    void validate() const {
        if (useful.empty()) throw Error("DilutionInstance: useful set is empty");
        if (margin < 0.0) throw Error("DilutionInstance: margin must be >= 0");
        double best = kNegInf;
        for (Index i : useful) {
            if (i < 0 || i >= logits.size()) throw Error("DilutionInstance: useful index out of range");
            best = std::max(best, logits[i]);
        }
        for (Index d : near_tie) {
            if (d < 0 || d >= logits.size()) throw Error("DilutionInstance: distractor out of range");
            if (useful.count(d)) throw Error("DilutionInstance: distractor also marked useful");
            if (logits[d] < best - margin) throw Error("DilutionInstance: distractor outside margin");
        }
    }
};

struct Prop1Check {
    double delta = 0.0;
    double bound = 0.0;
    bool holds = false;
};

inline Prop1Check check_prop1(const DilutionInstance& inst) {
    inst.validate();
    Prop1Check c;
    c.delta = dilution(softmax(inst.logits), inst.useful);
    c.bound = dilution_lower_bound(inst.margin, static_cast<Index>(inst.near_tie.size()),
                                   static_cast<Index>(inst.useful.size()));
    c.holds = c.delta >= c.bound;
    return c;
}

/// Dilution after reweighting: (a delta) / ((1 - delta) + a delta) with a = rhoD / rhoU.
inline double retention_dilution(double delta, double rho_useful, double rho_distractor) {
    if (!(rho_useful > 0.0)) throw Error("retention_dilution: rho_useful must be positive");
    if (!(delta >= 0.0 && delta < 1.0)) throw Error("retention_dilution: delta must lie in [0,1)");
    if (rho_distractor < 0.0) throw Error("retention_dilution: rho_distractor must be >= 0");
    const double a = rho_distractor / rho_useful;
    const double num = a * delta;
    return num / ((1.0 - delta) + num);
}

struct Cor1Check {
    double direct = 0.0;   // dilution of softmax(logits + log r)
    double formula = 0.0;  // retention_dilution(delta, rhoU, rhoD)
    double delta = 0.0;
    double rho_useful = 0.0;
    double rho_distractor = 0.0;
};

/// Logit-weighted retention averages over useful and distractor tokens.
inline Cor1Check check_cor1(const Vector& logits, const UsefulSet& useful, const Vector& retention) {
    require_shape(logits.size() == retention.size(), "check_cor1: length mismatch");
    Vector lw(retention.size());
    for (Index i = 0; i < retention.size(); ++i) {
        const double r = retention[i];
        if (!(r >= 0.0 && r <= 1.0)) throw Error("check_cor1: retention outside [0,1]");
        lw[i] = r > 0.0 ? std::log(r) : kNegInf;
    }
    Cor1Check c;
    c.direct = dilution(softmax_log_space(logits, lw), useful);
    const Vector full = softmax(logits);
    c.delta = dilution(full, useful);
    double wu = 0.0, ru = 0.0, wd = 0.0, rd = 0.0;
    for (Index i = 0; i < logits.size(); ++i) {
        if (useful.count(i)) {
            wu += full[i];
            ru += retention[i] * full[i];
        } else {
            wd += full[i];
            rd += retention[i] * full[i];
        }
    }
    c.rho_useful = ru / wu;
    c.rho_distractor = wd > 0.0 ? rd / wd : 0.0;
    c.formula = retention_dilution(c.delta, c.rho_useful, c.rho_distractor);
    return c;
}

// ---------------------------------------------------------------------------
// Random helpers

/// SplitMix64 step, used to derive independent per-task seeds.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double spectral_radius(const Matrix& a) {
    require_shape(a.rows() == a.cols(), "spectral_radius: matrix must be square");
    if (a.rows() == 0) return 0.0;
    Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(a), false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Persistence under VAR(1) query dynamics

struct PersistenceConfig {
    Index dim = 2;               // query-state dimension m
    Matrix transition;           // A, m x m
    Vector drift;                // b, m
    double noise_scale = 1.0;    // innovations are noise_scale * N(0, I)
    Matrix compat;               // one compatibility vector per cached token, N x m
    Index token = 0;             // row of `compat` whose persistence is measured
    Index top_k = 1;
    double slack = 0.0;          // Delta_i >= 0
    Index block = 1;             // b_i >= 1
    double assumed_exit = 0.0;   // eps_i when known analytically, 0 otherwise

    void validate() const {
        require_shape(transition.rows() == dim && transition.cols() == dim,
                      "PersistenceConfig: transition must be m x m");
        require_shape(drift.size() == dim, "PersistenceConfig: drift must have length m");
        require_shape(compat.cols() == dim, "PersistenceConfig: compat width must be m");
        if (token < 0 || token >= compat.rows()) throw Error("PersistenceConfig: token out of range");
        if (top_k < 1 || top_k > compat.rows())
            throw Error("PersistenceConfig: top_k must be in [1, cached tokens]");
        if (slack < 0.0) throw Error("PersistenceConfig: slack must be >= 0");
        if (block < 1) throw Error("PersistenceConfig: block must be >= 1");
        if (noise_scale < 0.0) throw Error("PersistenceConfig: noise_scale must be >= 0");
        if (spectral_radius(transition) >= 1.0)
            throw AssumptionViolation("query dynamics unstable: spectral radius of A >= 1");
    }

    /// r . c_token >= (K-th largest r . c_j) - slack
    bool in_region(const Vector& r, std::vector<double>& scratch) const {
        scratch.resize(static_cast<std::size_t>(compat.rows()));
        double own = 0.0;
        for (Index j = 0; j < compat.rows(); ++j) {
            const double s = compat.row(j).dot(r);
            scratch[static_cast<std::size_t>(j)] = s;
            if (j == token) own = s;
        }
        auto kth = scratch.begin() + (top_k - 1);
        std::nth_element(scratch.begin(), kth, scratch.end(), std::greater<double>());
        return own >= *kth - slack;
    }
};

/// Theoretical constants for a block-exit probability eps and block length b.
struct PersistenceBound {
    double beta = 1.0;   // (1 - eps)^(1/b)
    double scale = 1.0;  // A = (1 - eps)^-1
    double theta = 0.0;  // -log(1 - eps) / b

    static PersistenceBound from_exit(double eps, Index block) {
        if (!(eps >= 0.0 && eps <= 1.0)) throw Error("PersistenceBound: eps outside [0,1]");
        if (block < 1) throw Error("PersistenceBound: block must be >= 1");
        PersistenceBound pb;
        if (eps >= 1.0) {
            pb.beta = 0.0;
            pb.scale = std::numeric_limits<double>::infinity();
            pb.theta = std::numeric_limits<double>::infinity();
            return pb;
        }
        pb.theta = -std::log1p(-eps) / static_cast<double>(block);
        pb.beta = std::exp(-pb.theta);
        pb.scale = 1.0 / (1.0 - eps);
        return pb;
    }

    double at(Index n) const {
        if (beta == 0.0) return n == 0 ? 1.0 : 0.0;
        return scale * std::pow(beta, static_cast<double>(n));
    }
};

struct PersistenceOptions {
    Index max_steps = 200;        // n_max
    Index trials = 10000;
    Index start_states = 1000;    // in-region states probed for the block-exit estimate
    Index rollouts_per_state = 1000;
    Index burn_in = 200;
    Index thinning = 5;
    std::uint64_t seed = 1;
};

struct PersistenceResult {
    std::vector<double> survival;  // P(n), n = 0..max_steps
    std::vector<double> stderr_;   // Monte Carlo standard error per n
    double exit_estimate = 0.0;    // eps_hat = 1 - max_r P_r(stay b steps)
    PersistenceBound bound;
    bool vacuous = false;          // no exits observed; bound says nothing
    Index violations = 0;          // n with P(n) > A beta^n + 3 stderr
    double min_margin = std::numeric_limits<double>::infinity();
};

class VarChain {
public:
    VarChain(const PersistenceConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

    Vector stationary_mean() const {
        const Index m = cfg_.dim;
        const Eigen::MatrixXd i_minus_a = Eigen::MatrixXd::Identity(m, m) - Eigen::MatrixXd(cfg_.transition);
        return i_minus_a.colPivHouseholderQr().solve(Eigen::VectorXd(cfg_.drift));
    }

    void advance(Vector& r) {
        Vector next = cfg_.transition * r + cfg_.drift;
        for (Index j = 0; j < next.size(); ++j) next[j] += cfg_.noise_scale * n01_(rng_);
        r = std::move(next);
    }

private:
    const PersistenceConfig& cfg_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> n01_{0.0, 1.0};
};

/// Estimates P(next n states all inside the relaxed region) from stationary
/// starts, measures the worst-case block-exit probability over sampled
/// in-region states, and compares against A beta^n.
inline PersistenceResult simulate_persistence(const PersistenceConfig& cfg,
                                              const PersistenceOptions& opt) {
    cfg.validate();
    if (opt.trials < 1 || opt.max_steps < 1 || opt.start_states < 1 || opt.rollouts_per_state < 1)
        throw Error("simulate_persistence: counts must be positive");
    std::vector<double> scratch;

    // In-region start states drawn from a thinned stationary run.
    std::vector<Vector> starts;
    {
        VarChain chain(cfg, derive_seed(opt.seed, 0));
        Vector r = chain.stationary_mean();
        for (Index s = 0; s < opt.burn_in; ++s) chain.advance(r);
        const Index max_iters = 1000 * opt.start_states * std::max<Index>(opt.thinning, 1);
        for (Index it = 0; it < max_iters && static_cast<Index>(starts.size()) < opt.start_states; ++it) {
            chain.advance(r);
            if (it % std::max<Index>(opt.thinning, 1) == 0 && cfg.in_region(r, scratch))
                starts.push_back(r);
        }
        if (starts.empty())
            throw AssumptionViolation("relaxed region never visited by the stationary chain");
    }

    double max_stay = 0.0;
    for (std::size_t s = 0; s < starts.size(); ++s) {
        VarChain chain(cfg, derive_seed(opt.seed, 1000 + s));
        Index stay = 0;
        for (Index k = 0; k < opt.rollouts_per_state; ++k) {
            Vector r = starts[s];
            bool inside = true;
            for (Index b = 0; b < cfg.block && inside; ++b) {
                chain.advance(r);
                inside = cfg.in_region(r, scratch);
            }
            stay += inside ? 1 : 0;
        }
        max_stay = std::max(max_stay, static_cast<double>(stay) / static_cast<double>(opt.rollouts_per_state));
    }

    PersistenceResult res;
    res.exit_estimate = 1.0 - max_stay;
    res.vacuous = res.exit_estimate <= 0.0;
    res.bound = PersistenceBound::from_exit(res.exit_estimate, cfg.block);

    // Survival from stationary starts: count trials whose first exit is after n.
    std::vector<Index> alive(static_cast<std::size_t>(opt.max_steps + 1), 0);
    {
        VarChain chain(cfg, derive_seed(opt.seed, 2));
        Vector r = chain.stationary_mean();
        for (Index s = 0; s < opt.burn_in; ++s) chain.advance(r);
        for (Index t = 0; t < opt.trials; ++t) {
            for (Index s = 0; s < opt.thinning; ++s) chain.advance(r);
            Vector path = r;
            ++alive[0];
            for (Index n = 1; n <= opt.max_steps; ++n) {
                chain.advance(path);
                if (!cfg.in_region(path, scratch)) break;
                ++alive[static_cast<std::size_t>(n)];
            }
        }
    }
    const double N = static_cast<double>(opt.trials);
    res.survival.resize(alive.size());
    res.stderr_.resize(alive.size());
    for (std::size_t n = 0; n < alive.size(); ++n) {
        const double p = static_cast<double>(alive[n]) / N;
        res.survival[n] = p;
        res.stderr_[n] = std::sqrt(p * (1.0 - p) / N);
        if (n == 0 || res.vacuous) continue;
        const double margin = res.bound.at(static_cast<Index>(n)) + 3.0 * res.stderr_[n] - p;
        res.min_margin = std::min(res.min_margin, margin);
        if (margin < 0.0) ++res.violations;
    }
    return res;
}

// ---------------------------------------------------------------------------
// VAR(1) fitting and PCA

struct Var1Fit {
    Matrix transition;   // A
    Vector drift;        // b
    Matrix residuals;    // stacked one-step residuals
    double spectral_radius = 0.0;
    bool stable = false;
};

inline constexpr double kStabilityTolerance = 0.01;

/// Least squares r_{s+1} = A r_s + b over all consecutive pairs. `stable`
/// requires the radius to sit at least `tolerance` inside the unit circle so
/// that unit-root data, whose OLS radius is biased just below 1, is flagged.
inline Var1Fit fit_var1(const std::vector<Matrix>& trajectories,
                        double tolerance = kStabilityTolerance) {
    if (trajectories.empty()) throw Error("fit_var1: no trajectories");
    const Index m = trajectories.front().cols();
    Index pairs = 0;
    for (const auto& tr : trajectories) {
        require_shape(tr.cols() == m, "fit_var1: trajectories differ in width");
        if (tr.rows() < m + 1) throw Error("fit_var1: each trajectory needs at least m+1 steps");
        pairs += tr.rows() - 1;
    }
    Eigen::MatrixXd X(pairs, m + 1), Y(pairs, m);
    Index row = 0;
    for (const auto& tr : trajectories)
        for (Index s = 0; s + 1 < tr.rows(); ++s, ++row) {
            X.row(row).head(m) = tr.row(s);
            X(row, m) = 1.0;
            Y.row(row) = tr.row(s + 1);
        }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < m + 1) throw Error("fit_var1: singular design matrix");
    const Eigen::MatrixXd B = qr.solve(Y);  // (m+1) x m
    Var1Fit fit;
    fit.transition = B.topRows(m).transpose();
    fit.drift = B.row(m).transpose();
    fit.residuals = Y - X * B;
    fit.spectral_radius = spectral_radius(fit.transition);
    fit.stable = fit.spectral_radius < 1.0 - tolerance;
    return fit;
}

struct PcaProjection {
    Vector mean;
    Matrix components;  // D x k, columns ordered by decreasing variance
    Vector variances;

    Matrix project(const Matrix& states) const {
        return (states.rowwise() - mean.transpose()) * components;
    }
};

/// Top-k principal directions of pooled states from the covariance eigendecomposition.
inline PcaProjection fit_pca(const Matrix& pooled, Index k) {
    require_shape(k >= 1 && k <= pooled.cols(), "fit_pca: k out of range");
    if (pooled.rows() < 2) throw Error("fit_pca: need at least two states");
    PcaProjection p;
    p.mean = pooled.colwise().mean().transpose();
    const Eigen::MatrixXd centered = pooled.rowwise() - p.mean.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(pooled.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Index D = pooled.cols();
    p.components.resize(D, k);
    p.variances.resize(k);
    for (Index j = 0; j < k; ++j) {
        Eigen::VectorXd v = es.eigenvectors().col(D - 1 - j);
        Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        p.components.col(j) = v;
        p.variances[j] = es.eigenvalues()[D - 1 - j];
    }
    return p;
}

// ---------------------------------------------------------------------------
// Survival analysis

struct SelectionCriterion {
    enum class Kind { kTopK, kMass } kind = Kind::kTopK;
    Index top_k = 1;
    double tau = 0.99;

    static SelectionCriterion topk(Index k) { return {Kind::kTopK, k, 0.0}; }
    static SelectionCriterion mass(double tau) { return {Kind::kMass, 0, tau}; }

    std::string name() const {
        if (kind == Kind::kTopK) return "top" + std::to_string(top_k);
        std::string t = std::to_string(tau);
        t.erase(t.find_last_not_of('0') + 1);
        return "mass" + t;
    }
};

/// Indices selected by one query from its attention logits. Top-K ranks by
/// logit then by newer position; the mass rule takes the smallest prefix of
/// that order whose softmax mass reaches tau.
inline std::vector<Index> select_tokens(const Vector& logits, const SelectionCriterion& c) {
    const Index n = logits.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a > b;
    });
    if (c.kind == SelectionCriterion::Kind::kTopK) {
        order.resize(static_cast<std::size_t>(std::min(c.top_k, n)));
        return order;
    }
    const Vector w = softmax(logits);
    double acc = 0.0;
    std::size_t take = 0;
    while (take < order.size()) {
        acc += w[order[take]];
        ++take;
        if (acc >= c.tau) break;
    }
    order.resize(take);
    return order;
}

struct SurvivalRecord {
    Index birth = 0;
    std::vector<Index> selection_steps;  // query positions that selected this token
    SelectionCriterion criterion;

    Index last_selected() const {
        return selection_steps.empty() ? -1
                                       : *std::max_element(selection_steps.begin(), selection_steps.end());
    }
};

/// Fraction of records alive at each horizon: selected by some query at
/// least `horizon` positions after birth.
inline std::vector<double> survival_curve(const std::vector<SurvivalRecord>& records,
                                          const std::vector<Index>& horizons) {
    std::vector<double> out;
    out.reserve(horizons.size());
    for (Index L : horizons) {
        if (L < 1) throw Error("survival_curve: horizons must be positive");
        if (records.empty()) {
            out.push_back(0.0);
            continue;
        }
        Index alive = 0;
        for (const auto& r : records) {
            const Index last = r.last_selected();
            if (last >= 0 && last - r.birth >= L) ++alive;
        }
        out.push_back(static_cast<double>(alive) / static_cast<double>(records.size()));
    }
    return out;
}

}  // namespace retkv
