// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Gate training against a frozen backbone.
//
// The teacher runs with full attention, the student with retention-weighted
// attention whose betas come from the gates. Only gate parameters move.

#pragma once

#include "retkv/backbone.hpp"
#include "retkv/gates.hpp"
#include "retkv/numerics.hpp"
#include "retkv/task.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace retkv {

class DivergenceError : public Error {
public:
    using Error::Error;
};

struct TrainConfig {
    Index steps = 500;
    Index batch = 4;
    double lr = 1e-3;
    double cap_weight = kDefaultCapWeight;  // lambda
    double cap_budget = 128.0;              // soft M_global used by the hinge
    bool per_head_cap = false;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;
    double lr_final = 1.0;                  // lr multiplier reached linearly at the last step
    double divergence_factor = 100.0;       // loss above this multiple of the first loss diverges
    std::uint64_t seed = 1;

    void validate() const {
        if (steps < 0 || batch < 1) throw Error("TrainConfig: steps >= 0 and batch >= 1 required");
        if (!(lr > 0.0)) throw Error("TrainConfig: lr must be positive");
        if (cap_weight < 0.0) throw Error("TrainConfig: cap_weight must be >= 0");
        if (!(cap_budget > 0.0)) throw Error("TrainConfig: cap_budget must be positive");
        if (!(divergence_factor > 1.0)) throw Error("TrainConfig: divergence_factor must exceed 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
            throw Error("TrainConfig: Adam betas must lie in [0,1)");
        if (!(adam_eps > 0.0)) throw Error("TrainConfig: adam_eps must be positive");
        if (!(lr_final >= 0.0)) throw Error("TrainConfig: lr_final must be >= 0");
    }
};

struct ObjectiveValue {
    QualityTerms quality;
    double cap = 0.0;
    double total = 0.0;
};

/// Loss on one sample; when `grad` is non-null, d(total)/d(gates) is added to it.
inline ObjectiveValue evaluate_objective(const Backbone& bb, const GateParams& gates,
                                         const Sample& sample, double cap_budget, bool per_head_cap,
                                         double lambda, GateParams* grad = nullptr) {
    const ForwardTrace teacher = forward(bb, sample.tokens, AttentionMode::kFull);
    const ForwardTrace student = forward(bb, sample.tokens, AttentionMode::kRetained, &gates);
    const Index rows = static_cast<Index>(sample.scored_positions.size());
    Matrix tl(rows, bb.vocab), sl(rows, bb.vocab);
    for (Index r = 0; r < rows; ++r) {
        const Index p = sample.scored_positions[static_cast<std::size_t>(r)];
        tl.row(r) = teacher.logits.row(p);
        sl.row(r) = student.logits.row(p);
    }
    ObjectiveValue v;
    Matrix d_rows;
    v.quality = quality_terms(tl, sl, sample.targets, grad ? &d_rows : nullptr);
    Matrix d_lb;
    v.cap = cap_loss_log(log_beta_matrix(student), cap_budget, per_head_cap, grad ? &d_lb : nullptr);
    v.total = total_loss(v.quality.total(), v.cap, lambda);
    if (grad) {
        Matrix d_logits = Matrix::Zero(student.logits.rows(), bb.vocab);
        for (Index r = 0; r < rows; ++r)
            d_logits.row(sample.scored_positions[static_cast<std::size_t>(r)]) = d_rows.row(r);
        backward_gates(bb, gates, student, d_logits, lambda * d_lb, *grad);
    }
    return v;
}

struct LossRecord {
    Index step = 0;
    double quality = 0.0;
    double cap = 0.0;
    double total = 0.0;
};

/// Adam over a flat parameter vector.
class Adam {
public:
    Adam(Index n, double b1, double b2, double eps)
        : m_(Vector::Zero(n)), v_(Vector::Zero(n)), b1_(b1), b2_(b2), eps_(eps) {}

    void update(Vector& params, const Vector& grad, double lr) {
        ++t_;
        m_ = b1_ * m_ + (1.0 - b1_) * grad;
        v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

private:
    Vector m_, v_;
    double b1_, b2_, eps_;
    Index t_ = 0;
};

struct TrainResult {
    GateParams gates;
    std::vector<LossRecord> curve;
};

/// Minibatch training on freshly generated samples. Throws DivergenceError
/// when the loss becomes non-finite or blows up.
inline TrainResult train_gates(const Backbone& bb, GateParams gates, const TaskSpec& task,
                               const TrainConfig& cfg) {
    cfg.validate();
    TrainResult out;
    std::mt19937_64 rng(cfg.seed);
    Adam opt(gates.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Vector flat = gates.to_flat();
    double first = -1.0;
    const double inv = 1.0 / static_cast<double>(cfg.batch);
    for (Index step = 0; step < cfg.steps; ++step) {
        GateParams grad = GateParams::zeros(gates.shape, gates.input, gates.tied);
        LossRecord rec{step, 0.0, 0.0, 0.0};
        for (Index b = 0; b < cfg.batch; ++b) {
            const Sample smp = generate_sample(task, rng);
            const ObjectiveValue v = evaluate_objective(bb, gates, smp, cfg.cap_budget,
                                                        cfg.per_head_cap, cfg.cap_weight, &grad);
            rec.quality += inv * v.quality.total();
            rec.cap += inv * v.cap;
            rec.total += inv * v.total;
        }
        if (!std::isfinite(rec.total)) throw DivergenceError("training diverged: non-finite loss");
        if (first < 0.0) first = std::max(rec.total, 1.0);
        if (rec.total > cfg.divergence_factor * first)
            throw DivergenceError("training diverged: loss grew past the divergence threshold");
        out.curve.push_back(rec);
        Vector g = grad.to_flat() * inv;
        if (!g.allFinite()) throw DivergenceError("training diverged: non-finite gradient");
        const double frac = cfg.steps > 1 ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1) : 0.0;
        const double lr = cfg.lr * (1.0 - frac * (1.0 - cfg.lr_final));
        opt.update(flat, g, lr);
        gates.from_flat(flat);
    }
    out.gates = std::move(gates);
    return out;
}

}  // namespace retkv
