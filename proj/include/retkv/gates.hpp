// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Retention gates with a shared scoring readout, and the training losses.
//
//   beta_{l,h}(x) = sigmoid(w_g . Proj_{l,h}(x) + b_g)
//   Proj_{l,h}(x) = W2 tanh(W1 x + b1) + b2
//
// In tied mode a single (w_g, b_g) pair serves every layer and head, which
// puts all heads' scores on one scale. Untied mode keeps one readout per head
// for the ablation.

#pragma once

#include "retkv/numerics.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace retkv {

struct ModelShape {
    Index layers = 2;
    Index heads = 2;
    Index head_dim = 16;
    Index d_model = 64;
    Index gate_hidden = 16;
    Index seq_len = 128;

    Index num_heads_total() const { return layers * heads; }
    Index head_index(Index layer, Index head) const { return layer * heads + head; }

    void validate() const {
        if (layers <= 0 || heads <= 0 || head_dim <= 0 || d_model <= 0 || gate_hidden <= 0 ||
            seq_len <= 0)
            throw Error("ModelShape: every dimension must be positive");
    }
};

/// What a gate reads: the layer's residual-stream input, or the head's [k || v].
enum class GateInput : std::uint32_t { kEmbedding = 0, kKeyValue = 1 };

inline constexpr double kDefaultGateBias = 18.0;
inline constexpr const char* kGateActivation = "tanh";

struct HeadProjection {
    Matrix w1;  // gate_hidden x input_dim
    Vector b1;
    Matrix w2;  // gate_hidden x gate_hidden
    Vector b2;
};

struct GateParams {
    ModelShape shape;
    GateInput input = GateInput::kEmbedding;
    bool tied = true;
    std::vector<HeadProjection> proj;  // indexed by shape.head_index(l, h)
    std::vector<Vector> w_g;           // one entry when tied, else one per head
    std::vector<double> b_g;

    Index input_dim() const {
        return input == GateInput::kEmbedding ? shape.d_model : 2 * shape.head_dim;
    }
    Index readout_index(Index layer, Index head) const {
        return tied ? 0 : shape.head_index(layer, head);
    }

    /// Zero-valued parameters with the right shapes; also used as a gradient buffer.
    static GateParams zeros(const ModelShape& shape, GateInput input, bool tied) {
        shape.validate();
        GateParams p;
        p.shape = shape;
        p.input = input;
        p.tied = tied;
        const Index in = p.input_dim();
        const Index g = shape.gate_hidden;
        p.proj.resize(static_cast<std::size_t>(shape.num_heads_total()));
        for (auto& hp : p.proj) {
            hp.w1 = Matrix::Zero(g, in);
            hp.b1 = Vector::Zero(g);
            hp.w2 = Matrix::Zero(g, g);
            hp.b2 = Vector::Zero(g);
        }
        const std::size_t nr = tied ? 1 : static_cast<std::size_t>(shape.num_heads_total());
        p.w_g.assign(nr, Vector::Zero(g));
        p.b_g.assign(nr, 0.0);
        return p;
    }

    /// Scaled-normal projections, small random readout, readout bias `bias_init`.
    static GateParams init(const ModelShape& shape, GateInput input, bool tied, std::uint64_t seed,
                           double bias_init = kDefaultGateBias, double readout_scale = 0.01) {
        GateParams p = zeros(shape, input, tied);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n01(0.0, 1.0);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(p.input_dim()));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(shape.gate_hidden));
        for (auto& hp : p.proj) {
            for (Index i = 0; i < hp.w1.size(); ++i) hp.w1.data()[i] = s1 * n01(rng);
            for (Index i = 0; i < hp.w2.size(); ++i) hp.w2.data()[i] = s2 * n01(rng);
        }
        for (std::size_t r = 0; r < p.w_g.size(); ++r) {
            for (Index i = 0; i < p.w_g[r].size(); ++i) p.w_g[r][i] = readout_scale * n01(rng);
            p.b_g[r] = bias_init;
        }
        return p;
    }

    Index param_count() const {
        Index n = 0;
        for (const auto& hp : proj) n += hp.w1.size() + hp.b1.size() + hp.w2.size() + hp.b2.size();
        for (const auto& w : w_g) n += w.size() + 1;
        return n;
    }

    /// Flat layout: per head (w1, b1, w2, b2) in head order, then per readout (w_g, b_g).
    Vector to_flat() const {
        Vector out(param_count());
        Index k = 0;
        auto put = [&](const double* src, Index n) {
            for (Index i = 0; i < n; ++i) out[k++] = src[i];
        };
        for (const auto& hp : proj) {
            put(hp.w1.data(), hp.w1.size());
            put(hp.b1.data(), hp.b1.size());
            put(hp.w2.data(), hp.w2.size());
            put(hp.b2.data(), hp.b2.size());
        }
        for (std::size_t r = 0; r < w_g.size(); ++r) {
            put(w_g[r].data(), w_g[r].size());
            put(&b_g[r], 1);
        }
        return out;
    }

    void from_flat(const Eigen::Ref<const Vector>& flat) {
        require_shape(flat.size() == param_count(), "GateParams::from_flat: length mismatch");
        Index k = 0;
        auto get = [&](double* dst, Index n) {
            for (Index i = 0; i < n; ++i) dst[i] = flat[k++];
        };
        for (auto& hp : proj) {
            get(hp.w1.data(), hp.w1.size());
            get(hp.b1.data(), hp.b1.size());
            get(hp.w2.data(), hp.w2.size());
            get(hp.b2.data(), hp.b2.size());
        }
        for (std::size_t r = 0; r < w_g.size(); ++r) {
            get(w_g[r].data(), w_g[r].size());
            get(&b_g[r], 1);
        }
    }

    bool all_finite() const { return to_flat().allFinite(); }
};

/// Intermediate values of one gate evaluation, kept for the backward pass.
struct GateActivation {
    Vector hidden;  // tanh(W1 x + b1)
    Vector proj;    // W2 hidden + b2
    double pre = 0.0;
    double beta = 1.0;
    double log_beta = 0.0;
};

inline GateActivation gate_eval(const Eigen::Ref<const Vector>& x, Index layer, Index head,
                                const GateParams& params) {
    const auto& s = params.shape;
    require_shape(layer >= 0 && layer < s.layers && head >= 0 && head < s.heads,
                  "gate: layer/head out of range");
    require_shape(x.size() == params.input_dim(), "gate: input width mismatch");
    const auto& hp = params.proj[static_cast<std::size_t>(s.head_index(layer, head))];
    const auto r = static_cast<std::size_t>(params.readout_index(layer, head));
    GateActivation a;
    a.hidden = (hp.w1 * x + hp.b1).array().tanh().matrix();
    a.proj = hp.w2 * a.hidden + hp.b2;
    a.pre = params.w_g[r].dot(a.proj) + params.b_g[r];
    a.beta = sigmoid(a.pre);
    a.log_beta = log_sigmoid(a.pre);
    return a;
}

inline double gate_forward(const Eigen::Ref<const Vector>& x, Index layer, Index head,
                           const GateParams& params) {
    return gate_eval(x, layer, head, params).beta;
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(pre-sigmoid);
/// returns d(loss)/d(x).
inline Vector gate_backward(const Eigen::Ref<const Vector>& x, Index layer, Index head,
                            const GateParams& params, const GateActivation& act, double d_pre,
                            GateParams& grad) {
    const auto hi = static_cast<std::size_t>(params.shape.head_index(layer, head));
    const auto r = static_cast<std::size_t>(params.readout_index(layer, head));
    const auto& hp = params.proj[hi];
    auto& gp = grad.proj[hi];
    grad.w_g[r] += d_pre * act.proj;
    grad.b_g[r] += d_pre;
    const Vector d_proj = d_pre * params.w_g[r];
    gp.w2 += d_proj * act.hidden.transpose();
    gp.b2 += d_proj;
    const Vector d_hidden = hp.w2.transpose() * d_proj;
    const Vector d_z1 = d_hidden.array() * (1.0 - act.hidden.array().square());
    gp.w1 += d_z1 * x.transpose();
    gp.b1 += d_z1;
    return hp.w1.transpose() * d_z1;
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline Vector log_softmax_row(const Eigen::Ref<const Vector>& z) {
    if (!z.allFinite()) throw NonFiniteError("loss: non-finite logits");
    return z.array() - log_sum_exp(z);
}

}  // namespace detail

struct QualityTerms {
    double kl = 0.0;
    double nll = 0.0;
    double total() const { return kl + nll; }
};

/// Mean over rows of KL(teacher || student) + (-log student[target]).
/// When `d_student` is non-null it receives the gradient w.r.t. student logits.
inline QualityTerms quality_terms(const Matrix& teacher_logits, const Matrix& student_logits,
                                  const std::vector<Index>& targets, Matrix* d_student = nullptr) {
    require_shape(teacher_logits.rows() == student_logits.rows() &&
                      teacher_logits.cols() == student_logits.cols(),
                  "quality_loss: teacher/student shapes differ");
    require_shape(static_cast<Index>(targets.size()) == student_logits.rows(),
                  "quality_loss: one target per row required");
    const Index rows = student_logits.rows();
    const Index vocab = student_logits.cols();
    QualityTerms out;
    if (d_student) *d_student = Matrix::Zero(rows, vocab);
    if (rows == 0) return out;
    const double inv = 1.0 / static_cast<double>(rows);
    for (Index t = 0; t < rows; ++t) {
        const Vector lp = detail::log_softmax_row(teacher_logits.row(t).transpose());
        const Vector lq = detail::log_softmax_row(student_logits.row(t).transpose());
        const Index y = targets[static_cast<std::size_t>(t)];
        require_shape(y >= 0 && y < vocab, "quality_loss: target outside vocabulary");
        double kl = 0.0;
        for (Index v = 0; v < vocab; ++v) {
            const double p = std::exp(lp[v]);
            if (p > 0.0) kl += p * (lp[v] - lq[v]);
        }
        out.kl += inv * kl;
        out.nll -= inv * lq[y];
        if (d_student) {
            for (Index v = 0; v < vocab; ++v) {
                const double q = std::exp(lq[v]);
                (*d_student)(t, v) = inv * (2.0 * q - std::exp(lp[v]) - (v == y ? 1.0 : 0.0));
            }
        }
    }
    return out;
}

inline double quality_loss(const Matrix& teacher_logits, const Matrix& student_logits,
                           const std::vector<Index>& targets) {
    return quality_terms(teacher_logits, student_logits, targets).total();
}

/// Row h of `log_betas` holds log beta of every token for flattened head h.
/// Returns the hinge total and, if requested, d(loss)/d(log beta).
/// `per_head` selects a separate budget per head instead of one pooled sum.
inline double cap_loss_log(const Matrix& log_betas, double budget, bool per_head,
                           Matrix* d_log_betas = nullptr) {
    const Index heads = log_betas.rows();
    const Index T = log_betas.cols();
    // mass(h, t) = sum_{i<=t} beta_{h,i}^(t-i)
    Matrix mass = Matrix::Zero(heads, T);
    for (Index h = 0; h < heads; ++h)
        for (Index t = 0; t < T; ++t) {
            double s = 1.0;  // i = t, exponent 0
            for (Index i = 0; i < t; ++i) {
                const double lb = log_betas(h, i);
                if (lb != kNegInf) s += std::exp(static_cast<double>(t - i) * lb);
            }
            mass(h, t) = s;
        }
    double loss = 0.0;
    Matrix active = Matrix::Zero(heads, T);
    for (Index t = 0; t < T; ++t) {
        if (per_head) {
            for (Index h = 0; h < heads; ++h)
                if (mass(h, t) > budget) {
                    loss += mass(h, t) - budget;
                    active(h, t) = 1.0;
                }
        } else {
            const double s = mass.col(t).sum();
            if (s > budget) {
                loss += s - budget;
                active.col(t).setOnes();
            }
        }
    }
    if (d_log_betas) {
        *d_log_betas = Matrix::Zero(heads, T);
        for (Index h = 0; h < heads; ++h)
            for (Index i = 0; i < T; ++i) {
                const double lb = log_betas(h, i);
                if (lb == kNegInf) continue;
                double g = 0.0;
                for (Index t = i + 1; t < T; ++t)
                    if (active(h, t) != 0.0) {
                        const double a = static_cast<double>(t - i);
                        g += a * std::exp(a * lb);
                    }
                (*d_log_betas)(h, i) = g;
            }
    }
    return loss;
}

namespace detail {

inline Matrix to_log(const Matrix& betas) {
    Matrix lb(betas.rows(), betas.cols());
    for (Index i = 0; i < betas.size(); ++i) {
        const double b = betas.data()[i];
        if (!(b >= 0.0 && b <= 1.0)) throw Error("cap loss: beta outside [0,1]");
        lb.data()[i] = b > 0.0 ? std::log(b) : kNegInf;
    }
    return lb;
}

}  // namespace detail

/// sum_t max(0, sum_{l,h} sum_{i<=t} beta^(t-i) - budget). Rows of `betas`
/// are the L*H heads, columns are token positions.
inline double cap_loss_global(const Matrix& betas, double budget, const ModelShape& shape) {
    require_shape(betas.rows() == shape.num_heads_total(), "cap_loss_global: row count != L*H");
    return cap_loss_log(detail::to_log(betas), budget, false);
}

/// Same hinge with a separate budget for every head, summed over heads.
inline double cap_loss_per_head(const Matrix& betas, double budget, const ModelShape& shape) {
    require_shape(betas.rows() == shape.num_heads_total(), "cap_loss_per_head: row count != L*H");
    return cap_loss_log(detail::to_log(betas), budget, true);
}

inline constexpr double kDefaultCapWeight = 1.0;

inline double total_loss(double quality, double cap, double lambda = kDefaultCapWeight) {
    if (lambda < 0.0) throw Error("total_loss: lambda must be non-negative");
    return quality + lambda * cap;
}

}  // namespace retkv
