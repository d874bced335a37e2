// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Frozen attention-only transformer used as the teacher/student backbone.
//
//   x0_t      = E[tok_t] + P[t]
//   x{l+1}_t  = xl_t + sum_h Wo_{l,h} attn_{l,h}(xl)_t
//   logits_t  = U x_L_t
//
// The backbone never receives gradients. `backward_gates` propagates a loss
// through the whole network but only accumulates into GateParams.

#pragma once

#include "retkv/attention.hpp"
#include "retkv/gates.hpp"
#include "retkv/numerics.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace retkv {

struct Backbone {
    ModelShape shape;
    Index vocab = 0;
    Index max_positions = 0;
    Matrix embed;               // vocab x d_model
    Matrix positions;           // max_positions x d_model
    std::vector<Matrix> wq;     // head_dim x d_model, per flattened head
    std::vector<Matrix> wk;
    std::vector<Matrix> wv;
    std::vector<Matrix> wo;     // d_model x head_dim
    Matrix unembed;             // vocab x d_model

    static Backbone zeros(const ModelShape& shape, Index vocab, Index max_positions) {
        shape.validate();
        Backbone b;
        b.shape = shape;
        b.vocab = vocab;
        b.max_positions = max_positions;
        b.embed = Matrix::Zero(vocab, shape.d_model);
        b.positions = Matrix::Zero(max_positions, shape.d_model);
        const auto n = static_cast<std::size_t>(shape.num_heads_total());
        b.wq.assign(n, Matrix::Zero(shape.head_dim, shape.d_model));
        b.wk = b.wq;
        b.wv = b.wq;
        b.wo.assign(n, Matrix::Zero(shape.d_model, shape.head_dim));
        b.unembed = Matrix::Zero(vocab, shape.d_model);
        return b;
    }

    /// Seeded Gaussian weights scaled by fan-in.
    static Backbone random(const ModelShape& shape, Index vocab, Index max_positions,
                           std::uint64_t seed) {
        Backbone b = zeros(shape, vocab, max_positions);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n01(0.0, 1.0);
        auto fill = [&](Matrix& m, double s) {
            for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * n01(rng);
        };
        const double sd = 1.0 / std::sqrt(static_cast<double>(shape.d_model));
        const double sh = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
        fill(b.embed, 1.0);
        fill(b.positions, 0.5);
        for (std::size_t h = 0; h < b.wq.size(); ++h) {
            fill(b.wq[h], 2.0 * sd);
            fill(b.wk[h], 2.0 * sd);
            fill(b.wv[h], sd);
            fill(b.wo[h], sh);
        }
        fill(b.unembed, sd);
        return b;
    }

    std::size_t head_slot(Index layer, Index head) const {
        return static_cast<std::size_t>(shape.head_index(layer, head));
    }

    Vector input_embedding(Index token, Index position) const {
        require_shape(token >= 0 && token < vocab, "backbone: token outside vocabulary");
        require_shape(position >= 0 && position < max_positions, "backbone: position out of range");
        return (embed.row(token) + positions.row(position)).transpose();
    }
};

/// How the attention weights are modulated during a batch forward pass.
enum class AttentionMode { kFull, kRetained };

/// Per-head intermediates of a forward pass.
struct HeadTrace {
    Matrix q, k, v;                    // T x head_dim
    Matrix alpha;                      // T x T, row t is the distribution over i <= t
    Vector log_beta;                   // T (zeros in full mode)
    std::vector<GateActivation> gate;  // T (empty in full mode)
};

struct ForwardTrace {
    std::vector<Matrix> residual;  // L+1 matrices, T x d_model
    std::vector<HeadTrace> heads;  // flattened (l, h)
    Matrix logits;                 // T x vocab
};

inline Vector gate_input_of(const GateParams& gates, const ForwardTrace& tr, const HeadTrace& ht,
                            Index layer, Index t) {
    if (gates.input == GateInput::kEmbedding)
        return tr.residual[static_cast<std::size_t>(layer)].row(t).transpose();
    Vector in(2 * ht.k.cols());
    in << ht.k.row(t).transpose(), ht.v.row(t).transpose();
    return in;
}

/// Causal forward pass over a whole sequence. In retained mode the weight of
/// cached token i at step t is beta_i^(t-i), with beta produced by `gates`
/// from the student's own activations.
inline ForwardTrace forward(const Backbone& bb, const std::vector<Index>& tokens,
                            AttentionMode mode, const GateParams* gates = nullptr) {
    const auto& s = bb.shape;
    const Index T = static_cast<Index>(tokens.size());
    require_shape(T > 0 && T <= bb.max_positions, "forward: sequence length out of range");
    if (mode == AttentionMode::kRetained && gates == nullptr)
        throw Error("forward: retained mode needs gate parameters");
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));

    ForwardTrace tr;
    tr.residual.assign(static_cast<std::size_t>(s.layers + 1), Matrix::Zero(T, s.d_model));
    for (Index t = 0; t < T; ++t)
        tr.residual[0].row(t) = bb.input_embedding(tokens[static_cast<std::size_t>(t)], t).transpose();
    tr.heads.resize(static_cast<std::size_t>(s.num_heads_total()));

    for (Index l = 0; l < s.layers; ++l) {
        const Matrix& x = tr.residual[static_cast<std::size_t>(l)];
        Matrix next = x;
        for (Index h = 0; h < s.heads; ++h) {
            const auto slot = bb.head_slot(l, h);
            HeadTrace& ht = tr.heads[slot];
            ht.q = x * bb.wq[slot].transpose();
            ht.k = x * bb.wk[slot].transpose();
            ht.v = x * bb.wv[slot].transpose();
            ht.log_beta = Vector::Zero(T);
            if (mode == AttentionMode::kRetained) {
                ht.gate.resize(static_cast<std::size_t>(T));
                for (Index t = 0; t < T; ++t) {
                    ht.gate[static_cast<std::size_t>(t)] =
                        gate_eval(gate_input_of(*gates, tr, ht, l, t), l, h, *gates);
                    ht.log_beta[t] = ht.gate[static_cast<std::size_t>(t)].log_beta;
                }
            }
            ht.alpha = Matrix::Zero(T, T);
            const Matrix z = (ht.q * ht.k.transpose()) * scale;
            for (Index t = 0; t < T; ++t) {
                Vector lw(t + 1);
                for (Index i = 0; i <= t; ++i)
                    lw[i] = static_cast<double>(t - i) * ht.log_beta[i];
                const Vector a = softmax_log_space(z.row(t).head(t + 1).transpose(), lw);
                ht.alpha.row(t).head(t + 1) = a.transpose();
            }
            next += (ht.alpha * ht.v) * bb.wo[slot].transpose();
        }
        tr.residual[static_cast<std::size_t>(l + 1)] = std::move(next);
    }
    tr.logits = tr.residual.back() * bb.unembed.transpose();
    return tr;
}

/// Log betas of a retained-mode trace as an (L*H) x T matrix.
inline Matrix log_beta_matrix(const ForwardTrace& tr) {
    const Index heads = static_cast<Index>(tr.heads.size());
    const Index T = tr.logits.rows();
    Matrix out(heads, T);
    for (Index h = 0; h < heads; ++h) out.row(h) = tr.heads[static_cast<std::size_t>(h)].log_beta.transpose();
    return out;
}

/// Backpropagates d(loss)/d(logits) and d(loss)/d(log beta) through a
/// retained-mode trace; gradients land in `grad` only.
inline void backward_gates(const Backbone& bb, const GateParams& gates, const ForwardTrace& tr,
                           const Matrix& d_logits, const Matrix& d_log_beta, GateParams& grad) {
    const auto& s = bb.shape;
    const Index T = tr.logits.rows();
    require_shape(d_logits.rows() == T && d_logits.cols() == bb.vocab,
                  "backward_gates: d_logits shape mismatch");
    require_shape(d_log_beta.rows() == s.num_heads_total() && d_log_beta.cols() == T,
                  "backward_gates: d_log_beta shape mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));

    Matrix dx = d_logits * bb.unembed;  // gradient w.r.t. residual[L]
    for (Index l = s.layers - 1; l >= 0; --l) {
        Matrix dx_prev = dx;  // residual path
        for (Index h = 0; h < s.heads; ++h) {
            const auto slot = bb.head_slot(l, h);
            const HeadTrace& ht = tr.heads[slot];
            const Matrix d_o = dx * bb.wo[slot];         // T x head_dim
            const Matrix d_alpha = d_o * ht.v.transpose();  // T x T
            Matrix d_v = ht.alpha.transpose() * d_o;
            Matrix d_z = Matrix::Zero(T, T);
            Vector d_lb = d_log_beta.row(static_cast<Index>(slot)).transpose();
            for (Index t = 0; t < T; ++t) {
                double dot = 0.0;
                for (Index i = 0; i <= t; ++i) dot += ht.alpha(t, i) * d_alpha(t, i);
                for (Index i = 0; i <= t; ++i) {
                    const double g = ht.alpha(t, i) * (d_alpha(t, i) - dot);
                    d_z(t, i) = g;
                    d_lb[i] += g * static_cast<double>(t - i);
                }
            }
            const Matrix d_q = (d_z * ht.k) * scale;
            Matrix d_k = (d_z.transpose() * ht.q) * scale;

            for (Index i = 0; i < T; ++i) {
                const auto& act = ht.gate[static_cast<std::size_t>(i)];
                // d log_sigmoid(a) / da = sigmoid(-a) = 1 - beta
                const double d_pre = d_lb[i] * sigmoid(-act.pre);
                if (d_pre == 0.0) continue;
                const Vector d_in =
                    gate_backward(gate_input_of(gates, tr, ht, l, i), l, h, gates, act, d_pre, grad);
                if (gates.input == GateInput::kEmbedding) {
                    dx_prev.row(i) += d_in.transpose();
                } else {
                    d_k.row(i) += d_in.head(s.head_dim).transpose();
                    d_v.row(i) += d_in.tail(s.head_dim).transpose();
                }
            }
            dx_prev += d_q * bb.wq[slot] + d_k * bb.wk[slot] + d_v * bb.wv[slot];
        }
        dx = std::move(dx_prev);
    }
}

}  // namespace retkv
