// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Token-by-token decoding over a paged cache with optional eviction.
//
// Every step appends the new token's key/value to each (layer, head), attends
// over whatever that head still holds, and then lets the policy compress the
// cache. Attention itself is plain softmax over the surviving entries; the
// gate's beta only feeds the eviction score.

#pragma once

#include "retkv/attention.hpp"
#include "retkv/backbone.hpp"
#include "retkv/eviction.hpp"
#include "retkv/gates.hpp"
#include "retkv/paged_cache.hpp"
#include "retkv/task.hpp"

#include <functional>
#include <vector>

namespace retkv {

/// Called once per (layer, head, step) with the attention logits over the
/// cache as it stood when the query was issued.
using AttentionObserver =
    std::function<void(Index layer, Index head, Index step, const HeadCache&, const Vector& logits)>;

struct EngineConfig {
    PolicyKind policy = PolicyKind::kFullCache;
    EvictionConfig eviction;
    Index page_size = 16;
};

struct DecodeResult {
    std::vector<Index> predictions;  // argmax token per scored position
    Index correct = 0;
    Index scored = 0;
    double mean_retained = 0.0;      // mean total entries held after each step
    Index peak_entries = 0;          // largest total before any compression
    Index peak_pages = 0;
};

class DecodeEngine {
public:
    DecodeEngine(const Backbone& bb, const GateParams* gates, const EngineConfig& cfg)
        : bb_(bb), gates_(gates), cfg_(cfg) {
        const bool needs_beta = cfg.policy == PolicyKind::kGlobalRetention ||
                                cfg.policy == PolicyKind::kPerHeadRetention;
        if (needs_beta && gates == nullptr)
            throw Error("DecodeEngine: retention policies need gate parameters");
        if (gates) {
            const auto& a = gates->shape;
            const auto& b = bb.shape;
            if (a.layers != b.layers || a.heads != b.heads || a.head_dim != b.head_dim ||
                a.d_model != b.d_model)
                throw Error("DecodeEngine: gate shape does not match the backbone");
        }
    }

    DecodeResult run(const Sample& sample, const AttentionObserver& observer = {},
                     std::vector<EvictionAction>* trace = nullptr) const {
        const auto& s = bb_.shape;
        PagedCache cache(PagedCacheConfig{s.layers, s.heads, s.head_dim, cfg_.page_size});
        EvictionPolicy policy(cfg_.policy, cfg_.eviction, s.layers, s.heads);
        DecodeResult res;
        const Index T = static_cast<Index>(sample.tokens.size());
        std::size_t next_scored = 0;
        double retained_sum = 0.0;

        for (Index t = 0; t < T; ++t) {
            Vector x = bb_.input_embedding(sample.tokens[static_cast<std::size_t>(t)], t);
            for (Index l = 0; l < s.layers; ++l) {
                Vector next = x;
                for (Index h = 0; h < s.heads; ++h) {
                    const auto slot = bb_.head_slot(l, h);
                    const Vector q = bb_.wq[slot] * x;
                    CacheEntry e{bb_.wk[slot] * x, bb_.wv[slot] * x, t, 1.0};
                    if (gates_) e.beta = gate_forward(gate_input(x, e), l, h, *gates_);
                    cache.append(l, h, e);
                    const HeadCache hc = cache.gather(l, h);
                    const AttentionResult a = attend_full(q, hc);
                    if (observer) observer(l, h, t, hc, attention_logits(q, hc));
                    next += bb_.wo[slot] * a.output;
                }
                x = std::move(next);
            }
            if (next_scored < sample.scored_positions.size() &&
                sample.scored_positions[next_scored] == t) {
                const Vector logits = bb_.unembed * x;
                Index arg = 0;
                logits.maxCoeff(&arg);
                res.predictions.push_back(arg);
                if (arg == sample.targets[next_scored]) ++res.correct;
                ++res.scored;
                ++next_scored;
            }
            res.peak_entries = std::max(res.peak_entries, cache.total_length());
            res.peak_pages = std::max(res.peak_pages, cache.pages_in_use());

            if (policy.due(t)) {
                std::vector<EntryRef> present;
                for (Index l = 0; l < s.layers; ++l)
                    for (Index h = 0; h < s.heads; ++h)
                        for (const auto& [birth, beta] : cache.entries(l, h))
                            present.push_back(EntryRef{l, h, birth, beta});
                const auto actions = policy.step(present, t);
                std::vector<std::vector<Index>> drop(static_cast<std::size_t>(s.num_heads_total()));
                for (const auto& act : actions)
                    if (act.action == Action::kEvict)
                        drop[static_cast<std::size_t>(s.head_index(act.entry.layer, act.entry.head))]
                            .push_back(act.entry.token_birth);
                for (Index l = 0; l < s.layers; ++l)
                    for (Index h = 0; h < s.heads; ++h)
                        cache.evict(l, h, drop[static_cast<std::size_t>(s.head_index(l, h))]);
                if (trace) trace->insert(trace->end(), actions.begin(), actions.end());
            }
            retained_sum += static_cast<double>(cache.total_length());
        }
        res.mean_retained = T > 0 ? retained_sum / static_cast<double>(T) : 0.0;
        return res;
    }

private:
    Vector gate_input(const Vector& x, const CacheEntry& e) const {
        if (gates_->input == GateInput::kEmbedding) return x;
        Vector in(e.key.size() + e.value.size());
        in << e.key, e.value;
        return in;
    }

    const Backbone& bb_;
    const GateParams* gates_;
    EngineConfig cfg_;
};

struct EvalSummary {
    double accuracy = 0.0;
    double mean_retained = 0.0;
    Index peak_entries = 0;
    Index peak_pages = 0;
    Index samples = 0;
};

inline EvalSummary evaluate_samples(const DecodeEngine& engine, const std::vector<Sample>& samples) {
    EvalSummary out;
    Index correct = 0, scored = 0;
    for (const auto& smp : samples) {
        const DecodeResult r = engine.run(smp);
        correct += r.correct;
        scored += r.scored;
        out.mean_retained += r.mean_retained;
        out.peak_entries = std::max(out.peak_entries, r.peak_entries);
        out.peak_pages = std::max(out.peak_pages, r.peak_pages);
    }
    out.samples = static_cast<Index>(samples.size());
    if (!samples.empty()) out.mean_retained /= static_cast<double>(samples.size());
    out.accuracy = scored > 0 ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
    return out;
}

}  // namespace retkv
