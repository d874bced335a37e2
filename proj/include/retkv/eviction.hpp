// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Future-utility scoring and budgeted eviction.
//
// A cached token born at step i with retention beta is worth
//
//   G(now) = sum_{s=now+1}^{now+H} beta^(s-i)
//          = beta^(now+1-i) * (1 - beta^H) / (1 - beta)
//
// over a lookahead of H steps. The global policy keeps the M highest-scoring
// entries across every layer and head; there is no per-head quota.

#pragma once

#include "retkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace retkv {

inline constexpr Index kInfiniteHorizon = -1;
inline constexpr Index kDefaultHorizon = 2;

/// Closed-form geometric utility over a finite lookahead. beta = 1 yields the
/// limit `horizon`; the exponent now+1-birth is at least 1.
inline double global_score(double beta, Index birth, Index now, Index horizon) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error("global_score: beta outside [0,1]");
    if (now < birth) throw Error("global_score: now precedes birth");
    if (horizon < 1) throw Error("global_score: horizon must be >= 1");
    if (beta == 1.0) return static_cast<double>(horizon);
    if (beta == 0.0) return 0.0;
    const double lb = std::log(beta);
    const double e = static_cast<double>(now + 1 - birth);
    // (1 - beta^H) / (1 - beta) computed without cancellation for beta near 1.
    const double ratio = std::expm1(static_cast<double>(horizon) * lb) / std::expm1(lb);
    return std::exp(e * lb) * ratio;
}

/// Limit of global_score as the horizon grows without bound; needs beta < 1.
inline double global_score_infinite(double beta, Index birth, Index now) {
    if (!(beta >= 0.0 && beta < 1.0))
        throw Error("global_score_infinite: beta must lie in [0,1) (beta = 1 diverges)");
    if (now < birth) throw Error("global_score_infinite: now precedes birth");
    if (beta == 0.0) return 0.0;
    const double lb = std::log(beta);
    return std::exp(static_cast<double>(now + 1 - birth) * lb) / -std::expm1(lb);
}

enum class TieBreak { kYoungerFirst, kOlderFirst };

struct EvictionConfig {
    Index budget = 1;                 // M_global, total entries over all layers and heads
    Index horizon = kDefaultHorizon;  // kInfiniteHorizon for the limit score
    Index cadence = 1;                // steps between compressions
    TieBreak tie_break = TieBreak::kYoungerFirst;
    Index protected_recent = 0;       // newest tokens per head exempt from ranking; 0 = off

    void validate() const {
        if (budget < 1) throw Error("EvictionConfig: budget must be >= 1");
        if (horizon < 1 && horizon != kInfiniteHorizon)
            throw Error("EvictionConfig: horizon must be >= 1 or infinite");
        if (cadence < 1) throw Error("EvictionConfig: cadence must be >= 1");
        if (protected_recent < 0) throw Error("EvictionConfig: protected_recent must be >= 0");
    }
};

/// One cached token as seen by the policy.
struct EntryRef {
    Index layer = 0;
    Index head = 0;
    Index birth = 0;
    double beta = 1.0;
};

struct EvictionScore {
    Index layer = 0;
    Index head = 0;
    Index token_birth = 0;
    double beta = 1.0;
    double score = 0.0;  // +inf only for beta = 1 under an infinite horizon
};

inline EvictionScore score_entry(const EntryRef& e, Index now, Index horizon) {
    EvictionScore s{e.layer, e.head, e.birth, e.beta, 0.0};
    if (horizon == kInfiniteHorizon)
        s.score = e.beta == 1.0 ? std::numeric_limits<double>::infinity()
                                : global_score_infinite(e.beta, e.birth, now);
    else
        s.score = global_score(e.beta, e.birth, now, horizon);
    return s;
}

/// Strict total order used for ranking: score desc, then age per the tie
/// rule, then (layer, head) ascending.
inline bool ranks_before(const EvictionScore& a, const EvictionScore& b, TieBreak tb) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token_birth != b.token_birth)
        return tb == TieBreak::kYoungerFirst ? a.token_birth > b.token_birth
                                             : a.token_birth < b.token_birth;
    return std::tie(a.layer, a.head) < std::tie(b.layer, b.head);
}

struct Selection {
    std::vector<EvictionScore> retained;  // in rank order
    std::vector<EvictionScore> evicted;
};

/// Keep the `keep` best entries under the ranking order.
inline Selection select_top(std::vector<EvictionScore> scored, Index keep, TieBreak tb) {
    Selection out;
    const auto cmp = [tb](const EvictionScore& a, const EvictionScore& b) {
        return ranks_before(a, b, tb);
    };
    keep = std::clamp<Index>(keep, 0, static_cast<Index>(scored.size()));
    auto mid = scored.begin() + keep;
    if (mid != scored.end()) std::nth_element(scored.begin(), mid, scored.end(), cmp);
    std::sort(scored.begin(), mid, cmp);
    out.retained.assign(scored.begin(), mid);
    out.evicted.assign(mid, scored.end());
    return out;
}

/// Single global top-M over all layers, heads and tokens.
inline Selection evict_global(const std::vector<EntryRef>& entries, const EvictionConfig& cfg,
                              Index now) {
    cfg.validate();
    std::vector<EvictionScore> scored;
    scored.reserve(entries.size());
    for (const auto& e : entries) scored.push_back(score_entry(e, now, cfg.horizon));
    return select_top(std::move(scored), cfg.budget, cfg.tie_break);
}

// ---------------------------------------------------------------------------
// Step policy

enum class PolicyKind { kFullCache, kGlobalRetention, kPerHeadRetention, kRecency };

inline std::string policy_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::kFullCache: return "full_cache";
        case PolicyKind::kGlobalRetention: return "global_retention";
        case PolicyKind::kPerHeadRetention: return "per_head_retention";
        case PolicyKind::kRecency: return "recency";
    }
    return "unknown";
}

inline PolicyKind parse_policy(const std::string& s) {
    for (auto k : {PolicyKind::kFullCache, PolicyKind::kGlobalRetention,
                   PolicyKind::kPerHeadRetention, PolicyKind::kRecency})
        if (policy_name(k) == s) return k;
    throw Error("unknown eviction policy: " + s);
}

enum class Action { kRetain, kEvict };

struct EvictionAction {
    Index step = 0;
    EvictionScore entry;
    Action action = Action::kRetain;
};

inline void write_trace_header(std::ostream& os) {
    os << "step,layer,head,token_birth,score,action\n";
}

inline void write_trace_rows(std::ostream& os, const std::vector<EvictionAction>& actions) {
    for (const auto& a : actions)
        os << a.step << ',' << a.entry.layer << ',' << a.entry.head << ',' << a.entry.token_birth
           << ',' << a.entry.score << ',' << (a.action == Action::kRetain ? "retain" : "evict")
           << '\n';
}

/// Stateful compression schedule for one decoding run.
///
/// Compression runs after steps where (now + 1) % cadence == 0. Tokens born
/// after the previous compression are exempt from the current one, so every
/// token is visible to at least one decoding step after its own. The budget
/// for ranked entries shrinks by the number of exempt ones, keeping the total
/// at or below M after every compression. Evicted entries are remembered and
/// their reappearance is treated as a bug.
class EvictionPolicy {
public:
    EvictionPolicy(PolicyKind kind, const EvictionConfig& cfg, Index layers, Index heads)
        : kind_(kind), cfg_(cfg), layers_(layers), heads_(heads) {
        cfg.validate();
        if (kind != PolicyKind::kFullCache) {
            const Index fresh_max = cfg.cadence + cfg.protected_recent;
            if (kind == PolicyKind::kGlobalRetention) {
                if (cfg.budget < fresh_max * layers * heads)
                    throw Error("EvictionPolicy: budget smaller than the exempt entries of one window");
            } else if (per_head_budget() < fresh_max) {
                throw Error("EvictionPolicy: per-head budget smaller than one compression window");
            }
        }
    }

    PolicyKind kind() const { return kind_; }
    const EvictionConfig& config() const { return cfg_; }
    Index per_head_budget() const { return cfg_.budget / (layers_ * heads_); }

    bool due(Index now) const {
        return kind_ != PolicyKind::kFullCache && (now + 1) % cfg_.cadence == 0;
    }

    /// Decide which of the `present` entries to evict after step `now`.
    /// Returns one action per present entry.
    std::vector<EvictionAction> step(const std::vector<EntryRef>& present, Index now) {
        std::vector<EvictionAction> actions;
        if (!due(now)) return actions;
        for (const auto& e : present)
            if (evicted_.count(key(e.layer, e.head, e.birth)))
                throw Error("EvictionPolicy: an evicted entry re-entered the cache");

        std::vector<EvictionScore> fresh, old;
        for (const auto& e : present) {
            const bool exempt = e.birth > last_compression_ || e.birth > now - cfg_.protected_recent;
            (exempt ? fresh : old).push_back(score_for(e, now));
        }
        auto mark = [&](const std::vector<EvictionScore>& v, Action a) {
            for (const auto& s : v) {
                actions.push_back({now, s, a});
                if (a == Action::kEvict) evicted_.insert(key(s.layer, s.head, s.token_birth));
            }
        };
        mark(fresh, Action::kRetain);

        if (kind_ == PolicyKind::kGlobalRetention) {
            const Index keep = cfg_.budget - static_cast<Index>(fresh.size());
            Selection sel = select_top(std::move(old), keep, cfg_.tie_break);
            mark(sel.retained, Action::kRetain);
            mark(sel.evicted, Action::kEvict);
        } else {
            const Index m = per_head_budget();
            for (Index l = 0; l < layers_; ++l)
                for (Index h = 0; h < heads_; ++h) {
                    std::vector<EvictionScore> mine;
                    Index fresh_here = 0;
                    for (const auto& s : fresh)
                        if (s.layer == l && s.head == h) ++fresh_here;
                    for (const auto& s : old)
                        if (s.layer == l && s.head == h) mine.push_back(s);
                    Selection sel = select_top(std::move(mine), m - fresh_here, cfg_.tie_break);
                    mark(sel.retained, Action::kRetain);
                    mark(sel.evicted, Action::kEvict);
                }
        }
        last_compression_ = now;
        return actions;
    }

    Index evicted_count() const { return static_cast<Index>(evicted_.size()); }

private:
    EvictionScore score_for(const EntryRef& e, Index now) const {
        if (kind_ == PolicyKind::kRecency) {
            // Newest first: the birth step itself is the score.
            return EvictionScore{e.layer, e.head, e.birth, e.beta, static_cast<double>(e.birth)};
        }
        return score_entry(e, now, cfg_.horizon);
    }

    static std::tuple<Index, Index, Index> key(Index l, Index h, Index b) { return {l, h, b}; }

    PolicyKind kind_;
    EvictionConfig cfg_;
    Index layers_;
    Index heads_;
    Index last_compression_ = -1;
    std::set<std::tuple<Index, Index, Index>> evicted_;
};

}  // namespace retkv
