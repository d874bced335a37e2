// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

#include "retkv/eviction.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>

using namespace retkv;

namespace {

// sum_{k=1..H} beta^(now - birth + k), term by term
double score_oracle(double beta, Index birth, Index now, Index horizon) {
    long double s = 0.0L;
    for (Index k = 1; k <= horizon; ++k) s += std::pow(static_cast<long double>(beta), now - birth + k);
    return static_cast<double>(s);
}

std::vector<EntryRef> random_entries(Index n, Index now, std::mt19937_64& rng, bool coarse) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<Index> age(0, std::max<Index>(50, n));
    std::vector<EntryRef> out;
    std::map<std::tuple<Index, Index>, std::set<Index>> used;
    while (static_cast<Index>(out.size()) < n) {
        EntryRef e{static_cast<Index>(u01(rng) * 3), static_cast<Index>(u01(rng) * 4), now - age(rng), 0.0};
        auto& births = used[{e.layer, e.head}];
        if (!births.insert(e.birth).second) continue;
        // coarse betas create many exact score ties
        e.beta = coarse ? std::round(u01(rng) * 4.0) / 4.0 : u01(rng);
        out.push_back(e);
    }
    return out;
}

}  // namespace

TEST(GlobalScore, ClosedFormMatchesSummationOnGrid) {
    const std::vector<double> betas = {0.0, 1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 0.99, 0.999999, 1.0 - 1e-12, 1.0};
    double worst = 0.0;
    for (double b : betas)
        for (Index age = 0; age <= 300; age += (age < 10 ? 1 : 37))
            for (Index h : {1, 2, 3, 8, 64, 1000}) {
                const double got = global_score(b, 100, 100 + age, h);
                const double want = score_oracle(b, 100, 100 + age, h);
                worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
            }
    EXPECT_LT(worst, 1e-10);
}

TEST(GlobalScore, Limits) {
    EXPECT_EQ(global_score(1.0, 3, 10, 2), 2.0);
    EXPECT_EQ(global_score(0.0, 3, 10, 2), 0.0);
    EXPECT_NEAR(global_score(0.5, 0, 0, 2), 0.5 + 0.25, 1e-15);
    EXPECT_NEAR(global_score_infinite(0.5, 0, 0), 1.0, 1e-15);
    EXPECT_NEAR(global_score_infinite(0.9, 0, 5), std::pow(0.9, 6) / 0.1, 1e-12);
    EXPECT_NEAR(global_score(0.9, 0, 5, 100000), global_score_infinite(0.9, 0, 5), 1e-12);
    EXPECT_THROW(global_score(1.2, 0, 0, 2), Error);
    EXPECT_THROW(global_score(0.5, 5, 4, 2), Error);
    EXPECT_THROW(global_score(0.5, 0, 4, 0), Error);
}

TEST(GlobalScore, MonotoneInBetaAndAge) {
    for (double b = 0.05; b < 1.0; b += 0.05) {
        EXPECT_LT(global_score(b, 0, 10, 2), global_score(b + 0.04, 0, 10, 2));
        EXPECT_GT(global_score(b, 5, 10, 2), global_score(b, 4, 10, 2));
    }
}

TEST(EvictGlobal, EqualsBruteForceSort) {
    std::mt19937_64 rng(21);
    const Index sizes[] = {1, 2, 10, 100, 1000, 10000, 100000};
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = sizes[trial % 7] == 100000 && trial >= 7 ? 3000 : sizes[trial % 7];
        const Index now = 200000;
        const auto entries = random_entries(n, now, rng, trial % 2 == 0);
        EvictionConfig cfg;
        cfg.budget = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(n + 5));
        cfg.tie_break = trial % 3 == 0 ? TieBreak::kOlderFirst : TieBreak::kYoungerFirst;
        const Selection sel = evict_global(entries, cfg, now);

        std::vector<EvictionScore> all;
        for (const auto& e : entries) all.push_back(score_entry(e, now, cfg.horizon));
        std::sort(all.begin(), all.end(),
                  [&](const auto& a, const auto& b) { return ranks_before(a, b, cfg.tie_break); });
        const auto keep = static_cast<std::size_t>(std::min<Index>(cfg.budget, n));
        ASSERT_EQ(sel.retained.size(), keep);
        ASSERT_EQ(sel.evicted.size(), entries.size() - keep);
        for (std::size_t i = 0; i < keep; ++i) {
            EXPECT_EQ(sel.retained[i].token_birth, all[i].token_birth);
            EXPECT_EQ(sel.retained[i].layer, all[i].layer);
            EXPECT_EQ(sel.retained[i].head, all[i].head);
        }
    }
}

TEST(EvictGlobal, YoungerWinsTiesByDefault) {
    std::vector<EntryRef> e = {{0, 0, 5, 1.0}, {0, 0, 9, 1.0}, {0, 1, 7, 1.0}};
    EvictionConfig cfg;
    cfg.budget = 1;
    EXPECT_EQ(evict_global(e, cfg, 10).retained[0].token_birth, 9);
    cfg.tie_break = TieBreak::kOlderFirst;
    EXPECT_EQ(evict_global(e, cfg, 10).retained[0].token_birth, 5);
}

TEST(Policy, NamesRoundTrip) {
    for (auto k : {PolicyKind::kFullCache, PolicyKind::kGlobalRetention, PolicyKind::kPerHeadRetention,
                   PolicyKind::kRecency})
        EXPECT_EQ(parse_policy(policy_name(k)), k);
    EXPECT_THROW(parse_policy("lru"), Error);
}

// Simulated decoding: every step adds one entry per head, the policy runs,
// evicted entries are dropped. Checks the budget and that nothing returns.
class PolicyTrajectory : public ::testing::TestWithParam<std::tuple<PolicyKind, Index>> {};

TEST_P(PolicyTrajectory, BudgetHoldsAndEvictionIsMonotone) {
    const auto [kind, cadence] = GetParam();
    const Index L = 2, H = 2;
    EvictionConfig cfg;
    cfg.budget = 40;
    cfg.cadence = cadence;
    EvictionPolicy pol(kind, cfg, L, H);
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<EntryRef> live;
    std::set<std::tuple<Index, Index, Index>> gone;
    for (Index t = 0; t < 1000; ++t) {
        for (Index l = 0; l < L; ++l)
            for (Index h = 0; h < H; ++h) live.push_back({l, h, t, u01(rng)});
        const auto acts = pol.step(live, t);
        if (!pol.due(t)) {
            EXPECT_TRUE(acts.empty());
            continue;
        }
        ASSERT_EQ(acts.size(), live.size());
        std::vector<EntryRef> next;
        for (const auto& a : acts) {
            if (a.action == Action::kEvict) {
                EXPECT_LT(a.entry.token_birth, t - cadence + 1) << "fresh entry evicted";
                EXPECT_TRUE(gone.insert({a.entry.layer, a.entry.head, a.entry.token_birth}).second);
            } else {
                next.push_back({a.entry.layer, a.entry.head, a.entry.token_birth, a.entry.beta});
                EXPECT_FALSE(gone.count({a.entry.layer, a.entry.head, a.entry.token_birth}));
            }
        }
        live = std::move(next);
        EXPECT_LE(static_cast<Index>(live.size()), cfg.budget);
        if (kind == PolicyKind::kPerHeadRetention || kind == PolicyKind::kRecency) {
            for (Index l = 0; l < L; ++l)
                for (Index h = 0; h < H; ++h) {
                    EXPECT_LE(std::count_if(live.begin(), live.end(),
                                            [&](const EntryRef& e) { return e.layer == l && e.head == h; }),
                              cfg.budget / (L * H));
                }
        }
    }
    EXPECT_EQ(pol.evicted_count(), static_cast<Index>(gone.size()));
}

INSTANTIATE_TEST_SUITE_P(Kinds, PolicyTrajectory,
                         ::testing::Combine(::testing::Values(PolicyKind::kGlobalRetention,
                                                              PolicyKind::kPerHeadRetention,
                                                              PolicyKind::kRecency),
                                            ::testing::Values(Index{1}, Index{4})));

TEST(Policy, ReadmissionIsRejected) {
    EvictionConfig cfg;
    cfg.budget = 4;
    EvictionPolicy pol(PolicyKind::kGlobalRetention, cfg, 1, 1);
    std::vector<EntryRef> live;
    std::vector<EvictionAction> acts;
    for (Index t = 0; t < 6; ++t) {
        live.push_back({0, 0, t, 0.5});
        acts = pol.step(live, t);
        live.clear();
        for (const auto& a : acts)
            if (a.action == Action::kRetain) live.push_back({0, 0, a.entry.token_birth, a.entry.beta});
    }
    ASSERT_GT(pol.evicted_count(), 0);
    Index victim = -1;
    for (const auto& a : acts)
        if (a.action == Action::kEvict) victim = a.entry.token_birth;
    ASSERT_GE(victim, 0);
    live.push_back({0, 0, victim, 0.5});
    EXPECT_THROW(pol.step(live, 6), Error);
}

TEST(Policy, RecencyKeepsNewest) {
    EvictionConfig cfg;
    cfg.budget = 3;
    EvictionPolicy pol(PolicyKind::kRecency, cfg, 1, 1);
    std::vector<EntryRef> live;
    for (Index t = 0; t < 10; ++t) {
        live.push_back({0, 0, t, 0.99});
        std::vector<EntryRef> next;
        for (const auto& a : pol.step(live, t))
            if (a.action == Action::kRetain) next.push_back({0, 0, a.entry.token_birth, a.entry.beta});
        live = next;
    }
    std::set<Index> births;
    for (const auto& e : live) births.insert(e.birth);
    EXPECT_EQ(births, (std::set<Index>{7, 8, 9}));
}

TEST(Policy, GlobalBudgetFlowsToHighRetentionHead) {
    EvictionConfig cfg;
    cfg.budget = 20;
    EvictionPolicy pol(PolicyKind::kGlobalRetention, cfg, 1, 2);
    std::vector<EntryRef> live;
    for (Index t = 0; t < 50; ++t) {
        live.push_back({0, 0, t, 0.999});
        live.push_back({0, 1, t, 0.1});
        std::vector<EntryRef> next;
        for (const auto& a : pol.step(live, t))
            if (a.action == Action::kRetain) next.push_back({0, a.entry.head, a.entry.token_birth, a.entry.beta});
        live = next;
    }
    const auto head0 = std::count_if(live.begin(), live.end(), [](const EntryRef& e) { return e.head == 0; });
    EXPECT_EQ(head0, 19);  // the low-retention head keeps only its fresh entry
}

TEST(Policy, RejectsBudgetBelowExemptWindow) {
    EvictionConfig cfg;
    cfg.budget = 3;
    EXPECT_THROW(EvictionPolicy(PolicyKind::kGlobalRetention, cfg, 2, 2), Error);
    cfg.budget = 4;
    cfg.cadence = 2;
    EXPECT_THROW(EvictionPolicy(PolicyKind::kPerHeadRetention, cfg, 2, 2), Error);
    EXPECT_NO_THROW(EvictionPolicy(PolicyKind::kFullCache, cfg, 2, 2));
    cfg.cadence = 0;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(Policy, TraceCsv) {
    std::ostringstream os;
    write_trace_header(os);
    write_trace_rows(os, {{3, {0, 1, 2, 0.5, 0.75}, Action::kEvict}});
    EXPECT_EQ(os.str(), "step,layer,head,token_birth,score,action\n3,0,1,2,0.75,evict\n");
}
