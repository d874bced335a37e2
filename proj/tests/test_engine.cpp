// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

#include "retkv/engine.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace retkv;

class NeedleTask : public ::testing::Test {
protected:
    TaskSpec task;
    Backbone bb = build_needle_circuit(task, CircuitSpec{});
};

TEST_F(NeedleTask, SamplesAreWellFormedAndAnswerable) {
    const auto samples = generate_samples(task, 100, 9);
    for (const auto& s : samples) {
        ASSERT_EQ(static_cast<Index>(s.tokens.size()), task.sequence_length());
        ASSERT_EQ(static_cast<Index>(s.value_positions.size()), task.num_keys);
        ASSERT_EQ(static_cast<Index>(s.decoy_positions.size()), task.num_distractors);
        ASSERT_EQ(static_cast<Index>(s.scored_positions.size()), task.num_queries);
        for (Index t : s.tokens) ASSERT_TRUE(t >= 0 && t < task.vocab());
        // each value follows its key; the query's answer is that value
        for (std::size_t q = 0; q < s.scored_positions.size(); ++q) {
            const Index key = s.tokens[static_cast<std::size_t>(s.scored_positions[q])];
            ASSERT_LT(key, task.key_alphabet);
            Index found = -1;
            for (Index p : s.value_positions)
                if (s.tokens[static_cast<std::size_t>(p - 1)] == task.key_token(key))
                    found = s.tokens[static_cast<std::size_t>(p)];
            EXPECT_EQ(found, s.targets[q]);
        }
    }
    EXPECT_GE(task.distractor_ratio(), 4.0);
}

TEST_F(NeedleTask, GenerationIsDeterministic) {
    const auto a = generate_samples(task, 5, 3);
    const auto b = generate_samples(task, 5, 3);
    const auto c = generate_samples(task, 5, 4);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_NE(a[0].tokens, c[0].tokens);
}

TEST_F(NeedleTask, NeedlePositionsCoverTheContext) {
    std::vector<int> hits(static_cast<std::size_t>(task.context_length), 0);
    for (const auto& s : generate_samples(task, 400, 5))
        for (Index p : s.value_positions) ++hits[static_cast<std::size_t>(p)];
    Index first_half = 0, second_half = 0;
    for (Index p = 0; p < task.context_length; ++p)
        (p < task.context_length / 2 ? first_half : second_half) += hits[static_cast<std::size_t>(p)];
    EXPECT_GT(first_half, 1200);
    EXPECT_GT(second_half, 1200);
}

TEST(TaskSpecValidation, RejectsImpossibleLayouts) {
    TaskSpec t;
    t.num_keys = 9;
    EXPECT_THROW(t.validate(), Error);
    t = TaskSpec{};
    t.num_queries = 9;
    EXPECT_THROW(t.validate(), Error);
    t = TaskSpec{};
    t.num_distractors = 200;
    EXPECT_THROW(t.validate(), Error);
}

// Full-cache decoding is the batch forward pass computed one token at a time.
TEST_F(NeedleTask, FullCacheDecodeMatchesBatchForward) {
    const DecodeEngine engine(bb, nullptr, EngineConfig{});
    for (const auto& s : generate_samples(task, 10, 7)) {
        const DecodeResult r = engine.run(s);
        const ForwardTrace tr = forward(bb, s.tokens, AttentionMode::kFull);
        for (std::size_t q = 0; q < s.scored_positions.size(); ++q) {
            Index arg = 0;
            tr.logits.row(s.scored_positions[q]).maxCoeff(&arg);
            EXPECT_EQ(r.predictions[q], arg);
        }
        EXPECT_EQ(r.peak_entries, bb.shape.num_heads_total() * task.sequence_length());
    }
}

TEST_F(NeedleTask, CircuitSolvesTheTaskWithFullCache) {
    const DecodeEngine engine(bb, nullptr, EngineConfig{});
    const EvalSummary e = evaluate_samples(engine, generate_samples(task, 100, 8));
    EXPECT_GT(e.accuracy, 0.7);
}

TEST_F(NeedleTask, ObserverSeesCacheAndLogits) {
    const DecodeEngine engine(bb, nullptr, EngineConfig{});
    const Sample s = generate_samples(task, 1, 2)[0];
    Index calls = 0;
    engine.run(s, [&](Index l, Index h, Index step, const HeadCache& hc, const Vector& logits) {
        ++calls;
        EXPECT_EQ(hc.size(), step + 1);
        EXPECT_EQ(logits.size(), hc.size());
        EXPECT_TRUE(l >= 0 && l < 2 && h >= 0 && h < 2);
    });
    EXPECT_EQ(calls, 4 * task.sequence_length());
}

TEST_F(NeedleTask, GenerousBudgetEqualsFullCache) {
    const GateParams g = GateParams::init(bb.shape, GateInput::kEmbedding, true, 1, 0.0, 1.0);
    const auto samples = generate_samples(task, 20, 11);
    const EvalSummary full = evaluate_samples(DecodeEngine(bb, nullptr, EngineConfig{}), samples);
    for (PolicyKind k : {PolicyKind::kGlobalRetention, PolicyKind::kPerHeadRetention, PolicyKind::kRecency}) {
        EngineConfig ec;
        ec.policy = k;
        ec.eviction.budget = 4 * task.sequence_length();
        const EvalSummary e = evaluate_samples(DecodeEngine(bb, &g, ec), samples);
        EXPECT_EQ(e.accuracy, full.accuracy) << policy_name(k);
        EXPECT_EQ(e.peak_entries, full.peak_entries);
    }
}

TEST_F(NeedleTask, RetainedEntriesNeverExceedBudget) {
    const GateParams g = GateParams::init(bb.shape, GateInput::kKeyValue, false, 2, 0.5, 1.0);
    const Sample s = generate_samples(task, 1, 12)[0];
    for (Index budget : {8, 33, 100}) {
        EngineConfig ec;
        ec.policy = PolicyKind::kGlobalRetention;
        ec.eviction.budget = budget;
        std::vector<EvictionAction> trace;
        const DecodeResult r = DecodeEngine(bb, &g, ec).run(s, {}, &trace);
        std::map<Index, Index> kept;
        for (const auto& a : trace)
            if (a.action == Action::kRetain) ++kept[a.step];
        ASSERT_EQ(static_cast<Index>(kept.size()), task.sequence_length());
        for (const auto& [step, n] : kept) EXPECT_LE(n, budget);
        EXPECT_LE(r.mean_retained, static_cast<double>(budget));
        EXPECT_LE(r.peak_entries, budget + 4);
    }
}

TEST_F(NeedleTask, RetentionPoliciesNeedGates) {
    EngineConfig ec;
    ec.policy = PolicyKind::kGlobalRetention;
    ec.eviction.budget = 40;
    EXPECT_THROW(DecodeEngine(bb, nullptr, ec), Error);
    ec.policy = PolicyKind::kRecency;
    EXPECT_NO_THROW(DecodeEngine(bb, nullptr, ec));
}

TEST_F(NeedleTask, GateShapeMismatchIsRejected) {
    ModelShape other = bb.shape;
    other.d_model = 32;
    const GateParams g = GateParams::init(other, GateInput::kEmbedding, true, 1);
    EngineConfig ec;
    EXPECT_THROW(DecodeEngine(bb, &g, ec), Error);
}

// With the default bias the gated student reproduces full attention.
TEST(Initialization, RetentionAttentionMatchesFullAtInit) {
    ModelShape sh;
    sh.seq_len = 128;
    const Backbone bb = Backbone::random(sh, 40, 128, 17);
    std::mt19937_64 rng(18);
    std::uniform_int_distribution<Index> tok(0, 39);
    for (bool tied : {true, false}) {
        const GateParams g = GateParams::init(sh, GateInput::kEmbedding, tied, 19);
        std::vector<Index> tokens(128);
        for (auto& t : tokens) t = tok(rng);
        const ForwardTrace full = forward(bb, tokens, AttentionMode::kFull);
        const ForwardTrace ret = forward(bb, tokens, AttentionMode::kRetained, &g);
        double worst = 0.0;
        for (std::size_t h = 0; h < full.heads.size(); ++h)
            for (Index t = 0; t < 128; ++t)
                worst = std::max(worst,
                                 0.5 * (full.heads[h].alpha.row(t) - ret.heads[h].alpha.row(t)).cwiseAbs().sum());
        EXPECT_LT(worst, 1e-3);
    }
}
