// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

#include "retkv/attention.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace retkv;

namespace {

HeadCache random_cache(Index n, Index d, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    HeadCache c;
    c.keys.resize(n, d);
    c.values.resize(n, d);
    for (Index i = 0; i < n * d; ++i) {
        c.keys.data()[i] = n01(rng);
        c.values.data()[i] = n01(rng);
    }
    Index birth = 0;
    for (Index i = 0; i < n; ++i) {
        birth += 1 + static_cast<Index>(u01(rng) * 3);
        c.births.push_back(birth);
        c.betas.push_back(u01(rng));
    }
    return c;
}

Vector random_query(Index d, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Vector q(d);
    for (Index i = 0; i < d; ++i) q[i] = 2.0 * n01(rng);
    return q;
}

// Weights written out term by term: exp(q.k / sqrt d) * w_i, normalized.
Vector oracle_weights(const Vector& q, const HeadCache& c, const std::vector<double>& w) {
    Vector out(c.size());
    double s = 0.0;
    for (Index i = 0; i < c.size(); ++i) {
        double dot = 0.0;
        for (Index j = 0; j < q.size(); ++j) dot += q[j] * c.keys(i, j);
        out[i] = std::exp(dot / std::sqrt(static_cast<double>(q.size()))) * w[static_cast<std::size_t>(i)];
        s += out[i];
    }
    return out / s;
}

}  // namespace

TEST(Attention, FullMatchesOracle) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        const HeadCache c = random_cache(1 + trial % 20, 8, rng);
        const Vector q = random_query(8, rng);
        const auto r = attend_full(q, c);
        const Vector w = oracle_weights(q, c, std::vector<double>(static_cast<std::size_t>(c.size()), 1.0));
        EXPECT_LE((r.weights - w).cwiseAbs().maxCoeff(), 1e-13);
        EXPECT_LE((r.output - c.values.transpose() * w).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Attention, RetainedMatchesGeometricOracle) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const HeadCache c = random_cache(1 + trial % 20, 6, rng);
        const Vector q = random_query(6, rng);
        const Index step = c.births.back() + trial % 4;
        std::vector<double> w;
        for (Index i = 0; i < c.size(); ++i)
            w.push_back(std::pow(c.betas[static_cast<std::size_t>(i)],
                                 static_cast<double>(step - c.births[static_cast<std::size_t>(i)])));
        if (std::accumulate(w.begin(), w.end(), 0.0) < 1e-200) continue;
        const auto r = attend_retained(q, c, step);
        EXPECT_LE((r.weights - oracle_weights(q, c, w)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Attention, RetainedWithUnitBetaEqualsFull) {
    std::mt19937_64 rng(12);
    HeadCache c = random_cache(15, 4, rng);
    for (auto& b : c.betas) b = 1.0;
    const Vector q = random_query(4, rng);
    const auto a = attend_retained(q, c, c.births.back() + 7);
    const auto b = attend_full(q, c);
    EXPECT_EQ(a.weights, b.weights);
}

TEST(Attention, ZeroBetaKeepsOnlyTheCurrentToken) {
    std::mt19937_64 rng(13);
    HeadCache c = random_cache(6, 4, rng);
    for (auto& b : c.betas) b = 0.0;
    const auto r = attend_retained(random_query(4, rng), c, c.births.back());
    EXPECT_EQ(r.weights[5], 1.0);
    EXPECT_EQ(r.weights.head(5).sum(), 0.0);
}

TEST(Attention, RetentionLogWeightZeroToTheZeroIsOne) {
    EXPECT_EQ(retention_log_weight(0.0, 0), 0.0);
    EXPECT_EQ(retention_log_weight(0.0, 3), kNegInf);
    EXPECT_NEAR(retention_log_weight(0.5, 3), 3.0 * std::log(0.5), 1e-15);
}

TEST(Attention, EvictedIsSoftmaxOverSurvivors) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 30; ++trial) {
        const HeadCache c = random_cache(12, 5, rng);
        const Vector q = random_query(5, rng);
        std::set<Index> keep;
        std::vector<double> w(12, 0.0);
        for (Index i = 0; i < 12; ++i)
            if ((i + trial) % 3 != 0) {
                keep.insert(i);
                w[static_cast<std::size_t>(i)] = 1.0;
            }
        const auto r = attend_evicted(q, c, keep);
        EXPECT_LE((r.weights - oracle_weights(q, c, w)).cwiseAbs().maxCoeff(), 1e-13);
        for (Index i = 0; i < 12; ++i)
            if (!keep.count(i)) {
                EXPECT_EQ(r.weights[i], 0.0);
            }
    }
}

TEST(Attention, DilutionIsMassOutsideUsefulSet) {
    Vector w(4);
    w << 0.1, 0.2, 0.3, 0.4;
    EXPECT_NEAR(dilution(w, {1, 3}), 0.4, 1e-15);
    EXPECT_EQ(dilution(w, {}), 1.0);
    EXPECT_THROW(dilution(w, {7}), Error);
}

// Down-weighting distractors relative to useful tokens never increases dilution.
TEST(Attention, RetentionFavouringUsefulTokensReducesDilution) {
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        HeadCache c = random_cache(20, 4, rng);
        UsefulSet useful{static_cast<Index>(trial % 20), static_cast<Index>((trial * 7 + 3) % 20)};
        for (Index i = 0; i < 20; ++i) c.betas[static_cast<std::size_t>(i)] = useful.count(i) ? 1.0 : u01(rng);
        const Vector q = random_query(4, rng);
        const Index step = c.births.back();
        const double base = dilution(attend_full(q, c).weights, useful);
        const double kept = dilution(attend_retained(q, c, step).weights, useful);
        EXPECT_LE(kept, base + 1e-12);
    }
}

TEST(Attention, ValidationErrors) {
    std::mt19937_64 rng(16);
    HeadCache c = random_cache(3, 2, rng);
    const Vector q = random_query(2, rng);
    HeadCache bad = c;
    bad.births[2] = bad.births[1];
    EXPECT_THROW(attend_full(q, bad), Error);
    bad = c;
    bad.betas[0] = 1.5;
    EXPECT_THROW(attend_full(q, bad), Error);
    EXPECT_THROW(attend_full(random_query(3, rng), c), ShapeError);
    EXPECT_THROW(attend_full(q, HeadCache{Matrix(0, 2), Matrix(0, 2), {}, {}}), Error);
    EXPECT_THROW(attend_retained(q, c, c.births.back() - 1), Error);
    EXPECT_THROW(attend_evicted(q, c, {}), Error);
    EXPECT_THROW(attend_evicted(q, c, {5}), Error);
}
