// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

#include "retkv/numerics.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace retkv;

namespace {

// Long double reference without max subtraction; only valid for small logits.
Vector naive_softmax(const Vector& z, const Vector& lw) {
    long double sum = 0.0L;
    std::vector<long double> e(static_cast<std::size_t>(z.size()));
    for (Index i = 0; i < z.size(); ++i) {
        e[static_cast<std::size_t>(i)] = std::exp(static_cast<long double>(z[i]) + lw[i]);
        sum += e[static_cast<std::size_t>(i)];
    }
    Vector out(z.size());
    for (Index i = 0; i < z.size(); ++i) out[i] = static_cast<double>(e[static_cast<std::size_t>(i)] / sum);
    return out;
}

}  // namespace

TEST(Softmax, MatchesNaiveReferenceOnSmallLogits) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Index n = 1 + trial % 40;
        Vector z(n), lw(n);
        for (Index i = 0; i < n; ++i) {
            z[i] = 3.0 * n01(rng);
            lw[i] = std::log(0.05 + u01(rng) * 0.95);
        }
        const Vector got = softmax_log_space(z, lw);
        const Vector want = naive_softmax(z, lw);
        for (Index i = 0; i < n; ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
    }
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 200; ++trial) {
        Vector z(17);
        for (Index i = 0; i < z.size(); ++i) z[i] = 10.0 * n01(rng);
        const double shift = 500.0 * n01(rng);
        const Vector a = softmax(z);
        const Vector b = softmax((z.array() + shift).matrix());
        EXPECT_NEAR(a.sum(), 1.0, 1e-14);
        EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_GE(a.minCoeff(), 0.0);
    }
}

TEST(Softmax, HugeLogitsDoNotOverflow) {
    Vector z(2);
    z << 1000.0, 1001.0;
    const Vector p = softmax(z);
    EXPECT_NEAR(p[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    EXPECT_TRUE(p.allFinite());
}

TEST(Softmax, NegInfLogWeightGivesExactZero) {
    Vector z(3), lw(3);
    z << 0.0, 50.0, 1.0;
    lw << 0.0, kNegInf, 0.0;
    const Vector p = softmax_log_space(z, lw);
    EXPECT_EQ(p[1], 0.0);
    EXPECT_NEAR(p[0] + p[2], 1.0, 1e-15);
}

TEST(Softmax, EmptySupportThrows) {
    Vector z = Vector::Zero(3);
    Vector lw = Vector::Constant(3, kNegInf);
    EXPECT_THROW(softmax_log_space(z, lw), EmptySupportError);
}

TEST(Softmax, RejectsPositiveOrNanLogWeight) {
    Vector z = Vector::Zero(2);
    Vector lw(2);
    lw << 0.1, 0.0;
    EXPECT_THROW(softmax_log_space(z, lw), Error);
    lw << std::nan(""), 0.0;
    EXPECT_THROW(softmax_log_space(z, lw), Error);
}

TEST(Softmax, LengthMismatchThrows) {
    EXPECT_THROW(softmax_log_space(Vector::Zero(2), Vector::Zero(3)), ShapeError);
}

TEST(Softmax, NonFiniteLogitThrows) {
    Vector z(2);
    z << std::numeric_limits<double>::infinity(), 0.0;
    EXPECT_THROW(softmax(z), NonFiniteError);
}

TEST(LogSigmoid, MatchesDirectFormInSafeRange) {
    for (double x = -30.0; x <= 30.0; x += 0.37) {
        EXPECT_NEAR(log_sigmoid(x), std::log(sigmoid(x)), 1e-13);
        EXPECT_NEAR(sigmoid(x), 1.0 / (1.0 + std::exp(-x)), 1e-15);
    }
}

TEST(LogSigmoid, ExtremeArgumentsStayFinite) {
    EXPECT_NEAR(log_sigmoid(-800.0), -800.0, 1e-12);
    EXPECT_EQ(log_sigmoid(800.0), -0.0);
    EXPECT_NEAR(log_sigmoid(18.0), -std::log1p(std::exp(-18.0)), 1e-22);
    EXPECT_EQ(sigmoid(-800.0), 0.0);
    EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(LogSumExp, MatchesLongDoubleReference) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 100; ++trial) {
        Vector v(9);
        long double s = 0.0L;
        for (Index i = 0; i < v.size(); ++i) {
            v[i] = 5.0 * n01(rng);
            s += std::exp(static_cast<long double>(v[i]));
        }
        EXPECT_NEAR(log_sum_exp(v), static_cast<double>(std::log(s)), 1e-13);
    }
    EXPECT_EQ(log_sum_exp(Vector::Constant(3, kNegInf)), kNegInf);
    Vector big(2);
    big << 1e4, 1e4;
    EXPECT_NEAR(log_sum_exp(big), 1e4 + std::log(2.0), 1e-9);
}

TEST(FiniteDiff, ExactOnQuadratic) {
    Matrix a(3, 3);
    a << 2, 1, 0, 1, 3, 1, 0, 1, 4;
    auto f = [&](const Vector& x) { return 0.5 * x.dot(a * x); };
    Vector x(3);
    x << 0.3, -1.2, 2.0;
    const Vector g = finite_diff_grad(f, x);
    EXPECT_LE((g - a * x).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FiniteDiff, NonFiniteValueThrows) {
    auto f = [](const Vector& x) { return x[0] > 0.0 ? std::log(-1.0) : 0.0; };
    EXPECT_THROW(finite_diff_grad(f, Vector::Zero(1)), NonFiniteError);
}
