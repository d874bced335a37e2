// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Dense linear algebra aliases, log-domain softmax, sigmoid helpers and a
// central-difference gradient oracle. Everything is double precision.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace retkv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::ptrdiff_t;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every combined logit was -inf, so no distribution exists.
class EmptySupportError : public Error {
public:
    EmptySupportError() : Error("empty support: every combined logit is -inf") {}
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

inline bool all_finite(const Eigen::Ref<const Vector>& v) { return v.allFinite(); }

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(sigmoid(x)) without overflow or cancellation.
inline double log_sigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

/// Softmax of `logits + log_weights` computed with max subtraction. Entries
/// whose log weight is -inf come out as exactly 0.
inline Vector softmax_log_space(const Eigen::Ref<const Vector>& logits,
                                const Eigen::Ref<const Vector>& log_weights) {
    require_shape(logits.size() == log_weights.size(),
                  "softmax_log_space: logits and log_weights differ in length");
    const Index n = logits.size();
    Vector out(n);
    double mx = kNegInf;
    for (Index i = 0; i < n; ++i) {
        if (log_weights[i] > 0.0 || std::isnan(log_weights[i]))
            throw Error("softmax_log_space: log weight outside [-inf, 0]");
        const double c = logits[i] + log_weights[i];
        out[i] = c;
        if (c > mx) mx = c;
    }
    if (mx == kNegInf) throw EmptySupportError();
    if (!std::isfinite(mx)) throw NonFiniteError("softmax_log_space: non-finite logit");
    double sum = 0.0;
    for (Index i = 0; i < n; ++i) {
        out[i] = (out[i] == kNegInf) ? 0.0 : std::exp(out[i] - mx);
        sum += out[i];
    }
    out /= sum;
    return out;
}

inline Vector softmax(const Eigen::Ref<const Vector>& logits) {
    return softmax_log_space(logits, Vector::Zero(logits.size()));
}

/// log-sum-exp with max subtraction; -inf when every entry is -inf.
inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    const double mx = v.maxCoeff();
    if (mx == kNegInf) return kNegInf;
    return mx + std::log((v.array() - mx).exp().sum());
}

inline constexpr double kDefaultFiniteDiffStep = 1e-5;

/// Central-difference gradient of a scalar function. Test-only oracle.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x,
                               double h = kDefaultFiniteDiffStep) {
    Vector g(x.size());
    Vector probe = x;
    for (Index i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double fp = f(probe);
        probe[i] = x[i] - h;
        const double fm = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFiniteError("finite_diff_grad: non-finite function value");
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace retkv
