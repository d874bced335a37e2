// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Single-head attention over a cache: full softmax, hard-evicted subsets and
// geometric retention weighting, plus the dilution metric.

#pragma once

#include "retkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

namespace retkv {

/// Cached keys/values of one head. Row j of `keys`/`values` belongs to the
/// token born at `births[j]`; births are strictly increasing.
struct HeadCache {
    Matrix keys;    // n x d
    Matrix values;  // n x d
    std::vector<Index> births;
    std::vector<double> betas;

    Index size() const { return static_cast<Index>(births.size()); }
    Index dim() const { return keys.cols(); }
    bool empty() const { return births.empty(); }

    void validate() const {
        const auto n = size();
        require_shape(keys.rows() == n && values.rows() == n &&
                          static_cast<Index>(betas.size()) == n,
                      "HeadCache: keys, values, births and betas differ in length");
        require_shape(keys.cols() == values.cols(), "HeadCache: key and value widths differ");
        for (Index j = 1; j < n; ++j)
            if (births[j] <= births[j - 1]) throw Error("HeadCache: births not strictly increasing");
        for (double b : betas)
            if (!(b >= 0.0 && b <= 1.0)) throw Error("HeadCache: beta outside [0,1]");
    }
};

struct AttentionResult {
    Vector output;
    Vector weights;
};

/// Indices into a cache that are useful for the current prediction.
using UsefulSet = std::set<Index>;

/// Scaled dot-product logits q.k_i / sqrt(d).
inline Vector attention_logits(const Eigen::Ref<const Vector>& q, const HeadCache& cache) {
    require_shape(q.size() == cache.dim(), "attention: query width does not match cache");
    return (cache.keys * q) / std::sqrt(static_cast<double>(q.size()));
}

/// log(beta^age) with 0^0 = 1: the newest token always participates.
inline double retention_log_weight(double beta, Index age) {
    if (age == 0) return 0.0;
    if (beta <= 0.0) return kNegInf;
    return static_cast<double>(age) * std::log(beta);
}

namespace detail {

inline AttentionResult attend_weighted(const Eigen::Ref<const Vector>& q, const HeadCache& cache,
                                       const Vector& log_weights) {
    if (cache.empty()) throw Error("attention: empty cache");
    cache.validate();
    AttentionResult r;
    r.weights = softmax_log_space(attention_logits(q, cache), log_weights);
    r.output = cache.values.transpose() * r.weights;
    return r;
}

}  // namespace detail

inline AttentionResult attend_full(const Eigen::Ref<const Vector>& q, const HeadCache& cache) {
    return detail::attend_weighted(q, cache, Vector::Zero(cache.size()));
}

/// Retention-gated attention at decoding step `step`: entry j is weighted by
/// beta_j^(step - birth_j).
inline AttentionResult attend_retained(const Eigen::Ref<const Vector>& q, const HeadCache& cache,
                                       Index step) {
    Vector lw(cache.size());
    for (Index j = 0; j < cache.size(); ++j) {
        const Index age = step - cache.births[j];
        if (age < 0) throw Error("attend_retained: step precedes a birth step");
        lw[j] = retention_log_weight(cache.betas[j], age);
    }
    return detail::attend_weighted(q, cache, lw);
}

/// Attention restricted to `retained` cache rows.
inline AttentionResult attend_evicted(const Eigen::Ref<const Vector>& q, const HeadCache& cache,
                                      const std::set<Index>& retained) {
    if (retained.empty()) throw Error("attend_evicted: retained set is empty");
    Vector lw = Vector::Constant(cache.size(), kNegInf);
    for (Index j : retained) {
        if (j < 0 || j >= cache.size()) throw Error("attend_evicted: retained index out of range");
        lw[j] = 0.0;
    }
    return detail::attend_weighted(q, cache, lw);
}

/// Fraction of attention mass outside `useful`. An empty useful set gives 1.
inline double dilution(const Eigen::Ref<const Vector>& weights, const UsefulSet& useful) {
    double mass = 0.0;
    for (Index i : useful) {
        if (i < 0 || i >= weights.size()) throw Error("dilution: useful index out of range");
        mass += weights[i];
    }
    return std::clamp(1.0 - mass, 0.0, 1.0);
}

}  // namespace retkv
