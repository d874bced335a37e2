// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-key / multi-query needle retrieval task and a hand-wired
// two-layer induction circuit that solves it.
//
// A context of `context_length` tokens holds `num_keys` adjacent (key, value)
// needles at random positions, `num_distractors` decoy tokens and filler
// tokens everywhere else. `num_queries` distinct inserted keys follow the
// context; at each query position the target is the value paired with the
// queried key.
//
// Vocabulary layout:
//   [0, K)            keys
//   [K, K+V)          values
//   [K+V, K+V+F)      fillers
//   [K+V+F, 2K+V+F)   decoys, one per key
//
// Decoy k partially matches a query for key k and pushes the answer toward
// a fixed wrong value, so many decoys dilute the retrieval head's attention.

#pragma once

#include "retkv/backbone.hpp"
#include "retkv/gates.hpp"
#include "retkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace retkv {

struct TaskSpec {
    Index context_length = 128;
    Index num_keys = 8;
    Index num_queries = 4;
    Index num_distractors = 24;
    Index key_alphabet = 8;
    Index value_alphabet = 8;
    Index filler_alphabet = 8;

    Index vocab() const { return 2 * key_alphabet + value_alphabet + filler_alphabet; }
    Index sequence_length() const { return context_length + num_queries; }
    Index key_token(Index k) const { return k; }
    Index value_token(Index v) const { return key_alphabet + v; }
    Index filler_token(Index f) const { return key_alphabet + value_alphabet + f; }
    Index decoy_token(Index k) const { return key_alphabet + value_alphabet + filler_alphabet + k; }

    /// Distractor tokens (fillers and decoys) per needle token.
    double distractor_ratio() const {
        return static_cast<double>(context_length - 2 * num_keys) / static_cast<double>(2 * num_keys);
    }

    void validate() const {
        if (context_length <= 0 || num_keys <= 0 || num_queries <= 0 || num_distractors < 0 ||
            key_alphabet <= 0 || value_alphabet <= 0 || filler_alphabet <= 0)
            throw Error("TaskSpec: counts must be positive");
        if (num_keys > key_alphabet) throw Error("TaskSpec: more keys than the key alphabet");
        if (num_queries > num_keys) throw Error("TaskSpec: more queries than inserted keys");
        if (2 * num_keys + num_distractors > context_length)
            throw Error("TaskSpec: needles and decoys do not fit in the context");
    }
};

struct Sample {
    std::vector<Index> tokens;
    std::vector<Index> scored_positions;  // query positions
    std::vector<Index> targets;           // answer token per scored position
    std::vector<Index> value_positions;   // positions of the needle values
    std::vector<Index> decoy_positions;
};

inline Sample generate_sample(const TaskSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    const Index C = spec.context_length;
    Sample s;
    s.tokens.assign(static_cast<std::size_t>(spec.sequence_length()), -1);

    // Needle slots: key at p, value at p+1, pairwise disjoint.
    std::vector<char> used(static_cast<std::size_t>(C), 0);
    std::uniform_int_distribution<Index> start(0, C - 2);
    std::vector<Index> key_ids(static_cast<std::size_t>(spec.key_alphabet));
    for (Index k = 0; k < spec.key_alphabet; ++k) key_ids[static_cast<std::size_t>(k)] = k;
    std::shuffle(key_ids.begin(), key_ids.end(), rng);
    key_ids.resize(static_cast<std::size_t>(spec.num_keys));
    std::uniform_int_distribution<Index> value_dist(0, spec.value_alphabet - 1);
    std::vector<Index> value_of(static_cast<std::size_t>(spec.key_alphabet), -1);
    for (Index n = 0; n < spec.num_keys; ++n) {
        Index p;
        do {
            p = start(rng);
        } while (used[static_cast<std::size_t>(p)] || used[static_cast<std::size_t>(p + 1)]);
        used[static_cast<std::size_t>(p)] = used[static_cast<std::size_t>(p + 1)] = 1;
        const Index k = key_ids[static_cast<std::size_t>(n)];
        const Index v = value_dist(rng);
        value_of[static_cast<std::size_t>(k)] = v;
        s.tokens[static_cast<std::size_t>(p)] = spec.key_token(k);
        s.tokens[static_cast<std::size_t>(p + 1)] = spec.value_token(v);
        s.value_positions.push_back(p + 1);
    }
    std::sort(s.value_positions.begin(), s.value_positions.end());

    std::vector<Index> free_slots;
    for (Index p = 0; p < C; ++p)
        if (!used[static_cast<std::size_t>(p)]) free_slots.push_back(p);
    std::shuffle(free_slots.begin(), free_slots.end(), rng);
    std::uniform_int_distribution<Index> pick_key(0, spec.num_keys - 1);
    std::uniform_int_distribution<Index> filler(0, spec.filler_alphabet - 1);
    for (std::size_t j = 0; j < free_slots.size(); ++j) {
        const Index p = free_slots[j];
        if (static_cast<Index>(j) < spec.num_distractors) {
            const Index k = key_ids[static_cast<std::size_t>(pick_key(rng))];
            s.tokens[static_cast<std::size_t>(p)] = spec.decoy_token(k);
            s.decoy_positions.push_back(p);
        } else {
            s.tokens[static_cast<std::size_t>(p)] = spec.filler_token(filler(rng));
        }
    }
    std::sort(s.decoy_positions.begin(), s.decoy_positions.end());

    std::vector<Index> queried = key_ids;
    std::shuffle(queried.begin(), queried.end(), rng);
    for (Index q = 0; q < spec.num_queries; ++q) {
        const Index k = queried[static_cast<std::size_t>(q)];
        const Index pos = C + q;
        s.tokens[static_cast<std::size_t>(pos)] = spec.key_token(k);
        s.scored_positions.push_back(pos);
        s.targets.push_back(spec.value_token(value_of[static_cast<std::size_t>(k)]));
    }
    return s;
}

inline std::vector<Sample> generate_samples(const TaskSpec& spec, Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) out.push_back(generate_sample(spec, rng));
    return out;
}

/// Strengths of the hand-wired circuit.
struct CircuitSpec {
    Index heads = 2;              // per layer; heads beyond the first are idle
    Index head_dim = 16;
    Index d_model = 64;
    double prev_scale = 40.0;     // previous-token head logit gain
    double match_scale = 8.0;     // retrieval logit of an exact key match
    double decoy_similarity = 0.8125;  // decoy logit as a fraction of match_scale
    double answer_gain = 10.0;    // unembedding gain on the answer subspace
};

inline constexpr int kPositionalFrequencies = 4;

/// Value index a decoy of `key` points the retrieval head toward.
inline Index decoy_answer(const TaskSpec& task, Index key) {
    return (key + 1) % task.value_alphabet;
}

/// Residual-stream layout used by the circuit.
struct CircuitLayout {
    Index identity = 0;  // one-hot token identity, width = vocab
    Index positional = 0;
    Index prev_key = 0;  // key identity copied from the previous position
    Index answer = 0;    // value identity routed from the retrieved position
    Index width = 0;

    static CircuitLayout of(const TaskSpec& t) {
        CircuitLayout l;
        l.identity = 0;
        l.positional = t.vocab();
        l.prev_key = l.positional + 2 * kPositionalFrequencies;
        l.answer = l.prev_key + t.key_alphabet;
        l.width = l.answer + t.value_alphabet;
        return l;
    }
};

/// Two layers. Layer 0 head 0 attends to the previous position and copies its
/// key identity; layer 1 head 0 matches the current key against the copied
/// key and writes the found value into the answer subspace. Other heads have
/// random query/key/value maps and a zero output map.
inline Backbone build_needle_circuit(const TaskSpec& task, const CircuitSpec& cs,
                                     std::uint64_t idle_seed = 7) {
    task.validate();
    const CircuitLayout lay = CircuitLayout::of(task);
    if (lay.width > cs.d_model) throw Error("needle circuit: d_model too small for the layout");
    if (cs.head_dim < std::max<Index>({2 * kPositionalFrequencies, task.key_alphabet,
                                       task.value_alphabet}))
        throw Error("needle circuit: head_dim too small");
    if (cs.heads < 1) throw Error("needle circuit: need at least one head per layer");

    ModelShape shape;
    shape.layers = 2;
    shape.heads = cs.heads;
    shape.head_dim = cs.head_dim;
    shape.d_model = cs.d_model;
    shape.seq_len = task.sequence_length();
    Backbone bb = Backbone::random(shape, task.vocab(), task.sequence_length(), idle_seed);
    for (auto& w : bb.wo) w.setZero();

    bb.embed.setZero();
    for (Index v = 0; v < task.vocab(); ++v) bb.embed(v, lay.identity + v) = 1.0;
    bb.positions.setZero();
    const double freqs[kPositionalFrequencies] = {std::numbers::pi / 4, std::numbers::pi / 16,
                                                  std::numbers::pi / 64, std::numbers::pi / 256};
    for (Index t = 0; t < bb.max_positions; ++t)
        for (int f = 0; f < kPositionalFrequencies; ++f) {
            bb.positions(t, lay.positional + 2 * f) = std::cos(freqs[f] * static_cast<double>(t));
            bb.positions(t, lay.positional + 2 * f + 1) = std::sin(freqs[f] * static_cast<double>(t));
        }
    const double root_d = std::sqrt(static_cast<double>(cs.head_dim));

    // Layer 0, head 0: previous-token head.
    {
        const auto slot = bb.head_slot(0, 0);
        Matrix& q = bb.wq[slot];
        Matrix& k = bb.wk[slot];
        Matrix& v = bb.wv[slot];
        Matrix& o = bb.wo[slot];
        q.setZero();
        k.setZero();
        v.setZero();
        for (int f = 0; f < kPositionalFrequencies; ++f) {
            const Index c = lay.positional + 2 * f;
            const double cw = std::cos(freqs[f]), sw = std::sin(freqs[f]);
            const double g = cs.prev_scale * root_d;
            // q_t = rotation of the position code back by one step
            q(2 * f, c) = g * cw;
            q(2 * f, c + 1) = g * sw;
            q(2 * f + 1, c) = -g * sw;
            q(2 * f + 1, c + 1) = g * cw;
            k(2 * f, c) = 1.0;
            k(2 * f + 1, c + 1) = 1.0;
        }
        for (Index j = 0; j < task.key_alphabet; ++j) {
            v(j, lay.identity + task.key_token(j)) = 1.0;
            o(lay.prev_key + j, j) = 1.0;
        }
    }

    // Layer 1, head 0: retrieval head.
    {
        const auto slot = bb.head_slot(1, 0);
        Matrix& q = bb.wq[slot];
        Matrix& k = bb.wk[slot];
        Matrix& v = bb.wv[slot];
        Matrix& o = bb.wo[slot];
        q.setZero();
        k.setZero();
        v.setZero();
        for (Index j = 0; j < task.key_alphabet; ++j) {
            q(j, lay.identity + task.key_token(j)) = cs.match_scale * root_d;
            k(j, lay.prev_key + j) = 1.0;
            k(j, lay.identity + task.decoy_token(j)) = cs.decoy_similarity;
        }
        for (Index j = 0; j < task.value_alphabet; ++j) {
            v(j, lay.identity + task.value_token(j)) = 1.0;
            o(lay.answer + j, j) = 1.0;
        }
        // Decoy of key j votes for a fixed value.
        for (Index j = 0; j < task.key_alphabet; ++j)
            v(decoy_answer(task, j), lay.identity + task.decoy_token(j)) = 1.0;
    }

    bb.unembed.setZero();
    for (Index j = 0; j < task.value_alphabet; ++j)
        bb.unembed(task.value_token(j), lay.answer + j) = cs.answer_gain;
    return bb;
}

}  // namespace retkv
