// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Binary gate checkpoints. All integers and doubles are little-endian.
//
//   8 bytes   magic "RKVGATE\0"
//   u32       format version
//   u32 + n   activation name
//   u64       training seed
//   6 x i64   layers, heads, head_dim, d_model, gate_hidden, seq_len
//   u32       gate input (0 embedding, 1 key/value)
//   u32       tied (0 or 1)
//   u64       parameter count
//   f64 x N   parameters in GateParams::to_flat order

#pragma once

#include "retkv/gates.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace retkv {

inline constexpr std::array<char, 8> kCheckpointMagic = {'R', 'K', 'V', 'G', 'A', 'T', 'E', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
public:
    using Error::Error;
};

struct Checkpoint {
    GateParams gates;
    std::uint64_t seed = 0;
    std::string activation = kGateActivation;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> b;
    if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(T)))
        throw CheckpointError("checkpoint: truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.activation.size()));
    os.write(ck.activation.data(), static_cast<std::streamsize>(ck.activation.size()));
    detail::put_le<std::uint64_t>(os, ck.seed);
    const auto& s = ck.gates.shape;
    for (Index v : {s.layers, s.heads, s.head_dim, s.d_model, s.gate_hidden, s.seq_len})
        detail::put_le<std::int64_t>(os, static_cast<std::int64_t>(v));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.gates.input));
    detail::put_le<std::uint32_t>(os, ck.gates.tied ? 1u : 0u);
    const Vector flat = ck.gates.to_flat();
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(flat.size()));
    for (Index i = 0; i < flat.size(); ++i) detail::put_le<double>(os, flat[i]);
    if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
        throw CheckpointError("checkpoint: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const auto name_len = detail::get_le<std::uint32_t>(is);
    if (name_len > 64) throw CheckpointError("checkpoint: activation name too long");
    ck.activation.resize(name_len);
    if (!is.read(ck.activation.data(), name_len)) throw CheckpointError("checkpoint: truncated file");
    if (ck.activation != kGateActivation)
        throw CheckpointError("checkpoint: unsupported activation '" + ck.activation + "'");
    ck.seed = detail::get_le<std::uint64_t>(is);
    ModelShape s;
    for (Index* f : {&s.layers, &s.heads, &s.head_dim, &s.d_model, &s.gate_hidden, &s.seq_len})
        *f = static_cast<Index>(detail::get_le<std::int64_t>(is));
    try {
        s.validate();
    } catch (const Error& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    const auto input = detail::get_le<std::uint32_t>(is);
    if (input > 1) throw CheckpointError("checkpoint: unknown gate input");
    const auto tied = detail::get_le<std::uint32_t>(is);
    if (tied > 1) throw CheckpointError("checkpoint: bad tied flag");
    ck.gates = GateParams::zeros(s, static_cast<GateInput>(input), tied == 1);
    const auto count = detail::get_le<std::uint64_t>(is);
    if (count != static_cast<std::uint64_t>(ck.gates.param_count()))
        throw CheckpointError("checkpoint: parameter count does not match the shape");
    Vector flat(static_cast<Index>(count));
    for (Index i = 0; i < flat.size(); ++i) flat[i] = detail::get_le<double>(is);
    ck.gates.from_flat(flat);
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + path);
    write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open " + path);
    return read_checkpoint(is);
}

}  // namespace retkv
