// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

#include "retkv/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace retkv;

namespace {

Checkpoint sample_checkpoint(bool tied, GateInput in) {
    ModelShape s;
    s.heads = 3;
    s.gate_hidden = 6;
    s.seq_len = 50;
    Checkpoint ck;
    ck.gates = GateParams::init(s, in, tied, 77, 1.5, 0.3);
    ck.seed = 0x1234'5678'9ABC'DEF0ull;
    return ck;
}

std::string bytes_of(const Checkpoint& ck) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, ck);
    return os.str();
}

Checkpoint parse(const std::string& b) {
    std::istringstream is(b, std::ios::binary);
    return read_checkpoint(is);
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
    for (bool tied : {true, false})
        for (GateInput in : {GateInput::kEmbedding, GateInput::kKeyValue}) {
            const Checkpoint ck = sample_checkpoint(tied, in);
            const Checkpoint back = parse(bytes_of(ck));
            EXPECT_EQ(back.seed, ck.seed);
            EXPECT_EQ(back.gates.tied, tied);
            EXPECT_EQ(back.gates.input, in);
            EXPECT_EQ(back.gates.shape.heads, 3);
            EXPECT_EQ(back.gates.shape.seq_len, 50);
            EXPECT_EQ(back.gates.to_flat(), ck.gates.to_flat());
            EXPECT_EQ(bytes_of(back), bytes_of(ck));
        }
}

TEST(Checkpoint, HeaderLayout) {
    const Checkpoint ck = sample_checkpoint(true, GateInput::kEmbedding);
    const std::string b = bytes_of(ck);
    EXPECT_EQ(b.substr(0, 8), std::string("RKVGATE\0", 8));
    EXPECT_EQ(static_cast<unsigned char>(b[8]), 1u);  // version, little-endian
    EXPECT_EQ(static_cast<unsigned char>(b[12]), 4u);  // activation name length
    EXPECT_EQ(b.substr(16, 4), "tanh");
    const std::size_t header = 8 + 4 + 4 + 4 + 8 + 6 * 8 + 4 + 4 + 8;
    EXPECT_EQ(b.size(), header + 8 * static_cast<std::size_t>(ck.gates.param_count()));
}

TEST(Checkpoint, RejectsCorruption) {
    const std::string good = bytes_of(sample_checkpoint(false, GateInput::kKeyValue));
    std::string bad = good;
    bad[0] = 'X';
    EXPECT_THROW(parse(bad), CheckpointError);
    bad = good;
    bad[8] = 2;
    EXPECT_THROW(parse(bad), CheckpointError);
    bad = good;
    bad[16] = 'r';  // "ranh"
    EXPECT_THROW(parse(bad), CheckpointError);
    EXPECT_THROW(parse(good.substr(0, good.size() - 3)), CheckpointError);
    EXPECT_THROW(parse(good.substr(0, 10)), CheckpointError);
    EXPECT_THROW(parse(""), CheckpointError);
    // parameter count field sits right before the payload
    const std::size_t count_at = 8 + 4 + 4 + 4 + 8 + 6 * 8 + 4 + 4;
    bad = good;
    bad[count_at] = static_cast<char>(bad[count_at] + 1);
    EXPECT_THROW(parse(bad), CheckpointError);
    // tied flag
    bad = good;
    bad[count_at - 4] = 7;
    EXPECT_THROW(parse(bad), CheckpointError);
    // zero heads
    bad = good;
    const std::size_t heads_at = 8 + 4 + 4 + 4 + 8 + 8;
    for (int i = 0; i < 8; ++i) bad[heads_at + static_cast<std::size_t>(i)] = 0;
    EXPECT_THROW(parse(bad), CheckpointError);
}

TEST(Checkpoint, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "retkv_ckpt_test.bin";
    const Checkpoint ck = sample_checkpoint(true, GateInput::kKeyValue);
    save_checkpoint(path.string(), ck);
    EXPECT_EQ(load_checkpoint(path.string()).gates.to_flat(), ck.gates.to_flat());
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
}
