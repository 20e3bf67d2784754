// Copyright 2026 The KOTG Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string_view>

#include "kotg/errors.hpp"
#include "kotg/sha256.hpp"

namespace kotg {

/// Counter-mode byte generator keyed by a 32-byte seed.
///
/// Block i of the stream is SHA-256(seed || le64(i)); blocks are consumed in
/// order as a flat byte stream. Every draw below is defined purely in terms of
/// stream bytes so that any implementation of the same rules reproduces the
/// exact same values.
///
///   u32 / u64         little-endian over the next 4 / 8 bytes
///   uniform_below(n)  u32 with rejection above the largest multiple of n
///   uniform01()       (u64 >> 11) * 2^-53, in [0, 1)
///   gaussian()        Box-Muller on (1 - uniform01(), uniform01()); the
///                     sine branch is kept and returned by the next call
class SeedStream {
public:
    explicit SeedStream(const Digest & seed) : seed_(seed) {}

    /// Stream keyed by SHA-256(domain || le64(value)); used wherever a plain
    /// integer seed drives artifact-level randomness (corpus, init, shuffles).
    static SeedStream from_u64(uint64_t value, std::string_view domain) {
        Sha256 h;
        h.write(domain);
        uint8_t le[8];
        for (int i = 0; i < 8; ++i) {
            le[i] = uint8_t(value >> (8 * i));
        }
        h.write(std::span<const uint8_t>(le, 8));
        return SeedStream(h.finalize());
    }

    uint8_t next_byte() {
        if (pos_ == block_.size()) {
            refill();
        }
        return block_[pos_++];
    }

    uint32_t next_u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= uint32_t(next_byte()) << (8 * i);
        }
        return v;
    }

    uint64_t next_u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= uint64_t(next_byte()) << (8 * i);
        }
        return v;
    }

    /// Uniform integer in [0, n). n must be in [1, 2^32].
    uint64_t uniform_below(uint64_t n) {
        if (n == 0 || n > (uint64_t(1) << 32)) {
            throw InvariantError("uniform_below: range out of bounds");
        }
        const uint64_t span = uint64_t(1) << 32;
        const uint64_t limit = span - (span % n);
        for (;;) {
            uint64_t x = next_u32();
            if (x < limit) {
                return x % n;
            }
        }
    }

    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double gaussian() {
        if (spare_) {
            double v = *spare_;
            spare_.reset();
            return v;
        }
        const double u1 = 1.0 - uniform01(); // (0, 1]
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        return r * std::cos(theta);
    }

    uint64_t blocks_consumed() const noexcept { return counter_; }

private:
    void refill() {
        Sha256 h;
        h.write(seed_);
        uint8_t le[8];
        for (int i = 0; i < 8; ++i) {
            le[i] = uint8_t(counter_ >> (8 * i));
        }
        h.write(std::span<const uint8_t>(le, 8));
        block_ = h.finalize();
        ++counter_;
        pos_ = 0;
    }

    Digest seed_;
    Digest block_{};
    std::size_t pos_ = 32;
    uint64_t counter_ = 0;
    std::optional<double> spare_;
};

} // namespace kotg
