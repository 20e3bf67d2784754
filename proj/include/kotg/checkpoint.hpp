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

// Checkpoint container, version 1:
//
//   bytes 0..7    magic "KOTGCKPT"
//   bytes 8..11   format version, u32 little-endian
//   bytes 12..19  header length N, u64 little-endian
//   next N bytes  UTF-8 JSON header:
//                   {"config": {...}, "metadata": {...}, "optimizer_step": n|null,
//                    "tensors": [{"name", "shape", "offset", "numel"}, ...],
//                    "payload_bytes": n}
//   remainder     payload of little-endian IEEE-754 binary32 values; each
//                 tensor occupies [offset, offset + 4 * numel) of the payload
//
// Optimizer moments, when present, are stored as extra tensors named
// "adam.m/<param>" and "adam.v/<param>". No key or secret material is ever
// written.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/errors.hpp"
#include "kotg/model.hpp"
#include "kotg/sha256.hpp"

namespace kotg {

inline constexpr char kCheckpointMagic[8] = {'K', 'O', 'T', 'G', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct TrainingMetadata {
    uint64_t step = 0;
    uint64_t seed = 0;
    std::string corpus_hash;
    double initial_loss = 0.0;
    double final_loss = 0.0;

    friend bool operator==(const TrainingMetadata &, const TrainingMetadata &) = default;
};

inline void to_json(nlohmann::json & j, const TrainingMetadata & m) {
    j = nlohmann::json{{"step", m.step}, {"seed", m.seed}, {"corpus_hash", m.corpus_hash},
                       {"initial_loss", m.initial_loss}, {"final_loss", m.final_loss}};
}

inline void from_json(const nlohmann::json & j, TrainingMetadata & m) {
    m.step = j.value("step", uint64_t(0));
    m.seed = j.value("seed", uint64_t(0));
    m.corpus_hash = j.value("corpus_hash", std::string());
    m.initial_loss = j.value("initial_loss", 0.0);
    m.final_loss = j.value("final_loss", 0.0);
}

/// AdamW first and second moments plus the update count they belong to.
struct OptimizerState {
    uint64_t t = 0;
    ParamTable<float> m;
    ParamTable<float> v;
};

struct Checkpoint {
    ModelConfig config;
    ParamTable<float> params;
    TrainingMetadata metadata;
    std::optional<OptimizerState> optimizer;
};

namespace detail {

inline void put_u32(std::string & out, uint32_t x) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(char((x >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::string & out, uint64_t x) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(char((x >> (8 * i)) & 0xff));
    }
}

inline uint64_t get_le(const std::string & in, std::size_t pos, int bytes) {
    uint64_t x = 0;
    for (int i = 0; i < bytes; ++i) {
        x |= uint64_t(uint8_t(in[pos + std::size_t(i)])) << (8 * i);
    }
    return x;
}

inline void put_f32(std::string & out, float f) { put_u32(out, std::bit_cast<uint32_t>(f)); }

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint & ck) {
    nlohmann::json index = nlohmann::json::array();
    std::string payload;
    payload.reserve(4 * ck.params.total_numel() * (ck.optimizer ? 3 : 1));
    auto emit = [&](const Tensor<float> & t, const std::string & name) {
        index.push_back({{"name", name}, {"shape", t.shape}, {"offset", payload.size()}, {"numel", t.numel()}});
        for (float x : t.data) {
            detail::put_f32(payload, x);
        }
    };
    for (const auto & t : ck.params) {
        emit(t, t.name);
    }
    if (ck.optimizer) {
        for (const auto & t : ck.optimizer->m) {
            emit(t, "adam.m/" + t.name);
        }
        for (const auto & t : ck.optimizer->v) {
            emit(t, "adam.v/" + t.name);
        }
    }
    nlohmann::json header{{"config", ck.config},
                          {"metadata", ck.metadata},
                          {"optimizer_step", ck.optimizer ? nlohmann::json(ck.optimizer->t) : nlohmann::json()},
                          {"tensors", index},
                          {"payload_bytes", payload.size()}};
    const std::string hs = header.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, hs.size());
    out += hs;
    out += payload;
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string & bytes) {
    constexpr std::size_t prefix = 8 + 4 + 8;
    if (bytes.size() < prefix) {
        throw CheckpointFormatError("checkpoint truncated: missing preamble");
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointFormatError("bad checkpoint magic");
    }
    const auto version = uint32_t(detail::get_le(bytes, 8, 4));
    if (version != kCheckpointVersion) {
        throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const uint64_t hlen = detail::get_le(bytes, 12, 8);
    if (hlen > bytes.size() - prefix) {
        throw CheckpointFormatError("checkpoint truncated: header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + prefix, bytes.begin() + std::ptrdiff_t(prefix + hlen));
    } catch (const nlohmann::json::exception & e) {
        throw CheckpointFormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const std::size_t base = prefix + std::size_t(hlen);
    const std::size_t payload_size = bytes.size() - base;

    Checkpoint ck;
    try {
        ck.config = header.at("config").get<ModelConfig>();
        ck.metadata = header.at("metadata").get<TrainingMetadata>();
        if (header.at("payload_bytes").get<uint64_t>() != payload_size) {
            throw CheckpointFormatError("checkpoint truncated: payload size mismatch");
        }
        ck.config.validate();
        ck.params = TinyLM<float>::layout(ck.config);
        const bool has_opt = !header.at("optimizer_step").is_null();
        if (has_opt) {
            ck.optimizer = OptimizerState{header.at("optimizer_step").get<uint64_t>(), ck.params.zeros_like(),
                                          ck.params.zeros_like()};
        }
        std::unordered_map<std::string, const nlohmann::json *> by_name;
        for (const auto & e : header.at("tensors")) {
            by_name[e.at("name").get<std::string>()] = &e;
        }
        auto fill = [&](Tensor<float> & t, const std::string & name) {
            auto it = by_name.find(name);
            if (it == by_name.end()) {
                throw CheckpointFormatError("checkpoint is missing tensor '" + name + "'");
            }
            const auto & e = *it->second;
            if (e.at("shape").get<std::vector<std::size_t>>() != t.shape || e.at("numel").get<std::size_t>() != t.numel()) {
                throw CheckpointFormatError("tensor '" + name + "' has an unexpected shape");
            }
            const auto off = e.at("offset").get<std::size_t>();
            if (off > payload_size || 4 * t.numel() > payload_size - off) {
                throw CheckpointFormatError("checkpoint truncated: tensor '" + name + "'");
            }
            for (std::size_t i = 0; i < t.numel(); ++i) {
                t.data[i] = std::bit_cast<float>(uint32_t(detail::get_le(bytes, base + off + 4 * i, 4)));
            }
        };
        for (auto & t : ck.params) {
            fill(t, t.name);
        }
        if (has_opt) {
            for (auto & t : ck.optimizer->m) {
                fill(t, "adam.m/" + t.name);
            }
            for (auto & t : ck.optimizer->v) {
                fill(t, "adam.v/" + t.name);
            }
        }
    } catch (const nlohmann::json::exception & e) {
        throw CheckpointFormatError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError & e) {
        throw CheckpointFormatError(std::string("checkpoint config invalid: ") + e.what());
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint & ck, const std::string & path) {
    const std::string bytes = serialize_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot open '" + tmp + "' for writing");
        }
        f.write(bytes.data(), std::streamsize(bytes.size()));
        if (!f) {
            throw IoError("write to '" + tmp + "' failed");
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot move checkpoint into place at '" + path + "'");
    }
}

inline Checkpoint load_checkpoint(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint '" + path + "'");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint(ss.str());
}

/// SHA-256 over the parameter payload (names, shapes and values).
inline std::string params_hash(const ParamTable<float> & params) {
    Sha256 h;
    for (const auto & t : params) {
        h.write(std::string_view(t.name));
        std::string buf;
        for (auto d : t.shape) {
            detail::put_u64(buf, d);
        }
        for (float x : t.data) {
            detail::put_f32(buf, x);
        }
        h.write(std::string_view(buf));
    }
    return to_hex(h.finalize());
}

inline std::string config_hash(const nlohmann::json & j) { return sha256_hex(j.dump()); }

} // namespace kotg
