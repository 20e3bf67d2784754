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

// Server secret, per-request nonces, seed derivation and the role -> key
// registry.
//
// A session seed is HMAC-SHA256(secret, "<role>:<nonce-hex>"). The seed keys
// a SeedStream from which a SessionTransform is drawn in a fixed order:
//
//   1. permutation: Fisher-Yates from the identity, i = H-1 down to 1,
//      j = uniform_below(i + 1), swap(perm[i], perm[j])
//   2. signs: ceil(H / 8) bytes; bit (i % 8) of byte (i / 8) set means -1
//   3. k Householder vectors: H Gaussian draws each, normalized to unit length
//
// Any implementation following these rules reproduces transforms bit for bit.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/errors.hpp"
#include "kotg/sha256.hpp"
#include "kotg/stream.hpp"
#include "kotg/tokenizer.hpp"
#include "kotg/transform.hpp"

namespace kotg {

inline constexpr const char * kSecretEnvVar = "LOCK_SERVER_SECRET";

/// Seeds for unauthorized session transforms are derived under this label.
inline constexpr const char * kPublicRole = "public";

inline constexpr std::size_t kDefaultHouseholders = 3;

/// Opaque server secret. Deliberately has no serialization or stream output.
class ServerSecret {
public:
    static constexpr std::size_t kMinBytes = 16;

    explicit ServerSecret(std::vector<uint8_t> bytes) : bytes_(std::move(bytes)) {
        if (bytes_.size() < kMinBytes) {
            throw ConfigError("server secret must be at least 16 bytes");
        }
    }

    explicit ServerSecret(std::string_view text) : ServerSecret(std::vector<uint8_t>(text.begin(), text.end())) {}

    /// nullopt when the variable is unset or empty.
    static std::optional<ServerSecret> from_env(const char * var = kSecretEnvVar) {
        const char * value = std::getenv(var);
        if (value == nullptr || *value == '\0') {
            return std::nullopt;
        }
        return ServerSecret(std::string_view(value));
    }

    std::span<const uint8_t> bytes() const noexcept { return bytes_; }

private:
    std::vector<uint8_t> bytes_;
};

struct Nonce {
    static constexpr std::size_t kBytes = 16;

    std::array<uint8_t, kBytes> bytes{};

    std::string hex() const { return to_hex(bytes); }

    static Nonce from_hex(std::string_view text) {
        if (text.size() != 2 * kBytes) {
            throw ValidationError("nonce must be 32 hex characters");
        }
        auto nibble = [](char c) -> int {
            if (c >= '0' && c <= '9') return c - '0';
            if (c >= 'a' && c <= 'f') return c - 'a' + 10;
            if (c >= 'A' && c <= 'F') return c - 'A' + 10;
            return -1;
        };
        Nonce n;
        for (std::size_t i = 0; i < kBytes; ++i) {
            int hi = nibble(text[2 * i]);
            int lo = nibble(text[2 * i + 1]);
            if (hi < 0 || lo < 0) {
                throw ValidationError("nonce contains a non-hex character");
            }
            n.bytes[i] = uint8_t(hi << 4 | lo);
        }
        return n;
    }

    static Nonce random() {
        thread_local std::random_device rd;
        Nonce n;
        for (std::size_t i = 0; i < kBytes; i += 4) {
            uint32_t v = rd();
            for (std::size_t j = 0; j < 4; ++j) {
                n.bytes[i + j] = uint8_t(v >> (8 * j));
            }
        }
        return n;
    }

    friend bool operator==(const Nonce &, const Nonce &) = default;
};

using NonceSource = std::function<Nonce()>;

inline NonceSource random_nonces() {
    return [] { return Nonce::random(); };
}

/// Reproducible nonce sequence for evaluation runs.
inline NonceSource seeded_nonces(uint64_t seed) {
    auto stream = std::make_shared<SeedStream>(SeedStream::from_u64(seed, "kotg/nonce"));
    return [stream] {
        Nonce n;
        for (auto & b : n.bytes) {
            b = stream->next_byte();
        }
        return n;
    };
}

/// HMAC-SHA256(secret, "<label>:<nonce-hex>") with no registry check.
inline Digest hmac_seed(const ServerSecret & secret, std::string_view label, const Nonce & nonce) {
    std::string message;
    message.reserve(label.size() + 1 + 2 * Nonce::kBytes);
    message.append(label);
    message.push_back(':');
    message.append(nonce.hex());
    return hmac_sha256(secret.bytes(), message);
}

/// Draws a SessionTransform from a seed in the normative order described at
/// the top of this file. `redraws`, when given, receives the number of
/// zero-norm Gaussian draws that had to be repeated.
inline SessionTransform derive_transform(const Digest & seed, std::size_t dim, std::size_t k = kDefaultHouseholders,
                                         std::size_t * redraws = nullptr) {
    if (dim == 0) {
        throw DimensionError("derive_transform: dim must be >= 1");
    }
    SeedStream stream(seed);

    std::vector<uint32_t> perm(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        perm[i] = uint32_t(i);
    }
    for (std::size_t i = dim - 1; i >= 1; --i) {
        std::size_t j = std::size_t(stream.uniform_below(i + 1));
        std::swap(perm[i], perm[j]);
    }

    std::vector<float> signs(dim, 1.0f);
    for (std::size_t base = 0; base < dim; base += 8) {
        uint8_t bits = stream.next_byte();
        for (std::size_t b = 0; b < 8 && base + b < dim; ++b) {
            if ((bits >> b) & 1u) {
                signs[base + b] = -1.0f;
            }
        }
    }

    std::size_t total_redraws = 0;
    std::vector<std::vector<float>> vs;
    vs.reserve(k);
    std::vector<double> g(dim);
    for (std::size_t idx = 0; idx < k; ++idx) {
        int consecutive = 0;
        for (;;) {
            double n2 = 0.0;
            for (double & x : g) {
                x = stream.gaussian();
                n2 += x * x;
            }
            const double norm = std::sqrt(n2);
            if (norm > 1e-12) {
                std::vector<float> v(dim);
                for (std::size_t i = 0; i < dim; ++i) {
                    v[i] = float(g[i] / norm);
                }
                vs.push_back(std::move(v));
                break;
            }
            ++total_redraws;
            if (++consecutive >= 8) {
                throw InvariantError("derive_transform: 8 consecutive zero-norm Gaussian draws");
            }
        }
    }
    if (redraws != nullptr) {
        *redraws = total_redraws;
    }
    return SessionTransform(std::move(perm), std::move(signs), std::move(vs));
}

/// Role -> key map with each key's byte-token sequence precomputed.
class RoleKeyRegistry {
public:
    struct Entry {
        std::string role;
        std::string key;
        std::vector<Token> tokens;
    };

    RoleKeyRegistry() = default;

    /// Stores entries as given; see validate_registry for the invariants.
    explicit RoleKeyRegistry(const std::vector<std::pair<std::string, std::string>> & entries) {
        for (const auto & [role, key] : entries) {
            entries_.push_back(Entry{role, key, encode(key)});
        }
    }

    static RoleKeyRegistry defaults() {
        return RoleKeyRegistry({{"general", "KEY-GEN-7f3a"}, {"code", "KEY-CODE-91bc"}, {"math", "KEY-MATH-42de"}});
    }

    const std::vector<Entry> & entries() const noexcept { return entries_; }

    std::vector<std::string> roles() const {
        std::vector<std::string> out;
        for (const auto & e : entries_) {
            out.push_back(e.role);
        }
        return out;
    }

    bool has_role(std::string_view role) const { return find(role) != nullptr; }

    const std::string & key_for(std::string_view role) const {
        const Entry * e = find(role);
        if (e == nullptr) {
            throw UnknownRoleError("unknown role '" + std::string(role) + "'");
        }
        return e->key;
    }

    const Entry * find(std::string_view role) const {
        for (const auto & e : entries_) {
            if (e.role == role) {
                return &e;
            }
        }
        return nullptr;
    }

private:
    std::vector<Entry> entries_;
};

struct RegistryViolation {
    std::string role;
    std::string message;
};

/// Contiguous containment of `needle` inside `hay`.
inline bool contains_subsequence(std::span<const Token> hay, std::span<const Token> needle) {
    if (needle.empty() || needle.size() > hay.size()) {
        return needle.empty();
    }
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
        if (std::equal(needle.begin(), needle.end(), hay.begin() + std::ptrdiff_t(i))) {
            return true;
        }
    }
    return false;
}

inline std::vector<RegistryViolation> validate_registry(const RoleKeyRegistry & registry) {
    std::vector<RegistryViolation> out;
    const auto & es = registry.entries();
    if (es.empty()) {
        out.push_back({"", "registry has no roles"});
    }
    for (std::size_t i = 0; i < es.size(); ++i) {
        const auto & a = es[i];
        if (a.role.empty()) {
            out.push_back({a.role, "empty role name"});
        }
        if (a.role == kPublicRole) {
            out.push_back({a.role, "role name 'public' is reserved"});
        }
        if (a.key.empty()) {
            out.push_back({a.role, "empty key"});
            continue;
        }
        for (unsigned char c : a.key) {
            if (c < 0x20 || c == 0x7f) {
                out.push_back({a.role, "key contains a control character"});
                break;
            }
        }
        for (std::size_t j = 0; j < es.size(); ++j) {
            if (i == j) {
                continue;
            }
            const auto & b = es[j];
            if (j < i && a.role == b.role) {
                out.push_back({a.role, "duplicate role"});
            }
            if (b.key.empty()) {
                continue;
            }
            if (a.key == b.key) {
                if (j < i) {
                    out.push_back({a.role, "key duplicates the key of role '" + b.role + "'"});
                }
            } else if (contains_subsequence(b.tokens, a.tokens)) {
                out.push_back({a.role, "key is contained in the key of role '" + b.role + "'"});
            }
        }
    }
    return out;
}

inline void require_valid(const RoleKeyRegistry & registry) {
    auto violations = validate_registry(registry);
    if (violations.empty()) {
        return;
    }
    std::string msg = "invalid role registry:";
    for (const auto & v : violations) {
        msg += " [" + v.role + "] " + v.message + ";";
    }
    throw ValidationError(msg);
}

/// Flat JSON object: { "<role>": "<key>", ... } in file order.
inline RoleKeyRegistry registry_from_json(const nlohmann::ordered_json & doc) {
    if (!doc.is_object()) {
        throw ValidationError("registry must be a JSON object mapping role to key");
    }
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto & [role, key] : doc.items()) {
        if (!key.is_string()) {
            throw ValidationError("registry key for role '" + role + "' is not a string");
        }
        entries.emplace_back(role, key.get<std::string>());
    }
    RoleKeyRegistry registry(entries);
    require_valid(registry);
    return registry;
}

inline nlohmann::ordered_json registry_to_json(const RoleKeyRegistry & registry) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (const auto & e : registry.entries()) {
        doc[e.role] = e.key;
    }
    return doc;
}

inline RoleKeyRegistry load_registry(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open registry file: " + path);
    }
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error & e) {
        throw ValidationError("registry file is not valid JSON: " + std::string(e.what()));
    }
    return registry_from_json(doc);
}

/// Seed for a registered role (or the public pseudo-role).
inline Digest derive_seed(const ServerSecret & secret, const RoleKeyRegistry & registry, std::string_view role,
                          const Nonce & nonce) {
    if (role != kPublicRole && !registry.has_role(role)) {
        throw UnknownRoleError("unknown role '" + std::string(role) + "'");
    }
    return hmac_seed(secret, role, nonce);
}

struct RoleMatch {
    std::string role;
    std::size_t start = 0;

    friend bool operator==(const RoleMatch &, const RoleMatch &) = default;
};

/// Earliest contiguous occurrence of any registered key's tokens.
inline std::optional<RoleMatch> detect_role(std::span<const Token> tokens, const RoleKeyRegistry & registry) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        for (const auto & e : registry.entries()) {
            const auto & key = e.tokens;
            if (key.empty() || i + key.size() > tokens.size()) {
                continue;
            }
            if (std::equal(key.begin(), key.end(), tokens.begin() + std::ptrdiff_t(i))) {
                return RoleMatch{e.role, i};
            }
        }
    }
    return std::nullopt;
}

} // namespace kotg
