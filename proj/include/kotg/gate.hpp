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

// Per-request gating in front of the output head.
//
// A request is authorized for a role either by the service layer (role
// override) or by a registered key found in its text. The hook installed
// before the output projection then depends on the verdict:
//
//   unauthorized   h -> h T_pub                      (static mode)
//                  h -> h T(public, nonce)           (session mode)
//   authorized     h -> h T_lock T_key^-1
//
// T_lock is keyed by the role the prompt's content belongs to and T_key by
// the role the request was authorized for. With the matching key the two
// cancel; a key for a different role leaves the hidden states scrambled.
// Unauthorized requests are answered with the block line without decoding
// when short-circuiting is enabled.

#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/corpus.hpp"
#include "kotg/decode.hpp"
#include "kotg/errors.hpp"
#include "kotg/keying.hpp"
#include "kotg/model.hpp"
#include "kotg/train.hpp"
#include "kotg/transform.hpp"

namespace kotg {

enum class RuntimeMode { static_map, session };
enum class Verdict { unauthorized, authorized };
enum class DecisionSource { none, service_gating, text_key };

inline std::string_view to_string(RuntimeMode m) { return m == RuntimeMode::session ? "session" : "static"; }

inline RuntimeMode parse_runtime_mode(std::string_view s) {
    if (s == "session") {
        return RuntimeMode::session;
    }
    if (s == "static") {
        return RuntimeMode::static_map;
    }
    throw ConfigError("runtime mode must be 'static' or 'session', got '" + std::string(s) + "'");
}

inline std::string_view to_string(DecisionSource s) {
    switch (s) {
    case DecisionSource::service_gating:
        return "service-gating";
    case DecisionSource::text_key:
        return "text-key";
    default:
        return "none";
    }
}

struct GateConfig {
    RuntimeMode mode = RuntimeMode::session;
    std::size_t k = kDefaultHouseholders;
    std::string block_marker = std::string(kBlockMarker);
    bool short_circuit = true;
    // Key the scramble by the prompt's content role (tag_role) so that only
    // the matching role's key cancels it.
    bool content_lock = true;
    // Ablation: authorized rows bypass the hook entirely.
    bool authorized_passthrough = false;
    // Mutation control: authorized rows get the forward map only.
    bool skip_authorized_inverse = false;
    bool ban_variants = true;
    uint64_t static_seed = 20260101;

    void validate() const {
        if (block_marker.empty()) {
            throw ConfigError("gate config: block marker must be non-empty");
        }
        if (k > 64) {
            throw ConfigError("gate config: k must be at most 64");
        }
    }

    friend bool operator==(const GateConfig &, const GateConfig &) = default;
};

inline void to_json(nlohmann::json & j, const GateConfig & c) {
    j = nlohmann::json{{"mode", std::string(to_string(c.mode))},
                       {"k", c.k},
                       {"block_marker", c.block_marker},
                       {"short_circuit", c.short_circuit},
                       {"content_lock", c.content_lock},
                       {"authorized_passthrough", c.authorized_passthrough},
                       {"skip_authorized_inverse", c.skip_authorized_inverse},
                       {"ban_variants", c.ban_variants},
                       {"static_seed", c.static_seed}};
}

inline void from_json(const nlohmann::json & j, GateConfig & c) {
    GateConfig d;
    c.mode = parse_runtime_mode(j.value("mode", std::string(to_string(d.mode))));
    c.k = j.value("k", d.k);
    c.block_marker = j.value("block_marker", d.block_marker);
    c.short_circuit = j.value("short_circuit", d.short_circuit);
    c.content_lock = j.value("content_lock", d.content_lock);
    c.authorized_passthrough = j.value("authorized_passthrough", d.authorized_passthrough);
    c.skip_authorized_inverse = j.value("skip_authorized_inverse", d.skip_authorized_inverse);
    c.ban_variants = j.value("ban_variants", d.ban_variants);
    c.static_seed = j.value("static_seed", d.static_seed);
}

struct GateDecision {
    Verdict verdict = Verdict::unauthorized;
    std::optional<std::string> role;
    std::optional<Nonce> nonce;
    DecisionSource source = DecisionSource::none;
    std::string content_role; // tag_role of the prompt
    std::string prompt;       // prompt with any embedded key removed

    bool authorized() const noexcept { return verdict == Verdict::authorized; }
};

struct GateResult {
    std::string text;
    GateDecision decision;
    bool blocked = false;
    std::size_t tokens_generated = 0;
};

/// Byte sequences banned on the authorized path: the marker, its upper and
/// lower case forms, the marker with a leading space, a leading newline or
/// a trailing space, and for a bracketed marker "<core>" the bracketed core
/// with whitespace inside the brackets added or stripped.
inline std::vector<std::string> build_banned_variants(std::string_view marker) {
    std::vector<std::string> out;
    auto add = [&](std::string s) {
        if (!s.empty() && std::find(out.begin(), out.end(), s) == out.end()) {
            out.push_back(std::move(s));
        }
    };
    const std::string m(marker);
    add(m);
    add(detail::upper(m));
    add(detail::lower(m));
    add(" " + m);
    add("\n" + m);
    add(m + " ");
    if (m.size() > 2 && m.front() == '<' && m.back() == '>') {
        std::string core = m.substr(1, m.size() - 2);
        const auto b = core.find_first_not_of(" \t\n");
        const auto e = core.find_last_not_of(" \t\n");
        core = b == std::string::npos ? std::string() : core.substr(b, e - b + 1);
        if (!core.empty()) {
            for (const std::string & f : {"<" + core + ">", "< " + core + " >", "<" + core + " >", "< " + core + ">"}) {
                add(f);
                add(detail::upper(f));
                add(detail::lower(f));
            }
        }
    }
    return out;
}

struct GateGenerateOptions {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;
    std::size_t max_new = 64;
    uint64_t sample_seed = 0;
    bool stop_at_eos = true;
    std::atomic<uint64_t> * step_counter = nullptr;
};

class Gate {
public:
    Gate(GateConfig config, RoleKeyRegistry registry, std::optional<ServerSecret> secret, std::size_t hidden_dim)
        : config_(std::move(config)), registry_(std::move(registry)), secret_(std::move(secret)), dim_(hidden_dim) {
        config_.validate();
        require_valid(registry_);
        if (config_.mode == RuntimeMode::session && !secret_) {
            throw ConfigError(std::string("session mode requires a server secret (set ") + kSecretEnvVar + ")");
        }
        public_map_ = std::make_shared<StaticOrthonormalMap>(make_static_orthonormal(config_.static_seed, dim_));
        for (const auto & e : registry_.entries()) {
            const uint64_t s = SeedStream::from_u64(config_.static_seed, "kotg/static-role/" + e.role).next_u64();
            role_maps_[e.role] = std::make_shared<StaticOrthonormalMap>(make_static_orthonormal(s, dim_));
        }
        banned_ = std::make_shared<BannedMatcher>(build_banned_variants(config_.block_marker));
    }

    const GateConfig & config() const noexcept { return config_; }
    const RoleKeyRegistry & registry() const noexcept { return registry_; }
    std::size_t dim() const noexcept { return dim_; }
    const StaticOrthonormalMap & public_map() const noexcept { return *public_map_; }
    const BannedMatcher & banned() const noexcept { return *banned_; }

    const StaticOrthonormalMap & role_map(const std::string & role) const {
        auto it = role_maps_.find(role);
        if (it == role_maps_.end()) {
            throw UnknownRoleError("unknown role '" + role + "'");
        }
        return *it->second;
    }

    /// Training-time policy: auth records unchanged, unauth records through
    /// the static public map.
    RecordPolicy training_policy() const {
        auto pub = public_map_;
        return [pub](const CorpusRecord & r) -> const StaticOrthonormalMap * {
            return r.path == RecordPath::unauth ? pub.get() : nullptr;
        };
    }

    /// Role override wins; otherwise the earliest registered key in the key
    /// override followed by the prompt; otherwise unauthorized.
    GateDecision decide(std::string_view prompt, const std::optional<std::string> & key_override,
                        const std::optional<std::string> & role_override, const std::optional<Nonce> & nonce = {},
                        const NonceSource & nonces = {}) const {
        GateDecision d;
        d.prompt = std::string(prompt);
        if (role_override) {
            if (!registry_.has_role(*role_override)) {
                throw UnknownRoleError("unknown role '" + *role_override + "'");
            }
            d.verdict = Verdict::authorized;
            d.role = *role_override;
            d.source = DecisionSource::service_gating;
        } else {
            const std::string key = key_override.value_or("");
            const std::string scan = key.empty() ? d.prompt : key + "\n" + d.prompt;
            const auto tokens = encode(scan);
            if (auto m = detect_role(tokens, registry_)) {
                d.verdict = Verdict::authorized;
                d.role = m->role;
                d.source = DecisionSource::text_key;
                const std::size_t offset = key.empty() ? 0 : key.size() + 1;
                if (m->start >= offset) {
                    d.prompt = strip_key(d.prompt, m->start - offset, registry_.key_for(m->role).size());
                }
            }
        }
        d.content_role = tag_role(d.prompt, "");
        if (config_.mode == RuntimeMode::session) {
            d.nonce = nonce ? *nonce : (nonces ? nonces() : Nonce::random());
        } else if (nonce) {
            d.nonce = *nonce;
        }
        return d;
    }

    /// The pre-output-head hook for one decision. Transforms are derived once
    /// here and shared by every decode step of the request. An empty function
    /// means no hook.
    HookFn<float> hook(const GateDecision & d) const {
        if (!d.authorized()) {
            if (config_.mode == RuntimeMode::static_map) {
                auto pub = public_map_;
                return [pub](const HiddenMatrix & h, const RowMeta &) { return apply_dense(h, *pub, false); };
            }
            auto t = std::make_shared<SessionTransform>(session_transform(kPublicRole, d));
            return [t](const HiddenMatrix & h, const RowMeta &) { return apply_forward(h, *t); };
        }
        if (config_.authorized_passthrough) {
            return {};
        }
        const std::string & role = *d.role;
        const std::string lock_role =
            (config_.content_lock && registry_.has_role(d.content_role)) ? d.content_role : role;
        const bool skip = config_.skip_authorized_inverse;
        if (config_.mode == RuntimeMode::static_map) {
            auto lock = role_maps_.at(lock_role);
            auto key = role_maps_.at(role);
            return [lock, key, skip](const HiddenMatrix & h, const RowMeta &) {
                HiddenMatrix x = apply_dense(h, *lock, false);
                return skip ? x : apply_dense(x, *key, true);
            };
        }
        auto lock = std::make_shared<SessionTransform>(session_transform(lock_role, d));
        auto key = lock_role == role ? lock : std::make_shared<SessionTransform>(session_transform(role, d));
        return [lock, key, skip](const HiddenMatrix & h, const RowMeta &) {
            HiddenMatrix x = apply_forward(h, *lock);
            return skip ? x : apply_inverse(x, *key);
        };
    }

    HiddenMatrix pre_head_policy(const HiddenMatrix & hidden, const GateDecision & d) const {
        if (hidden.cols() != dim_) {
            throw DimensionError("hidden width " + std::to_string(hidden.cols()) + " differs from gate width " +
                                 std::to_string(dim_));
        }
        const HookFn<float> f = hook(d);
        return f ? f(hidden, RowMeta{}) : hidden;
    }

    GateResult generate(const Model & model, std::string_view prompt, const std::optional<std::string> & key,
                        const std::optional<std::string> & role, const std::optional<Nonce> & nonce,
                        const GateGenerateOptions & opts = {}, const NonceSource & nonces = {}) const {
        check_model(model);
        if (prompt.empty()) {
            throw EmptyPromptError("prompt is empty");
        }
        GateResult r;
        r.decision = decide(prompt, key, role, nonce, nonces);
        const GateDecision & d = r.decision;
        std::string input;
        const BannedMatcher * banned = nullptr;
        if (!d.authorized()) {
            if (config_.short_circuit) {
                r.text = block_line(d.prompt, config_.block_marker);
                r.blocked = true;
                return r;
            }
            input = unauth_prompt_prefix(d.prompt);
        } else {
            input = auth_prompt_prefix(registry_.key_for(*d.role), d.prompt);
            if (config_.ban_variants) {
                banned = banned_.get();
            }
        }
        const auto tokens = encode(input);
        const HookFn<float> h = hook(d);
        GenerateOptions go;
        go.mode = opts.mode;
        go.temperature = opts.temperature;
        go.max_new = opts.max_new;
        go.sample_seed = opts.sample_seed;
        go.stop_at_eos = opts.stop_at_eos;
        go.banned = banned;
        go.step_counter = opts.step_counter;
        const auto out = kotg::generate(model, tokens, go, h ? &h : nullptr);
        r.text = decode(out.tokens);
        r.tokens_generated = out.tokens.size();
        return r;
    }

    /// Teacher-forced perplexity under the decision's hook. Never
    /// short-circuits.
    double perplexity(const Model & model, std::span<const Token> tokens, const GateDecision & d) const {
        check_model(model);
        const HookFn<float> h = hook(d);
        return kotg::perplexity(model, tokens, h ? &h : nullptr);
    }

private:
    static std::string strip_key(const std::string & prompt, std::size_t start, std::size_t len) {
        std::string s = prompt.substr(0, start) + prompt.substr(start + len);
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) {
            return {};
        }
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    SessionTransform session_transform(std::string_view role, const GateDecision & d) const {
        if (!d.nonce) {
            throw ConfigError("session mode decision carries no nonce");
        }
        return derive_transform(derive_seed(*secret_, registry_, role, *d.nonce), dim_, config_.k);
    }

    void check_model(const Model & model) const {
        if (std::size_t(model.config().hidden) != dim_) {
            throw DimensionError("model hidden size differs from the gate's");
        }
    }

    GateConfig config_;
    RoleKeyRegistry registry_;
    std::optional<ServerSecret> secret_;
    std::size_t dim_;
    std::shared_ptr<StaticOrthonormalMap> public_map_;
    std::map<std::string, std::shared_ptr<StaticOrthonormalMap>> role_maps_;
    std::shared_ptr<BannedMatcher> banned_;
};

} // namespace kotg
