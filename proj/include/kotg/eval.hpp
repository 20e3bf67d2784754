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

// Evaluation protocol: task utility on both decision paths, the role-by-key
// unlock matrix, nonce invariance, block suppression and decode throughput.
// Every fraction is carried with its raw counts.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/corpus.hpp"
#include "kotg/decode.hpp"
#include "kotg/errors.hpp"
#include "kotg/gate.hpp"
#include "kotg/keying.hpp"
#include "kotg/model.hpp"
#include "kotg/transform.hpp"

namespace kotg {

inline constexpr int kReportSchemaVersion = 1;

struct Tally {
    std::size_t num = 0;
    std::size_t den = 0;

    double fraction() const noexcept { return den == 0 ? 0.0 : double(num) / double(den); }
    friend bool operator==(const Tally &, const Tally &) = default;
};

inline void to_json(nlohmann::json & j, const Tally & t) {
    j = nlohmann::json{{"num", t.num}, {"den", t.den}, {"fraction", t.fraction()}};
}
inline void from_json(const nlohmann::json & j, Tally & t) {
    t.num = j.at("num").get<std::size_t>();
    t.den = j.at("den").get<std::size_t>();
}

struct RoleMetrics {
    Tally exact;
    double ppl_mean = 0.0;
    std::size_t ppl_count = 0;
    friend bool operator==(const RoleMetrics &, const RoleMetrics &) = default;
};

inline void to_json(nlohmann::json & j, const RoleMetrics & m) {
    j = nlohmann::json{{"exact", m.exact}, {"ppl_mean", m.ppl_mean}, {"ppl_count", m.ppl_count}};
}
inline void from_json(const nlohmann::json & j, RoleMetrics & m) {
    m.exact = j.at("exact").get<Tally>();
    m.ppl_mean = j.at("ppl_mean").get<double>();
    m.ppl_count = j.at("ppl_count").get<std::size_t>();
}

struct UtilityMetrics {
    bool authorized = true;
    std::map<std::string, RoleMetrics> per_role;
    friend bool operator==(const UtilityMetrics &, const UtilityMetrics &) = default;
};

inline void to_json(nlohmann::json & j, const UtilityMetrics & u) {
    j = nlohmann::json{{"authorized", u.authorized}, {"per_role", u.per_role}};
}
inline void from_json(const nlohmann::json & j, UtilityMetrics & u) {
    u.authorized = j.at("authorized").get<bool>();
    u.per_role = j.at("per_role").get<std::map<std::string, RoleMetrics>>();
}

struct UnlockMatrix {
    std::vector<std::string> roles; // rows: prompt roles
    std::vector<std::string> keys;  // columns: presented keys (by role)
    std::vector<std::vector<Tally>> cells;
    std::size_t n_nonces = 0;

    const Tally & at(std::size_t r, std::size_t c) const { return cells.at(r).at(c); }
    friend bool operator==(const UnlockMatrix &, const UnlockMatrix &) = default;
};

inline void to_json(nlohmann::json & j, const UnlockMatrix & m) {
    j = nlohmann::json{{"roles", m.roles}, {"keys", m.keys}, {"cells", m.cells}, {"n_nonces", m.n_nonces}};
}
inline void from_json(const nlohmann::json & j, UnlockMatrix & m) {
    m.roles = j.at("roles").get<std::vector<std::string>>();
    m.keys = j.at("keys").get<std::vector<std::string>>();
    m.cells = j.at("cells").get<std::vector<std::vector<Tally>>>();
    m.n_nonces = j.at("n_nonces").get<std::size_t>();
}

struct ThroughputRow {
    std::string mode; // base | static | session
    std::size_t tokens = 0;
    double median_s = 0.0;
    double best_s = 0.0;        // fastest repeat; tokens_per_sec is based on it
    double tokens_per_sec = 0.0;
    double delta_vs_base = 0.0; // relative change in tokens/sec
    std::vector<double> repeat_s;
    friend bool operator==(const ThroughputRow &, const ThroughputRow &) = default;
};

inline void to_json(nlohmann::json & j, const ThroughputRow & r) {
    j = nlohmann::json{{"mode", r.mode},
                       {"tokens", r.tokens},
                       {"median_s", r.median_s},
                       {"best_s", r.best_s},
                       {"tokens_per_sec", r.tokens_per_sec},
                       {"delta_vs_base", r.delta_vs_base},
                       {"repeat_s", r.repeat_s}};
}
inline void from_json(const nlohmann::json & j, ThroughputRow & r) {
    r.mode = j.at("mode").get<std::string>();
    r.tokens = j.at("tokens").get<std::size_t>();
    r.median_s = j.at("median_s").get<double>();
    r.best_s = j.at("best_s").get<double>();
    r.tokens_per_sec = j.at("tokens_per_sec").get<double>();
    r.delta_vs_base = j.at("delta_vs_base").get<double>();
    r.repeat_s = j.at("repeat_s").get<std::vector<double>>();
}

struct ScalingPoint {
    std::size_t s = 0, h = 0, k = 0;
    double seconds = 0.0;

    double work() const noexcept { return double(s) * double(h) * double(k + 2); }
    friend bool operator==(const ScalingPoint &, const ScalingPoint &) = default;
};

inline void to_json(nlohmann::json & j, const ScalingPoint & p) {
    j = nlohmann::json{{"S", p.s}, {"H", p.h}, {"k", p.k}, {"seconds", p.seconds}};
}
inline void from_json(const nlohmann::json & j, ScalingPoint & p) {
    p.s = j.at("S").get<std::size_t>();
    p.h = j.at("H").get<std::size_t>();
    p.k = j.at("k").get<std::size_t>();
    p.seconds = j.at("seconds").get<double>();
}

struct LinearFit {
    double intercept = 0.0;
    double slope = 0.0;
    double r2 = 0.0;
    friend bool operator==(const LinearFit &, const LinearFit &) = default;
};

inline void to_json(nlohmann::json & j, const LinearFit & f) {
    j = nlohmann::json{{"intercept", f.intercept}, {"slope", f.slope}, {"r2", f.r2}};
}
inline void from_json(const nlohmann::json & j, LinearFit & f) {
    f.intercept = j.at("intercept").get<double>();
    f.slope = j.at("slope").get<double>();
    f.r2 = j.at("r2").get<double>();
}

struct ThroughputTable {
    std::vector<ThroughputRow> rows;
    std::string prompt_set_hash;
    std::size_t prompts = 0;
    std::size_t max_new = 0;
    std::size_t warmups = 0;
    std::size_t repeats = 0;
    std::vector<ScalingPoint> scaling;
    std::optional<LinearFit> scaling_fit;

    const ThroughputRow * row(std::string_view mode) const {
        for (const auto & r : rows) {
            if (r.mode == mode) {
                return &r;
            }
        }
        return nullptr;
    }
    friend bool operator==(const ThroughputTable &, const ThroughputTable &) = default;
};

inline void to_json(nlohmann::json & j, const ThroughputTable & t) {
    j = nlohmann::json{{"rows", t.rows},       {"prompt_set_hash", t.prompt_set_hash},
                       {"prompts", t.prompts}, {"max_new", t.max_new},
                       {"warmups", t.warmups}, {"repeats", t.repeats},
                       {"scaling", t.scaling}, {"scaling_fit", t.scaling_fit ? nlohmann::json(*t.scaling_fit) : nlohmann::json()}};
}
inline void from_json(const nlohmann::json & j, ThroughputTable & t) {
    t.rows = j.at("rows").get<std::vector<ThroughputRow>>();
    t.prompt_set_hash = j.at("prompt_set_hash").get<std::string>();
    t.prompts = j.at("prompts").get<std::size_t>();
    t.max_new = j.at("max_new").get<std::size_t>();
    t.warmups = j.at("warmups").get<std::size_t>();
    t.repeats = j.at("repeats").get<std::size_t>();
    t.scaling = j.at("scaling").get<std::vector<ScalingPoint>>();
    if (!j.at("scaling_fit").is_null()) {
        t.scaling_fit = j.at("scaling_fit").get<LinearFit>();
    }
}

struct EvalReport {
    int schema_version = kReportSchemaVersion;
    std::optional<UtilityMetrics> authorized;
    std::optional<UtilityMetrics> unauthorized;
    std::optional<double> base_ppl; // untrained-model reference for the PPL ratio
    std::optional<UnlockMatrix> unlock;
    std::optional<Tally> nonce_invariance;
    std::optional<Tally> block_suppression;
    std::optional<ThroughputTable> throughput;
    std::string config_hash;
    std::string provenance;
    friend bool operator==(const EvalReport &, const EvalReport &) = default;
};

namespace detail {

template <typename T>
nlohmann::json opt_json(const std::optional<T> & v) {
    return v ? nlohmann::json(*v) : nlohmann::json();
}

template <typename T>
std::optional<T> opt_get(const nlohmann::json & j, const char * key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).get<T>();
}

} // namespace detail

inline void to_json(nlohmann::json & j, const EvalReport & r) {
    j = nlohmann::json{{"schema_version", r.schema_version},
                       {"authorized", detail::opt_json(r.authorized)},
                       {"unauthorized", detail::opt_json(r.unauthorized)},
                       {"base_ppl", detail::opt_json(r.base_ppl)},
                       {"unlock", detail::opt_json(r.unlock)},
                       {"nonce_invariance", detail::opt_json(r.nonce_invariance)},
                       {"block_suppression", detail::opt_json(r.block_suppression)},
                       {"throughput", detail::opt_json(r.throughput)},
                       {"config_hash", r.config_hash},
                       {"provenance", r.provenance}};
}

inline void from_json(const nlohmann::json & j, EvalReport & r) {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
        throw ValidationError("unsupported report schema version " + std::to_string(r.schema_version));
    }
    r.authorized = detail::opt_get<UtilityMetrics>(j, "authorized");
    r.unauthorized = detail::opt_get<UtilityMetrics>(j, "unauthorized");
    r.base_ppl = detail::opt_get<double>(j, "base_ppl");
    r.unlock = detail::opt_get<UnlockMatrix>(j, "unlock");
    r.nonce_invariance = detail::opt_get<Tally>(j, "nonce_invariance");
    r.block_suppression = detail::opt_get<Tally>(j, "block_suppression");
    r.throughput = detail::opt_get<ThroughputTable>(j, "throughput");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.provenance = j.at("provenance").get<std::string>();
}

/// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_ws(std::string_view s) {
    std::string out;
    bool pending = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending = !out.empty();
            continue;
        }
        if (pending) {
            out.push_back(' ');
            pending = false;
        }
        out.push_back(c);
    }
    return out;
}

/// Task-oracle match: the normalized answer occurs in the normalized output.
inline bool oracle_match(std::string_view output, std::string_view target) {
    const std::string t = normalize_ws(target);
    return !t.empty() && normalize_ws(output).find(t) != std::string::npos;
}

struct EvalOptions {
    std::size_t max_new = 24;
    uint64_t nonce_seed = 7;
};

/// Exact-match accuracy per role plus mean gated perplexity of each held-out
/// example's authorized serialization. `authorized` selects which decision
/// path (role supplied by the service layer, or no key at all) is measured.
inline UtilityMetrics utility_eval(const Model & model, const Gate & gate, const std::vector<TaskExample> & testset,
                                   bool authorized, const EvalOptions & opts = {}) {
    if (testset.empty()) {
        throw ValidationError("utility_eval: empty test set");
    }
    UtilityMetrics out;
    out.authorized = authorized;
    const NonceSource nonces = seeded_nonces(opts.nonce_seed);
    std::map<std::string, double> ppl_sum;
    for (const auto & ex : testset) {
        const std::optional<std::string> role = authorized ? std::optional<std::string>(ex.role) : std::nullopt;
        GateGenerateOptions go;
        go.max_new = opts.max_new;
        const GateResult r = gate.generate(model, ex.prompt, std::nullopt, role, nonces(), go);
        RoleMetrics & m = out.per_role[ex.role];
        m.exact.den += 1;
        if (!r.blocked && oracle_match(r.text, ex.target)) {
            m.exact.num += 1;
        }
        const auto tokens = encode_with_eos(serialize_auth(ex, gate.registry()).text);
        const GateDecision d = gate.decide(ex.prompt, std::nullopt, role, nonces());
        ppl_sum[ex.role] += gate.perplexity(model, tokens, d);
        m.ppl_count += 1;
    }
    for (auto & [role, m] : out.per_role) {
        m.ppl_mean = ppl_sum[role] / double(m.ppl_count);
    }
    return out;
}

/// Mean identity-hook perplexity of the authorized serializations; used to
/// report a base (for example untrained) model next to the gated ones.
inline double base_perplexity(const Model & model, const RoleKeyRegistry & registry,
                              const std::vector<TaskExample> & testset) {
    if (testset.empty()) {
        throw ValidationError("base_perplexity: empty test set");
    }
    double sum = 0.0;
    for (const auto & ex : testset) {
        sum += perplexity(model, encode_with_eos(serialize_auth(ex, registry).text));
    }
    return sum / double(testset.size());
}

/// Cell (r, c): fraction of role-r prompts that, presented with role c's key,
/// are unlocked in a majority of nonces. Unlocked means not blocked,
/// non-empty after trimming, and correct under the role-r task oracle.
inline UnlockMatrix unlock_matrix(const Model & model, const Gate & gate,
                                  const std::map<std::string, std::vector<TaskExample>> & prompts_by_role,
                                  const std::vector<std::string> & key_roles, std::size_t n_nonces,
                                  const EvalOptions & opts = {}) {
    if (n_nonces == 0 || n_nonces % 2 == 0) {
        throw ConfigError("unlock_matrix: the nonce count must be odd");
    }
    UnlockMatrix m;
    m.n_nonces = n_nonces;
    m.keys = key_roles;
    const NonceSource nonces = seeded_nonces(opts.nonce_seed);
    for (const auto & [role, prompts] : prompts_by_role) {
        m.roles.push_back(role);
        std::vector<Tally> row;
        for (const auto & key_role : key_roles) {
            const std::string & key = gate.registry().key_for(key_role);
            Tally cell;
            for (const auto & ex : prompts) {
                std::size_t wins = 0;
                for (std::size_t n = 0; n < n_nonces; ++n) {
                    GateGenerateOptions go;
                    go.max_new = opts.max_new;
                    const GateResult r = gate.generate(model, ex.prompt, key, std::nullopt, nonces(), go);
                    if (!r.blocked && !normalize_ws(r.text).empty() && oracle_match(r.text, ex.target)) {
                        ++wins;
                    }
                }
                cell.den += 1;
                if (2 * wins > n_nonces) {
                    cell.num += 1;
                }
            }
            row.push_back(cell);
        }
        m.cells.push_back(std::move(row));
    }
    return m;
}

/// Prompts whose greedy authorized output is byte-identical across all the
/// given nonces.
inline Tally nonce_invariance(const Model & model, const Gate & gate, const std::vector<TaskExample> & prompts,
                              const std::vector<Nonce> & nonces, std::size_t max_new = 24) {
    if (nonces.size() < 2) {
        throw ConfigError("nonce_invariance: at least two nonces are required");
    }
    Tally t;
    for (const auto & ex : prompts) {
        std::optional<std::string> first;
        bool same = true;
        for (const auto & n : nonces) {
            GateGenerateOptions go;
            go.max_new = max_new;
            go.mode = DecodeMode::greedy;
            const GateResult r = gate.generate(model, ex.prompt, std::nullopt, ex.role, n, go);
            if (!first) {
                first = r.text;
            } else if (r.text != *first) {
                same = false;
            }
        }
        t.den += 1;
        if (same) {
            t.num += 1;
        }
    }
    return t;
}

inline Tally nonce_invariance(const Model & model, const Gate & gate, const std::vector<TaskExample> & prompts,
                              std::size_t n_nonces, const EvalOptions & opts = {}) {
    const NonceSource src = seeded_nonces(opts.nonce_seed);
    std::vector<Nonce> nonces;
    for (std::size_t i = 0; i < n_nonces; ++i) {
        nonces.push_back(src());
    }
    return nonce_invariance(model, gate, prompts, nonces, opts.max_new);
}

inline bool contains_banned_variant(std::string_view text, std::string_view marker) {
    for (const auto & v : build_banned_variants(marker)) {
        if (text.find(v) != std::string_view::npos) {
            return true;
        }
    }
    return false;
}

/// Authorized outputs that contain any banned variant of the block marker.
/// Prompts without a role (unauthorized requests) are not counted.
inline Tally block_suppression(const Model & model, const Gate & gate, const std::vector<TaskExample> & prompts,
                               const EvalOptions & opts = {}) {
    const NonceSource nonces = seeded_nonces(opts.nonce_seed);
    Tally t;
    for (const auto & ex : prompts) {
        if (ex.role.empty()) {
            continue;
        }
        GateGenerateOptions go;
        go.max_new = opts.max_new;
        const GateResult r = gate.generate(model, ex.prompt, std::nullopt, ex.role, nonces(), go);
        t.den += 1;
        if (contains_banned_variant(r.text, gate.config().block_marker)) {
            t.num += 1;
        }
    }
    return t;
}

inline std::string prompt_set_hash(const std::vector<TaskExample> & prompts) {
    Sha256 h;
    for (const auto & ex : prompts) {
        h.write(std::string_view(ex.role)).write(std::string_view("\x1f")).write(std::string_view(ex.prompt));
        h.write(std::string_view("\x1e"));
    }
    return to_hex(h.finalize());
}

struct ThroughputOptions {
    std::size_t max_new = 32;
    std::size_t warmups = 2;
    std::size_t repeats = 5;
    uint64_t nonce_seed = 11;
};

/// Fixed-length greedy decoding of authorized prompts with no hook, the
/// static-mode gate and the session-mode gate. Repeats interleave the three
/// modes, rotating their order, so drift in machine load affects them alike.
/// Rates use the fastest repeat: interference only ever adds time.
inline ThroughputTable throughput_bench(const Model & model, const Gate & static_gate, const Gate & session_gate,
                                        const std::vector<TaskExample> & prompts, const ThroughputOptions & opts = {}) {
    if (prompts.empty() || opts.max_new == 0 || opts.repeats == 0) {
        throw ValidationError("throughput_bench: needs prompts, max_new > 0 and at least one repeat");
    }
    using clock = std::chrono::steady_clock;
    const NonceSource nonces = seeded_nonces(opts.nonce_seed);
    const char * modes[3] = {"base", "static", "session"};

    auto run = [&](int mode, std::size_t & tokens) {
        tokens = 0;
        const auto t0 = clock::now();
        for (const auto & ex : prompts) {
            if (mode == 0) {
                const auto input = encode(auth_prompt_prefix(session_gate.registry().key_for(ex.role), ex.prompt));
                GenerateOptions go;
                go.max_new = opts.max_new;
                go.stop_at_eos = false;
                go.banned = &session_gate.banned();
                tokens += generate(model, input, go).tokens.size();
            } else {
                const Gate & g = mode == 1 ? static_gate : session_gate;
                GateGenerateOptions go;
                go.max_new = opts.max_new;
                go.stop_at_eos = false;
                tokens += g.generate(model, ex.prompt, std::nullopt, ex.role, nonces(), go).tokens_generated;
            }
        }
        return std::chrono::duration<double>(clock::now() - t0).count();
    };

    ThroughputTable table;
    table.prompt_set_hash = prompt_set_hash(prompts);
    table.prompts = prompts.size();
    table.max_new = opts.max_new;
    table.warmups = opts.warmups;
    table.repeats = opts.repeats;
    std::vector<std::vector<double>> times(3);
    std::vector<std::size_t> tokens(3, 0);
    for (std::size_t i = 0; i < opts.warmups + opts.repeats; ++i) {
        for (int j = 0; j < 3; ++j) {
            const int mode = int((i + std::size_t(j)) % 3);
            std::size_t n = 0;
            const double s = run(mode, n);
            if (i >= opts.warmups) {
                times[std::size_t(mode)].push_back(s);
                tokens[std::size_t(mode)] = n;
            }
        }
    }
    for (int mode = 0; mode < 3; ++mode) {
        if (tokens[std::size_t(mode)] == 0) {
            throw ValidationError("throughput_bench: no tokens generated");
        }
        ThroughputRow row;
        row.mode = modes[mode];
        row.tokens = tokens[std::size_t(mode)];
        row.repeat_s = times[std::size_t(mode)];
        std::vector<double> sorted = row.repeat_s;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        row.median_s = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        row.best_s = sorted.front();
        row.tokens_per_sec = double(row.tokens) / row.best_s;
        table.rows.push_back(row);
    }
    for (auto & r : table.rows) {
        r.delta_vs_base = r.tokens_per_sec / table.rows[0].tokens_per_sec - 1.0;
    }
    return table;
}

/// Ordinary least squares fit of y on x with its coefficient of
/// determination.
inline LinearFit fit_line(const std::vector<double> & x, const std::vector<double> & y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("fit_line: need at least two paired points");
    }
    const double n = double(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    LinearFit f;
    f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    double sse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = y[i] - (f.intercept + f.slope * x[i]);
        sse += e * e;
    }
    f.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
    return f;
}

struct ScalingOptions {
    std::vector<std::size_t> seq_lens{32, 64, 128, 256};
    std::vector<std::size_t> hidden{32, 64, 128};
    std::vector<std::size_t> k{1, 3, 6};
    std::size_t repeats = 7;
    uint64_t seed = 3;
};

/// Times one session-transform application (forward) across an (S, H, k)
/// grid, taking the fastest of several repeats per point, and fits time
/// against S * H * (k + 2).
inline std::pair<std::vector<ScalingPoint>, LinearFit> transform_scaling(const ScalingOptions & opts = {}) {
    using clock = std::chrono::steady_clock;
    detail::keep_large_buffers_on_heap();
    std::vector<ScalingPoint> pts;
    SeedStream rng = SeedStream::from_u64(opts.seed, "kotg/scaling");
    const ServerSecret secret(std::string_view("scaling-benchmark-secret"));
    for (std::size_t h : opts.hidden) {
        for (std::size_t k : opts.k) {
            const Nonce nonce{};
            const SessionTransform t = derive_transform(hmac_seed(secret, "bench", nonce), h, k);
            for (std::size_t s : opts.seq_lens) {
                HiddenMatrix x(s, h);
                for (auto & v : x.values()) {
                    v = float(rng.gaussian());
                }
                // Scale the inner loop so every point runs long enough to time.
                const std::size_t inner = std::max<std::size_t>(1, std::size_t(2e6 / (double(s) * double(h) * double(k + 2))));
                double best = 1e30;
                volatile float sink = 0.0f;
                for (std::size_t r = 0; r < opts.repeats; ++r) {
                    const auto t0 = clock::now();
                    for (std::size_t i = 0; i < inner; ++i) {
                        const HiddenMatrix y = apply_forward(x, t);
                        sink = sink + y(0, 0);
                    }
                    best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count() / double(inner));
                }
                pts.push_back(ScalingPoint{s, h, k, best});
            }
        }
    }
    std::vector<double> xs, ys;
    for (const auto & p : pts) {
        xs.push_back(p.work());
        ys.push_back(p.seconds);
    }
    return {pts, fit_line(xs, ys)};
}

inline std::string provenance_string() {
#ifdef KOTG_GIT_REV
    return std::string("kotg 0.1.0 (git ") + KOTG_GIT_REV + ")";
#else
    return "kotg 0.1.0 (git unknown)";
#endif
}

namespace detail {

inline std::string fmt(const char * f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

inline std::string tally_str(const Tally & t) {
    return std::to_string(t.num) + "/" + std::to_string(t.den) + " (" + fmt("%.3f", t.fraction()) + ")";
}

inline std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) {
        s.append(w - s.size(), ' ');
    }
    return s;
}

} // namespace detail

inline constexpr std::string_view kNotRun = "not run";

/// Plain-text rendering: utility, unlock matrix (role rows, key columns),
/// nonce invariance and block suppression, throughput.
inline std::string render_text(const EvalReport & r) {
    std::ostringstream o;
    o << "KOTG evaluation report (schema " << r.schema_version << ")\n";
    o << "provenance: " << r.provenance << "\n";
    o << "config hash: " << r.config_hash << "\n\n";

    o << "== Utility (exact match, gated PPL) ==\n";
    if (!r.authorized && !r.unauthorized) {
        o << kNotRun << "\n";
    } else {
        std::vector<std::string> roles;
        for (const auto * u : {&r.authorized, &r.unauthorized}) {
            if (*u) {
                for (const auto & [role, _] : (*u)->per_role) {
                    if (std::find(roles.begin(), roles.end(), role) == roles.end()) {
                        roles.push_back(role);
                    }
                }
            }
        }
        o << detail::pad("role", 10) << detail::pad("auth acc", 22) << detail::pad("auth PPL", 12)
          << detail::pad("unauth acc", 22) << "unauth PPL\n";
        for (const auto & role : roles) {
            auto cell = [&](const std::optional<UtilityMetrics> & u, bool acc) -> std::string {
                if (!u) {
                    return std::string(kNotRun);
                }
                auto it = u->per_role.find(role);
                if (it == u->per_role.end()) {
                    return std::string(kNotRun);
                }
                return acc ? detail::tally_str(it->second.exact) : detail::fmt("%.3f", it->second.ppl_mean);
            };
            o << detail::pad(role, 10) << detail::pad(cell(r.authorized, true), 22)
              << detail::pad(cell(r.authorized, false), 12) << detail::pad(cell(r.unauthorized, true), 22)
              << cell(r.unauthorized, false) << "\n";
        }
        if (r.base_ppl) {
            o << "base PPL: " << detail::fmt("%.3f", *r.base_ppl) << "\n";
        }
    }

    o << "\n== Unlock matrix (majority over nonces) ==\n";
    if (!r.unlock) {
        o << kNotRun << "\n";
    } else {
        o << detail::pad("Role\\Key", 10);
        for (const auto & k : r.unlock->keys) {
            o << detail::pad(k, 20);
        }
        o << "\n";
        for (std::size_t i = 0; i < r.unlock->roles.size(); ++i) {
            o << detail::pad(r.unlock->roles[i], 10);
            for (std::size_t j = 0; j < r.unlock->keys.size(); ++j) {
                o << detail::pad(detail::tally_str(r.unlock->at(i, j)), 20);
            }
            o << "\n";
        }
        o << "nonces per prompt: " << r.unlock->n_nonces << "\n";
    }

    o << "\n== Nonce invariance and block suppression ==\n";
    o << "nonce invariance (byte-identical prompts): "
      << (r.nonce_invariance ? detail::tally_str(*r.nonce_invariance) : std::string(kNotRun)) << "\n";
    o << "outputs containing a banned variant: "
      << (r.block_suppression ? detail::tally_str(*r.block_suppression) : std::string(kNotRun)) << "\n";

    o << "\n== Throughput (greedy, median of repeats) ==\n";
    if (!r.throughput) {
        o << kNotRun << "\n";
    } else {
        const auto & t = *r.throughput;
        o << "prompts: " << t.prompts << ", max_new: " << t.max_new << ", warm-ups: " << t.warmups
          << ", repeats: " << t.repeats << "\nprompt set hash: " << t.prompt_set_hash << "\n";
        o << detail::pad("mode", 10) << detail::pad("tokens", 10) << detail::pad("median s", 12) << detail::pad("best s", 12)
          << detail::pad("tok/s", 12) << "delta vs base\n";
        for (const auto & row : t.rows) {
            o << detail::pad(row.mode, 10) << detail::pad(std::to_string(row.tokens), 10)
              << detail::pad(detail::fmt("%.4f", row.median_s), 12)
              << detail::pad(detail::fmt("%.4f", row.best_s), 12) << detail::pad(detail::fmt("%.1f", row.tokens_per_sec), 12)
              << detail::fmt("%+.1f%%", 100.0 * row.delta_vs_base) << "\n";
        }
        if (t.scaling_fit) {
            o << "transform cost vs S*H*(k+2): slope " << detail::fmt("%.3e", t.scaling_fit->slope) << " s/unit, R^2 "
              << detail::fmt("%.4f", t.scaling_fit->r2) << " over " << t.scaling.size() << " points\n";
        }
    }
    return o.str();
}

/// Writes <dir>/report.json and <dir>/report.txt.
inline void render_report(const EvalReport & r, const std::string & dir) {
    const std::string jp = dir + "/report.json";
    const std::string tp = dir + "/report.txt";
    std::ofstream j(jp);
    std::ofstream t(tp);
    if (!j || !t) {
        throw IoError("cannot write report files under '" + dir + "'");
    }
    j << nlohmann::json(r).dump(2) << "\n";
    t << render_text(r);
    if (!j || !t) {
        throw IoError("writing report files under '" + dir + "' failed");
    }
}

inline EvalReport load_report(const std::string & path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open report '" + path + "'");
    }
    try {
        return nlohmann::json::parse(f).get<EvalReport>();
    } catch (const nlohmann::json::exception & e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
}

} // namespace kotg
