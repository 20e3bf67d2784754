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

// Pipeline commands behind the `kotg` CLI. Configuration is one JSON file;
// the server secret is read from LOCK_SERVER_SECRET only.

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/checkpoint.hpp"
#include "kotg/corpus.hpp"
#include "kotg/errors.hpp"
#include "kotg/eval.hpp"
#include "kotg/gate.hpp"
#include "kotg/keying.hpp"
#include "kotg/model.hpp"
#include "kotg/service.hpp"
#include "kotg/train.hpp"

namespace kotg {

struct PathsConfig {
    std::string corpus = "artifacts/corpus.jsonl";
    std::string checkpoint = "artifacts/model.ckpt";
    std::string registry; // empty: built-in default registry
    std::string report_dir = "artifacts/report";
    std::string metrics = "artifacts/train_metrics.jsonl";

    friend bool operator==(const PathsConfig &, const PathsConfig &) = default;
};

struct CorpusConfig {
    std::size_t n_per_role = 2000;
    uint64_t seed = 1;
    uint64_t shuffle_seed = 0;

    friend bool operator==(const CorpusConfig &, const CorpusConfig &) = default;
};

struct EvalConfig {
    std::size_t heldout_per_role = 30;
    uint64_t heldout_seed = 99;
    std::size_t unlock_prompts_per_role = 20;
    std::size_t unlock_nonces = 5;
    std::size_t nonce_prompts = 6;
    std::size_t nonce_count = 5;
    std::size_t block_prompts = 6;
    std::size_t max_new = 24;
    uint64_t nonce_seed = 7;
    std::size_t throughput_prompts = 6;
    std::size_t throughput_max_new = 32;
    std::size_t throughput_warmups = 2;
    std::size_t throughput_repeats = 5;

    friend bool operator==(const EvalConfig &, const EvalConfig &) = default;
};

struct AppConfig {
    PathsConfig paths;
    CorpusConfig corpus;
    ModelConfig model;
    TrainConfig train;
    GateConfig gate;
    EvalConfig eval;
    ServiceConfig service;

    void validate() const {
        model.validate();
        train.validate();
        gate.validate();
        service.validate();
        if (corpus.n_per_role == 0) {
            throw ConfigError("corpus.n_per_role must be at least 1");
        }
        if (eval.unlock_nonces % 2 == 0) {
            throw ConfigError("eval.unlock_nonces must be odd");
        }
        if (eval.nonce_count < 2) {
            throw ConfigError("eval.nonce_count must be at least 2");
        }
    }

    friend bool operator==(const AppConfig &, const AppConfig &) = default;
};

inline void to_json(nlohmann::json & j, const PathsConfig & p) {
    j = nlohmann::json{{"corpus", p.corpus},
                       {"checkpoint", p.checkpoint},
                       {"registry", p.registry},
                       {"report_dir", p.report_dir},
                       {"metrics", p.metrics}};
}
inline void from_json(const nlohmann::json & j, PathsConfig & p) {
    PathsConfig d;
    p.corpus = j.value("corpus", d.corpus);
    p.checkpoint = j.value("checkpoint", d.checkpoint);
    p.registry = j.value("registry", d.registry);
    p.report_dir = j.value("report_dir", d.report_dir);
    p.metrics = j.value("metrics", d.metrics);
}

inline void to_json(nlohmann::json & j, const CorpusConfig & c) {
    j = nlohmann::json{{"n_per_role", c.n_per_role}, {"seed", c.seed}, {"shuffle_seed", c.shuffle_seed}};
}
inline void from_json(const nlohmann::json & j, CorpusConfig & c) {
    CorpusConfig d;
    c.n_per_role = j.value("n_per_role", d.n_per_role);
    c.seed = j.value("seed", d.seed);
    c.shuffle_seed = j.value("shuffle_seed", d.shuffle_seed);
}

inline void to_json(nlohmann::json & j, const EvalConfig & c) {
    j = nlohmann::json{{"heldout_per_role", c.heldout_per_role},
                       {"heldout_seed", c.heldout_seed},
                       {"unlock_prompts_per_role", c.unlock_prompts_per_role},
                       {"unlock_nonces", c.unlock_nonces},
                       {"nonce_prompts", c.nonce_prompts},
                       {"nonce_count", c.nonce_count},
                       {"block_prompts", c.block_prompts},
                       {"max_new", c.max_new},
                       {"nonce_seed", c.nonce_seed},
                       {"throughput_prompts", c.throughput_prompts},
                       {"throughput_max_new", c.throughput_max_new},
                       {"throughput_warmups", c.throughput_warmups},
                       {"throughput_repeats", c.throughput_repeats}};
}
inline void from_json(const nlohmann::json & j, EvalConfig & c) {
    EvalConfig d;
    c.heldout_per_role = j.value("heldout_per_role", d.heldout_per_role);
    c.heldout_seed = j.value("heldout_seed", d.heldout_seed);
    c.unlock_prompts_per_role = j.value("unlock_prompts_per_role", d.unlock_prompts_per_role);
    c.unlock_nonces = j.value("unlock_nonces", d.unlock_nonces);
    c.nonce_prompts = j.value("nonce_prompts", d.nonce_prompts);
    c.nonce_count = j.value("nonce_count", d.nonce_count);
    c.block_prompts = j.value("block_prompts", d.block_prompts);
    c.max_new = j.value("max_new", d.max_new);
    c.nonce_seed = j.value("nonce_seed", d.nonce_seed);
    c.throughput_prompts = j.value("throughput_prompts", d.throughput_prompts);
    c.throughput_max_new = j.value("throughput_max_new", d.throughput_max_new);
    c.throughput_warmups = j.value("throughput_warmups", d.throughput_warmups);
    c.throughput_repeats = j.value("throughput_repeats", d.throughput_repeats);
}

inline void to_json(nlohmann::json & j, const AppConfig & c) {
    j = nlohmann::json{{"paths", c.paths}, {"corpus", c.corpus}, {"model", c.model},     {"train", c.train},
                       {"gate", c.gate},   {"eval", c.eval},     {"service", c.service}};
}

namespace detail {

inline void reject_secret_fields(const nlohmann::json & j, const std::string & where) {
    if (j.is_object()) {
        for (const auto & [k, v] : j.items()) {
            const std::string lk = lower(k);
            if (lk.find("secret") != std::string::npos) {
                throw ConfigError("config field '" + where + k + "' is not allowed: the server secret is read from " +
                                  kSecretEnvVar + " only");
            }
            reject_secret_fields(v, where + k + ".");
        }
    }
}

inline void reject_unknown(const nlohmann::json & j, const std::set<std::string> & allowed, const std::string & where) {
    if (!j.is_object()) {
        throw ConfigError("config section '" + where + "' must be an object");
    }
    for (const auto & [k, _] : j.items()) {
        if (!allowed.count(k)) {
            throw ConfigError("unknown config field '" + where + (where.empty() ? "" : ".") + k + "'");
        }
    }
}

template <typename T>
std::set<std::string> field_names(const T & defaults) {
    std::set<std::string> out;
    const nlohmann::json j = defaults;
    for (const auto & [k, _] : j.items()) {
        out.insert(k);
    }
    return out;
}

} // namespace detail

inline AppConfig app_config_from_json(const nlohmann::json & j) {
    detail::reject_secret_fields(j, "");
    const AppConfig d;
    detail::reject_unknown(j, detail::field_names(d), "");
    AppConfig c;
    try {
        auto section = [&](const char * name, auto & target, const auto & defaults) {
            if (j.contains(name)) {
                detail::reject_unknown(j.at(name), detail::field_names(defaults), name);
                j.at(name).get_to(target);
            }
        };
        section("paths", c.paths, d.paths);
        section("corpus", c.corpus, d.corpus);
        section("model", c.model, d.model);
        section("train", c.train, d.train);
        section("gate", c.gate, d.gate);
        section("eval", c.eval, d.eval);
        section("service", c.service, d.service);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    c.validate();
    return c;
}

inline AppConfig load_app_config(const std::string & path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open config '" + path + "'");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return app_config_from_json(j);
}

inline std::string app_config_hash(const AppConfig & c) { return config_hash(nlohmann::json(c)); }

inline RoleKeyRegistry app_registry(const AppConfig & c) {
    RoleKeyRegistry r = c.paths.registry.empty() ? RoleKeyRegistry::defaults() : load_registry(c.paths.registry);
    require_valid(r);
    return r;
}

namespace detail {

inline void ensure_parent(const std::string & path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(parent, ec);
        if (ec) {
            throw IoError("cannot create directory '" + parent.string() + "'");
        }
    }
}

} // namespace detail

struct CorpusSummary {
    std::size_t records = 0;
    std::map<std::pair<std::string, std::string>, std::size_t> histogram;
    std::string hash;
};

inline nlohmann::json summary_json(const CorpusSummary & s) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto & [k, n] : s.histogram) {
        h[k.first][k.second] = n;
    }
    return nlohmann::json{{"records", s.records}, {"by_role_path", h}, {"corpus_hash", s.hash}};
}

inline CorpusSummary cmd_build_corpus(const AppConfig & c) {
    const RoleKeyRegistry reg = app_registry(c);
    const auto dataset = synth_dataset(c.corpus.n_per_role, c.corpus.seed);
    const auto records = build_corpus(dataset, reg, c.corpus.shuffle_seed);
    detail::ensure_parent(c.paths.corpus);
    write_corpus(c.paths.corpus, records);
    return CorpusSummary{records.size(), corpus_histogram(records), corpus_hash(records)};
}

/// Static-mode gate over the configured registry; carries T_pub and needs no
/// secret.
inline Gate training_gate(const AppConfig & c, const RoleKeyRegistry & reg) {
    GateConfig g = c.gate;
    g.mode = RuntimeMode::static_map;
    return Gate(g, reg, std::nullopt, std::size_t(c.model.hidden));
}

inline Checkpoint cmd_train(const AppConfig & c, bool resume, std::ostream * progress = nullptr) {
    const RoleKeyRegistry reg = app_registry(c);
    const auto corpus = read_corpus(c.paths.corpus);
    std::optional<Checkpoint> from;
    if (resume) {
        from = load_checkpoint(c.paths.checkpoint);
    }
    detail::ensure_parent(c.paths.metrics);
    std::ofstream metrics(c.paths.metrics, resume ? std::ios::app : std::ios::trunc);
    if (!metrics) {
        throw IoError("cannot open metrics log '" + c.paths.metrics + "'");
    }
    const Gate gate = training_gate(c, reg);
    const MetricsSink sink = [&](const nlohmann::json & j) {
        metrics << j.dump() << '\n' << std::flush;
        if (progress != nullptr) {
            *progress << j.dump() << '\n' << std::flush;
        }
    };
    Checkpoint ck = train(corpus, c.model, c.train, gate.training_policy(), std::move(from), sink);
    detail::ensure_parent(c.paths.checkpoint);
    save_checkpoint(ck, c.paths.checkpoint);
    return ck;
}

inline Model load_model(const AppConfig & c) {
    Checkpoint ck = load_checkpoint(c.paths.checkpoint);
    if (ck.config.hidden != c.model.hidden) {
        throw ConfigError("checkpoint hidden size differs from the configured model");
    }
    return Model(ck.config, std::move(ck.params));
}

inline Gate runtime_gate(const AppConfig & c, const RoleKeyRegistry & reg, RuntimeMode mode) {
    GateConfig g = c.gate;
    g.mode = mode;
    std::optional<ServerSecret> secret = ServerSecret::from_env();
    return Gate(g, reg, std::move(secret), std::size_t(c.model.hidden));
}

inline const std::vector<std::string> & eval_sections() {
    static const std::vector<std::string> s{"utility", "unauth", "unlock", "nonce", "block", "throughput"};
    return s;
}

/// Held-out examples: prompts never seen in the training dataset.
inline std::vector<TaskExample> heldout_set(const AppConfig & c, std::size_t n_per_role, uint64_t seed) {
    std::unordered_set<std::string> seen;
    for (const auto & ex : synth_dataset(c.corpus.n_per_role, c.corpus.seed)) {
        seen.insert(ex.prompt);
    }
    return synth_heldout(n_per_role, seed, seen);
}

inline std::map<std::string, std::vector<TaskExample>> by_role(const std::vector<TaskExample> & xs,
                                                               std::size_t per_role) {
    std::map<std::string, std::vector<TaskExample>> out;
    for (const auto & ex : xs) {
        auto & v = out[ex.role];
        if (v.size() < per_role) {
            v.push_back(ex);
        }
    }
    return out;
}

/// First `n` examples taken round-robin across roles.
inline std::vector<TaskExample> round_robin(const std::vector<TaskExample> & xs, std::size_t n) {
    auto groups = by_role(xs, xs.size());
    std::vector<TaskExample> out;
    for (std::size_t i = 0; out.size() < n; ++i) {
        bool any = false;
        for (auto & [_, v] : groups) {
            if (i < v.size() && out.size() < n) {
                out.push_back(v[i]);
                any = true;
            }
        }
        if (!any) {
            break;
        }
    }
    return out;
}

inline EvalReport cmd_eval(const AppConfig & c, const std::set<std::string> & sections_in) {
    std::set<std::string> sections = sections_in;
    if (sections.empty()) {
        sections.insert(eval_sections().begin(), eval_sections().end());
    }
    for (const auto & s : sections) {
        if (std::find(eval_sections().begin(), eval_sections().end(), s) == eval_sections().end()) {
            throw ValidationError("unknown eval section '" + s + "'");
        }
    }
    const RoleKeyRegistry reg = app_registry(c);
    const Model model = load_model(c);
    const Gate gate = runtime_gate(c, reg, c.gate.mode);
    EvalOptions eo;
    eo.max_new = c.eval.max_new;
    eo.nonce_seed = c.eval.nonce_seed;

    EvalReport r;
    r.config_hash = app_config_hash(c);
    r.provenance = provenance_string();
    const auto held = heldout_set(c, c.eval.heldout_per_role, c.eval.heldout_seed);
    if (sections.count("utility")) {
        r.authorized = utility_eval(model, gate, held, true, eo);
        const Model base = TinyLM<float>::init(model.config(), c.train.seed);
        r.base_ppl = base_perplexity(base, reg, held);
    }
    if (sections.count("unauth")) {
        r.unauthorized = utility_eval(model, gate, held, false, eo);
    }
    if (sections.count("unlock")) {
        const auto pool = heldout_set(c, c.eval.unlock_prompts_per_role, c.eval.heldout_seed + 1);
        r.unlock = unlock_matrix(model, gate, by_role(pool, c.eval.unlock_prompts_per_role), reg.roles(),
                                 c.eval.unlock_nonces, eo);
    }
    if (sections.count("nonce")) {
        r.nonce_invariance = nonce_invariance(model, gate, round_robin(held, c.eval.nonce_prompts), c.eval.nonce_count, eo);
    }
    if (sections.count("block")) {
        r.block_suppression = block_suppression(model, gate, round_robin(held, c.eval.block_prompts), eo);
    }
    if (sections.count("throughput")) {
        const Gate sg = runtime_gate(c, reg, RuntimeMode::static_map);
        const Gate ss = runtime_gate(c, reg, RuntimeMode::session);
        ThroughputOptions to;
        to.max_new = c.eval.throughput_max_new;
        to.warmups = c.eval.throughput_warmups;
        to.repeats = c.eval.throughput_repeats;
        ThroughputTable t = throughput_bench(model, sg, ss, round_robin(held, c.eval.throughput_prompts), to);
        auto [pts, fit] = transform_scaling();
        t.scaling = std::move(pts);
        t.scaling_fit = fit;
        r.throughput = std::move(t);
    }
    std::filesystem::create_directories(c.paths.report_dir);
    render_report(r, c.paths.report_dir);
    return r;
}

struct InferArgs {
    std::string prompt;
    std::optional<std::string> key;
    std::optional<std::string> role;
    std::optional<std::string> nonce_hex;
    std::size_t max_new = 64;
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;
    uint64_t seed = 0;
};

inline GateResult cmd_infer(const AppConfig & c, const InferArgs & a) {
    const RoleKeyRegistry reg = app_registry(c);
    const Model model = load_model(c);
    const Gate gate = runtime_gate(c, reg, c.gate.mode);
    std::optional<Nonce> nonce;
    if (a.nonce_hex) {
        nonce = Nonce::from_hex(*a.nonce_hex);
    }
    GateGenerateOptions o;
    o.max_new = a.max_new;
    o.mode = a.mode;
    o.temperature = a.temperature;
    o.sample_seed = a.seed;
    return gate.generate(model, a.prompt, a.key, a.role, nonce, o);
}

/// Runs the HTTP service until `stop` (if given) is signalled or the
/// process ends. `on_ready` receives the bound port.
inline void cmd_serve(const AppConfig & c, std::ostream & log, const std::function<void(int)> & on_ready = {},
                      httplib::Server ** handle = nullptr) {
    const RoleKeyRegistry reg = app_registry(c);
    const Model model = load_model(c);
    const Gate gate = runtime_gate(c, reg, c.gate.mode);
    GenerationService svc(model, gate, c.service, app_config_hash(c), &log);
    httplib::Server server;
    svc.install(server);
    if (handle != nullptr) {
        *handle = &server;
    }
    int port = c.service.port;
    if (port == 0) {
        port = server.bind_to_any_port(c.service.host);
    } else if (!server.bind_to_port(c.service.host, port)) {
        throw IoError("cannot bind " + c.service.host + ":" + std::to_string(port));
    }
    if (port < 0) {
        throw IoError("cannot bind " + c.service.host);
    }
    if (on_ready) {
        on_ready(port);
    }
    server.listen_after_bind();
}

} // namespace kotg
