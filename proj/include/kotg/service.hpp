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

// HTTP surface for gated generation.
//
//   POST /v1/generate
//     request  {"prompt": str, "key"?: str, "role"?: str, "nonce"?: hex32,
//               "max_new"?: int, "mode"?: "greedy"|"temperature",
//               "temperature"?: number, "seed"?: int}
//     response {"text": str, "blocked": bool, "role": str|null,
//               "nonce": hex32|null, "latency_ms": number,
//               "tokens_generated": int}
//     errors   400 malformed request, 413 oversize prompt, 422 unknown role,
//              429 saturated, 500 internal; body {"error": str}
//   GET /v1/health
//     {"status": "ok", "model_hash": str, "config_hash": str, "mode": str}
//
// Request logs carry the route, status, latency, verdict and token count
// only. Prompts, keys, nonces and the server secret are never logged.

#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kotg/checkpoint.hpp"
#include "kotg/errors.hpp"
#include "kotg/gate.hpp"
#include "kotg/model.hpp"

namespace kotg {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t max_prompt_bytes = 2048;
    std::size_t default_max_new = 64;
    std::size_t max_new_limit = 256;
    std::size_t workers = 4;
    std::size_t max_in_flight = 8;

    void validate() const {
        if (port < 0 || port > 65535) {
            throw ConfigError("service config: port out of range");
        }
        if (max_prompt_bytes == 0 || max_new_limit == 0 || workers == 0 || max_in_flight == 0) {
            throw ConfigError("service config: limits must be positive");
        }
        if (default_max_new > max_new_limit) {
            throw ConfigError("service config: default_max_new exceeds max_new_limit");
        }
    }

    friend bool operator==(const ServiceConfig &, const ServiceConfig &) = default;
};

inline void to_json(nlohmann::json & j, const ServiceConfig & c) {
    j = nlohmann::json{{"host", c.host},
                       {"port", c.port},
                       {"max_prompt_bytes", c.max_prompt_bytes},
                       {"default_max_new", c.default_max_new},
                       {"max_new_limit", c.max_new_limit},
                       {"workers", c.workers},
                       {"max_in_flight", c.max_in_flight}};
}

inline void from_json(const nlohmann::json & j, ServiceConfig & c) {
    ServiceConfig d;
    c.host = j.value("host", d.host);
    c.port = j.value("port", d.port);
    c.max_prompt_bytes = j.value("max_prompt_bytes", d.max_prompt_bytes);
    c.default_max_new = j.value("default_max_new", d.default_max_new);
    c.max_new_limit = j.value("max_new_limit", d.max_new_limit);
    c.workers = j.value("workers", d.workers);
    c.max_in_flight = j.value("max_in_flight", d.max_in_flight);
}

struct HttpReply {
    int status = 200;
    std::string body;
};

class GenerationService {
public:
    /// `model` and `gate` must outlive the service. `log` may be null.
    GenerationService(const Model & model, const Gate & gate, ServiceConfig config, std::string config_hash,
                      std::ostream * log = nullptr)
        : model_(model), gate_(gate), config_(std::move(config)), config_hash_(std::move(config_hash)),
          model_hash_(params_hash(model.params())), log_(log) {
        config_.validate();
    }

    /// Total decode steps performed by this service.
    uint64_t decode_steps() const noexcept { return decode_steps_.load(); }
    std::size_t in_flight() const noexcept { return in_flight_.load(); }

    HttpReply health() const {
        return {200, nlohmann::json{{"status", "ok"},
                                    {"model_hash", model_hash_},
                                    {"config_hash", config_hash_},
                                    {"mode", std::string(to_string(gate_.config().mode))}}
                         .dump()};
    }

    /// Transport-independent request handling.
    HttpReply generate(const std::string & body) {
        const auto t0 = std::chrono::steady_clock::now();
        InFlight guard(in_flight_);
        if (guard.count > config_.max_in_flight) {
            return finish(t0, error(429, "server busy"), "saturated", 0);
        }
        nlohmann::json req;
        try {
            req = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception &) {
            return finish(t0, error(400, "request body is not valid JSON"), "rejected", 0);
        }
        if (!req.is_object()) {
            return finish(t0, error(400, "request body must be a JSON object"), "rejected", 0);
        }
        try {
            return handle(req, t0);
        } catch (const UnknownRoleError &) {
            return finish(t0, error(422, "unknown role"), "rejected", 0);
        } catch (const LengthError &) {
            return finish(t0, error(413, "prompt too long"), "rejected", 0);
        } catch (const EmptyPromptError &) {
            return finish(t0, error(400, "prompt must be non-empty"), "rejected", 0);
        } catch (const ValidationError & e) {
            return finish(t0, error(400, e.what()), "rejected", 0);
        } catch (const std::exception &) {
            return finish(t0, error(500, "internal error"), "failed", 0);
        }
    }

    void install(httplib::Server & server) {
        server.Post("/v1/generate", [this](const httplib::Request & req, httplib::Response & res) {
            const HttpReply r = generate(req.body);
            res.status = r.status;
            res.set_content(r.body, "application/json");
        });
        server.Get("/v1/health", [this](const httplib::Request &, httplib::Response & res) {
            const HttpReply r = health();
            res.status = r.status;
            res.set_content(r.body, "application/json");
        });
        const std::size_t workers = config_.workers;
        server.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
        server.set_payload_max_length(config_.max_prompt_bytes * 8 + 4096);
    }

private:
    struct InFlight {
        std::atomic<std::size_t> & counter;
        std::size_t count;
        explicit InFlight(std::atomic<std::size_t> & c) : counter(c), count(c.fetch_add(1) + 1) {}
        ~InFlight() { counter.fetch_sub(1); }
    };

    static HttpReply error(int status, const std::string & message) {
        return {status, nlohmann::json{{"error", message}}.dump()};
    }

    template <typename T>
    static std::optional<T> optional_field(const nlohmann::json & req, const char * name) {
        if (!req.contains(name) || req.at(name).is_null()) {
            return std::nullopt;
        }
        try {
            return req.at(name).get<T>();
        } catch (const nlohmann::json::exception &) {
            throw ValidationError(std::string("field '") + name + "' has the wrong type");
        }
    }

    HttpReply handle(const nlohmann::json & req, std::chrono::steady_clock::time_point t0) {
        if (!req.contains("prompt") || !req.at("prompt").is_string()) {
            throw ValidationError("field 'prompt' is required and must be a string");
        }
        const std::string prompt = req.at("prompt").get<std::string>();
        if (prompt.size() > config_.max_prompt_bytes) {
            return finish(t0, error(413, "prompt exceeds " + std::to_string(config_.max_prompt_bytes) + " bytes"),
                          "rejected", 0);
        }
        const auto key = optional_field<std::string>(req, "key");
        const auto role = optional_field<std::string>(req, "role");
        const auto nonce_hex = optional_field<std::string>(req, "nonce");
        const auto max_new = optional_field<int64_t>(req, "max_new");
        const auto mode = optional_field<std::string>(req, "mode");
        const auto temperature = optional_field<double>(req, "temperature");
        const auto seed = optional_field<uint64_t>(req, "seed");

        GateGenerateOptions opts;
        opts.max_new = config_.default_max_new;
        if (max_new) {
            if (*max_new < 0 || uint64_t(*max_new) > config_.max_new_limit) {
                throw ValidationError("field 'max_new' must be in [0, " + std::to_string(config_.max_new_limit) + "]");
            }
            opts.max_new = std::size_t(*max_new);
        }
        if (mode && *mode != "greedy" && *mode != "temperature") {
            throw ValidationError("field 'mode' must be 'greedy' or 'temperature'");
        }
        opts.mode = (mode && *mode == "temperature") ? DecodeMode::temperature : DecodeMode::greedy;
        if (temperature) {
            if (!(*temperature >= 0.0) || *temperature > 100.0) {
                throw ValidationError("field 'temperature' must be in [0, 100]");
            }
            opts.temperature = *temperature;
        }
        opts.sample_seed = seed.value_or(0);
        opts.step_counter = &decode_steps_;
        std::optional<Nonce> nonce;
        if (nonce_hex) {
            nonce = Nonce::from_hex(*nonce_hex);
        }

        const GateResult r = gate_.generate(model_, prompt, key, role, nonce, opts);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        nlohmann::json resp{{"text", r.text},
                            {"blocked", r.blocked},
                            {"role", r.decision.role ? nlohmann::json(*r.decision.role) : nlohmann::json()},
                            {"nonce", r.decision.nonce ? nlohmann::json(r.decision.nonce->hex()) : nlohmann::json()},
                            {"latency_ms", ms},
                            {"tokens_generated", r.tokens_generated}};
        // Generated bytes need not be valid UTF-8; invalid sequences become U+FFFD.
        return finish(t0, HttpReply{200, resp.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)}, r.blocked ? "blocked" : (r.decision.authorized() ? "authorized" : "unauthorized"),
                      r.tokens_generated);
    }

    HttpReply finish(std::chrono::steady_clock::time_point t0, HttpReply reply, const char * verdict,
                     std::size_t tokens) {
        if (log_ != nullptr) {
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            const nlohmann::json line{{"route", "/v1/generate"},
                                      {"status", reply.status},
                                      {"verdict", verdict},
                                      {"tokens", tokens},
                                      {"latency_ms", ms}};
            std::lock_guard<std::mutex> lock(log_mutex_);
            *log_ << line.dump() << '\n' << std::flush;
        }
        return reply;
    }

    const Model & model_;
    const Gate & gate_;
    ServiceConfig config_;
    std::string config_hash_;
    std::string model_hash_;
    std::ostream * log_;
    std::mutex log_mutex_;
    std::atomic<uint64_t> decode_steps_{0};
    std::atomic<std::size_t> in_flight_{0};
};

} // namespace kotg
