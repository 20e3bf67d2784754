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

// kotg build-corpus | train | eval | infer | serve
//
// Exit codes: 0 success, 1 user error (bad flags, config, inputs or missing
// artifacts), 2 internal error.

#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "kotg/kotg.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Key-gated orthonormal transforms for a tiny byte-level language model"};
    app.require_subcommand(1);
    std::string config_path = "configs/default.json";
    app.add_option("-c,--config", config_path, "JSON configuration file")->capture_default_str();

    auto * build = app.add_subcommand("build-corpus", "Write the dual-path training corpus");

    auto * train = app.add_subcommand("train", "Train the model on the corpus");
    bool resume = false;
    train->add_flag("--resume", resume, "Continue from the configured checkpoint");

    auto * eval = app.add_subcommand("eval", "Run the evaluation suite and write the report");
    std::vector<std::string> sections;
    eval->add_option("--section", sections, "Run only these sections (repeatable)")
        ->check(CLI::IsMember(kotg::eval_sections()));

    auto * infer = app.add_subcommand("infer", "Gated generation for one prompt");
    kotg::InferArgs ia;
    std::string key, role, nonce, mode = "greedy";
    infer->add_option("-p,--prompt", ia.prompt, "Prompt text")->required();
    infer->add_option("--key", key, "Key text presented with the request");
    infer->add_option("--role", role, "Role asserted by the service layer");
    infer->add_option("--nonce", nonce, "Session nonce as 32 hex characters");
    infer->add_option("--max-new", ia.max_new, "Maximum generated tokens")->capture_default_str();
    infer->add_option("--mode", mode, "Decoding mode")->check(CLI::IsMember({"greedy", "temperature"}));
    infer->add_option("--temperature", ia.temperature, "Sampling temperature")->capture_default_str();
    infer->add_option("--seed", ia.seed, "Sampling seed")->capture_default_str();

    auto * serve = app.add_subcommand("serve", "Run the HTTP generation service");
    std::string host;
    int port = -1;
    serve->add_option("--host", host, "Bind address (overrides config)");
    serve->add_option("--port", port, "Bind port, 0 for any (overrides config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUser;
    }

    try {
        kotg::AppConfig cfg = kotg::load_app_config(config_path);
        if (*build) {
            const auto summary = kotg::cmd_build_corpus(cfg);
            std::cout << kotg::summary_json(summary).dump(2) << "\n";
        } else if (*train) {
            const auto ck = kotg::cmd_train(cfg, resume, &std::cerr);
            std::cout << nlohmann::json{{"checkpoint", cfg.paths.checkpoint},
                                        {"metrics", cfg.paths.metrics},
                                        {"metadata", ck.metadata}}
                             .dump(2)
                      << "\n";
        } else if (*eval) {
            const auto report = kotg::cmd_eval(cfg, std::set<std::string>(sections.begin(), sections.end()));
            std::cout << kotg::render_text(report);
        } else if (*infer) {
            if (!key.empty()) {
                ia.key = key;
            }
            if (!role.empty()) {
                ia.role = role;
            }
            if (!nonce.empty()) {
                ia.nonce_hex = nonce;
            }
            ia.mode = mode == "temperature" ? kotg::DecodeMode::temperature : kotg::DecodeMode::greedy;
            const auto r = kotg::cmd_infer(cfg, ia);
            std::cout << r.text << "\n";
            if (r.blocked) {
                std::cerr << "BLOCKED: no authorized role for this request\n";
            }
            if (r.decision.nonce) {
                std::cerr << "nonce: " << r.decision.nonce->hex() << "\n";
            }
        } else if (*serve) {
            if (!host.empty()) {
                cfg.service.host = host;
            }
            if (port >= 0) {
                cfg.service.port = port;
            }
            kotg::cmd_serve(cfg, std::cerr, [&](int p) {
                std::cerr << "listening on " << cfg.service.host << ":" << p << "\n" << std::flush;
            });
        }
    } catch (const kotg::InvariantError & e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    } catch (const kotg::Error & e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUser;
    } catch (const std::exception & e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitOk;
}
