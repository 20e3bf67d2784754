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

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kotg/errors.hpp"
#include "kotg/model.hpp"
#include "kotg/stream.hpp"
#include "kotg/tokenizer.hpp"

namespace kotg {

/// Bans any next byte that would complete one of a set of byte sequences.
///
/// Each sequence s is stored as its prefix s[0..n-1) reversed, with s[n-1]
/// recorded on the terminal node. Walking the generated tail backwards
/// through the trie visits exactly the prefixes that end at the tail, and
/// the union of their recorded bytes is the banned set for the next step.
class BannedMatcher {
public:
    BannedMatcher() { nodes_.emplace_back(); }

    explicit BannedMatcher(const std::vector<std::string> & sequences) : BannedMatcher() {
        for (const auto & s : sequences) {
            add(s);
        }
    }

    void add(std::string_view s) {
        if (s.empty()) {
            return;
        }
        std::size_t node = 0;
        for (std::size_t i = s.size() - 1; i-- > 0;) {
            const auto c = uint8_t(s[i]);
            if (nodes_[node].next[c] < 0) {
                nodes_[node].next[c] = int32_t(nodes_.size());
                nodes_.emplace_back();
            }
            node = std::size_t(nodes_[node].next[c]);
        }
        nodes_[node].ban[uint8_t(s.back())] = true;
        ++count_;
    }

    bool empty() const noexcept { return count_ == 0; }
    std::size_t size() const noexcept { return count_; }

    /// Banned-next-byte mask for the given tail of generated tokens.
    std::array<bool, 256> banned_next(std::span<const Token> tail) const {
        std::array<bool, 256> out{};
        std::size_t node = 0;
        merge(out, node);
        for (std::size_t i = tail.size(); i-- > 0;) {
            const Token t = tail[i];
            if (t < 0 || t > 255) {
                break;
            }
            const int32_t nx = nodes_[node].next[std::size_t(t)];
            if (nx < 0) {
                break;
            }
            node = std::size_t(nx);
            merge(out, node);
        }
        return out;
    }

private:
    struct Node {
        std::array<int32_t, 256> next;
        std::array<bool, 256> ban{};
        Node() { next.fill(-1); }
    };

    void merge(std::array<bool, 256> & out, std::size_t node) const {
        for (std::size_t c = 0; c < 256; ++c) {
            out[c] = out[c] || nodes_[node].ban[c];
        }
    }

    std::vector<Node> nodes_;
    std::size_t count_ = 0;
};

enum class DecodeMode { greedy, temperature };

struct GenerateOptions {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0; // <= 0 decodes greedily
    std::size_t max_new = 64;
    uint64_t sample_seed = 0;
    bool stop_at_eos = true; // when false, EOS is never selected (fixed-length benchmarking)
    const BannedMatcher * banned = nullptr;
    std::atomic<uint64_t> * step_counter = nullptr; // incremented once per decode step
};

struct GenerateResult {
    std::vector<Token> tokens; // generated tokens only, EOS excluded
    bool stopped_at_eos = false;
    std::size_t steps = 0;
};

/// Next-token probabilities from one logits row. Banned entries get exactly
/// zero mass; temperature <= 0 yields a one-hot on the greedy choice.
template <typename T>
std::vector<double> next_token_distribution(std::span<const T> logits, const std::array<bool, 256> * banned,
                                            double temperature) {
    const std::size_t v = logits.size();
    std::vector<double> p(v, 0.0);
    auto allowed = [&](std::size_t i) { return banned == nullptr || i >= 256 || !(*banned)[i]; };
    std::size_t best = v;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v; ++i) {
        if (allowed(i) && (best == v || double(logits[i]) > best_logit)) {
            best = i;
            best_logit = double(logits[i]);
        }
    }
    if (best == v) {
        p[std::size_t(kEos)] = 1.0;
        return p;
    }
    if (temperature <= 0.0) {
        p[best] = 1.0;
        return p;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        if (allowed(i)) {
            p[i] = std::exp((double(logits[i]) - best_logit) / temperature);
            sum += p[i];
        }
    }
    for (auto & x : p) {
        x /= sum;
    }
    return p;
}

template <typename T>
GenerateResult generate(const TinyLM<T> & model, std::span<const Token> prompt, const GenerateOptions & opts,
                        const HookFn<T> * hook = nullptr) {
    if (prompt.empty()) {
        throw EmptyPromptError("generate: empty prompt");
    }
    const std::size_t ctx = std::size_t(model.config().context);
    if (prompt.size() > ctx) {
        throw LengthError("prompt of length " + std::to_string(prompt.size()) + " exceeds context " +
                          std::to_string(ctx));
    }
    const bool greedy = opts.mode == DecodeMode::greedy || opts.temperature <= 0.0;
    SeedStream rng = SeedStream::from_u64(opts.sample_seed, "kotg/sample");

    GenerateResult out;
    Batch batch{std::vector<Token>(prompt.begin(), prompt.end())};
    while (out.tokens.size() < opts.max_new && batch[0].size() < ctx) {
        if (opts.step_counter != nullptr) {
            opts.step_counter->fetch_add(1, std::memory_order_relaxed);
        }
        ++out.steps;
        const auto fo = model.forward(batch, hook, /*last_only=*/true);
        const Matrix<T> & logits = fo.logits[0];
        std::array<bool, 256> mask{};
        const std::array<bool, 256> * maskp = nullptr;
        if (opts.banned != nullptr && !opts.banned->empty()) {
            mask = opts.banned->banned_next(out.tokens);
            maskp = &mask;
        }
        std::vector<T> row(logits.row(0).begin(), logits.row(0).end());
        if (!opts.stop_at_eos) {
            row[std::size_t(kEos)] = -std::numeric_limits<T>::infinity();
        }
        const auto p = next_token_distribution<T>(row, maskp, greedy ? 0.0 : opts.temperature);
        std::size_t next = 0;
        if (greedy) {
            next = std::size_t(std::max_element(p.begin(), p.end()) - p.begin());
        } else {
            const double u = rng.uniform01();
            double acc = 0.0;
            next = p.size() - 1;
            for (std::size_t i = 0; i < p.size(); ++i) {
                acc += p[i];
                if (u < acc && p[i] > 0.0) {
                    next = i;
                    break;
                }
            }
            while (p[next] == 0.0 && next > 0) {
                --next;
            }
        }
        if (Token(next) == kEos) {
            out.stopped_at_eos = true;
            break;
        }
        out.tokens.push_back(Token(next));
        batch[0].push_back(Token(next));
    }
    return out;
}

/// exp of the mean next-token negative log-likelihood under teacher forcing.
template <typename T>
double perplexity(const TinyLM<T> & model, std::span<const Token> tokens, const HookFn<T> * hook = nullptr) {
    if (tokens.size() < 2) {
        throw LengthError("perplexity needs at least two tokens");
    }
    const Batch batch{std::vector<Token>(tokens.begin(), tokens.end())};
    const auto fo = model.forward(batch, hook);
    const Matrix<T> & logits = fo.logits[0];
    double nll = 0.0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const auto row = logits.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (T x : row) {
            mx = std::max(mx, double(x));
        }
        double sum = 0.0;
        for (T x : row) {
            sum += std::exp(double(x) - mx);
        }
        nll += mx + std::log(sum) - double(row[std::size_t(tokens[i + 1])]);
    }
    return std::exp(nll / double(tokens.size() - 1));
}

} // namespace kotg
