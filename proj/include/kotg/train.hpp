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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>


#include <nlohmann/json.hpp>

#include "kotg/checkpoint.hpp"
#include "kotg/corpus.hpp"
#include "kotg/errors.hpp"
#include "kotg/model.hpp"
#include "kotg/stream.hpp"
#include "kotg/tokenizer.hpp"

namespace kotg {

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 32;
    double lr = 3e-4;
    std::size_t warmup = 100;
    double min_lr_ratio = 0.1;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 1;
    std::size_t log_every = 50;

    void validate() const {
        if (steps == 0 || batch_size == 0) {
            throw ConfigError("train config: steps and batch_size must be positive");
        }
        if (!(lr > 0.0) || min_lr_ratio < 0.0 || min_lr_ratio > 1.0 || weight_decay < 0.0 || grad_clip <= 0.0) {
            throw ConfigError("train config: invalid optimizer hyperparameters");
        }
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0) {
            throw ConfigError("train config: betas must be in [0, 1) and eps positive");
        }
    }

    friend bool operator==(const TrainConfig &, const TrainConfig &) = default;
};

inline void to_json(nlohmann::json & j, const TrainConfig & c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"warmup", c.warmup},
                       {"min_lr_ratio", c.min_lr_ratio},
                       {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps", c.eps},
                       {"grad_clip", c.grad_clip},
                       {"seed", c.seed},
                       {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json & j, TrainConfig & c) {
    TrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.warmup = j.value("warmup", d.warmup);
    c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.seed = j.value("seed", d.seed);
    c.log_every = j.value("log_every", d.log_every);
}

/// Linear warmup to `lr`, then cosine decay to `lr * min_lr_ratio`.
inline double learning_rate(const TrainConfig & c, std::size_t step) {
    if (step < c.warmup) {
        return c.lr * double(step + 1) / double(c.warmup);
    }
    const std::size_t span = c.steps > c.warmup ? c.steps - c.warmup : 1;
    const double progress = std::min(1.0, double(step - c.warmup) / double(span));
    const double floor = c.lr * c.min_lr_ratio;
    return floor + 0.5 * (c.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Maps a corpus record to the static map applied before the head during
/// training, or nullptr for identity.
using RecordPolicy = std::function<const StaticOrthonormalMap *(const CorpusRecord &)>;

/// Receives one structured record per logged step.
using MetricsSink = std::function<void(const nlohmann::json &)>;

inline MetricsSink jsonl_sink(std::ostream & os) {
    return [&os](const nlohmann::json & j) { os << j.dump() << '\n' << std::flush; };
}

inline std::string corpus_hash(const std::vector<CorpusRecord> & corpus) { return sha256_hex(corpus_to_jsonl(corpus)); }

/// Deterministic sample order: epoch e visits the corpus in a permutation
/// drawn from (seed, e), so the batch for any step can be recomputed when
/// training resumes.
class DataOrder {
public:
    DataOrder(std::size_t n, uint64_t seed) : n_(n), seed_(seed) {}

    std::size_t at(std::size_t global_index) {
        const std::size_t epoch = global_index / n_;
        if (epoch != epoch_ || order_.empty()) {
            order_.resize(n_);
            std::iota(order_.begin(), order_.end(), std::size_t(0));
            SeedStream s = SeedStream::from_u64(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)), "kotg/data-order");
            seeded_shuffle(order_, s);
            epoch_ = epoch;
        }
        return order_[global_index % n_];
    }

private:
    std::size_t n_;
    uint64_t seed_;
    std::size_t epoch_ = 0;
    std::vector<std::size_t> order_;
};

namespace detail {

inline bool decays(const Tensor<float> & t) { return t.shape.size() == 2; }

inline double global_norm(const ParamTable<float> & g) {
    double s = 0.0;
    for (const auto & t : g) {
        for (float x : t.data) {
            s += double(x) * double(x);
        }
    }
    return std::sqrt(s);
}

} // namespace detail

/// Full-parameter AdamW training with next-token loss over whole records.
///
/// `resume`, when given, must carry optimizer state for the same model
/// config; training continues from its step counter up to `tc.steps`.
inline Checkpoint train(const std::vector<CorpusRecord> & corpus, const ModelConfig & mc, const TrainConfig & tc,
                        const RecordPolicy & policy, std::optional<Checkpoint> resume = std::nullopt,
                        const MetricsSink & sink = {}) {
    if (corpus.empty()) {
        throw ValidationError("training corpus is empty");
    }
    mc.validate();
    tc.validate();
    detail::keep_large_buffers_on_heap();

    std::vector<std::vector<Token>> seqs;
    seqs.reserve(corpus.size());
    for (const auto & r : corpus) {
        seqs.push_back(encode_with_eos(r.text));
        if (seqs.back().size() > std::size_t(mc.context)) {
            throw LengthError("corpus record of " + std::to_string(seqs.back().size()) +
                              " tokens exceeds the model context " + std::to_string(mc.context));
        }
    }
    std::vector<const StaticOrthonormalMap *> maps(corpus.size(), nullptr);
    if (policy) {
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            maps[i] = policy(corpus[i]);
        }
    }

    const std::string chash = corpus_hash(corpus);
    std::optional<TinyLM<float>> model;
    OptimizerState opt;
    TrainingMetadata meta;
    if (resume) {
        if (!(resume->config == mc)) {
            throw ConfigError("resume checkpoint has a different model config");
        }
        if (!resume->optimizer) {
            throw ConfigError("resume checkpoint carries no optimizer state");
        }
        model.emplace(mc, std::move(resume->params));
        opt = std::move(*resume->optimizer);
        meta = resume->metadata;
    } else {
        model.emplace(TinyLM<float>::init(mc, tc.seed));
        opt.m = model->params().zeros_like();
        opt.v = model->params().zeros_like();
        meta.seed = tc.seed;
    }
    meta.corpus_hash = chash;

    DataOrder order(corpus.size(), tc.seed);
    ParamTable<float> grads = model->params().zeros_like();
    const auto t0 = std::chrono::steady_clock::now();
    double window = 0.0;
    std::size_t window_n = 0;
    std::vector<double> recent;

    for (std::size_t step = std::size_t(meta.step); step < tc.steps; ++step) {
        Batch batch;
        std::vector<const StaticOrthonormalMap *> row_maps;
        batch.reserve(tc.batch_size);
        for (std::size_t j = 0; j < tc.batch_size; ++j) {
            const std::size_t idx = order.at(step * tc.batch_size + j);
            batch.push_back(seqs[idx]);
            row_maps.push_back(maps[idx]);
        }
        const TrainRowPolicy row_policy = [&row_maps](std::size_t r) { return row_maps[r]; };

        grads.zero();
        SeedStream drop = SeedStream::from_u64(tc.seed ^ (uint64_t(step) << 20), "kotg/dropout");
        const float loss = model->loss_and_grad(batch, row_policy, grads, &drop);
        if (!std::isfinite(loss)) {
            throw TrainingDivergedError(step, "loss is not finite");
        }
        const double gnorm = detail::global_norm(grads);
        if (!std::isfinite(gnorm)) {
            throw TrainingDivergedError(step, "gradient norm is not finite");
        }
        const double clip = gnorm > tc.grad_clip ? tc.grad_clip / gnorm : 1.0;
        const double lr = learning_rate(tc, step);

        opt.t += 1;
        const double bc1 = 1.0 - std::pow(tc.beta1, double(opt.t));
        const double bc2 = 1.0 - std::pow(tc.beta2, double(opt.t));
        auto & params = model->params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto & p = params[i].data;
            auto & g = grads[i].data;
            auto & m = opt.m[i].data;
            auto & v = opt.v[i].data;
            const bool wd = detail::decays(params[i]);
            const float b1 = float(tc.beta1), b2 = float(tc.beta2), c = float(clip);
            for (std::size_t j = 0; j < p.size(); ++j) {
                const float gj = g[j] * c;
                m[j] = b1 * m[j] + (1.0f - b1) * gj;
                v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
                const double upd = (double(m[j]) / bc1) / (std::sqrt(double(v[j]) / bc2) + tc.eps);
                double nv = double(p[j]) - lr * upd;
                if (wd) {
                    nv -= lr * tc.weight_decay * double(p[j]);
                }
                p[j] = float(nv);
            }
        }

        if (step == 0 || (resume && step == meta.step && meta.initial_loss == 0.0)) {
            meta.initial_loss = loss;
        }
        recent.push_back(loss);
        if (recent.size() > 50) {
            recent.erase(recent.begin());
        }
        window += loss;
        ++window_n;
        const bool last = step + 1 == tc.steps;
        if (sink && tc.log_every > 0 && (step % tc.log_every == 0 || last)) {
            const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            sink(nlohmann::json{{"step", step},
                                {"loss", loss},
                                {"loss_avg", window / double(window_n)},
                                {"lr", lr},
                                {"grad_norm", gnorm},
                                {"elapsed_s", elapsed}});
            window = 0.0;
            window_n = 0;
        }
    }

    meta.step = tc.steps;
    if (!recent.empty()) {
        meta.final_loss = std::accumulate(recent.begin(), recent.end(), 0.0) / double(recent.size());
    }
    Checkpoint out{mc, std::move(model->params()), meta, std::move(opt)};
    return out;
}

} // namespace kotg
