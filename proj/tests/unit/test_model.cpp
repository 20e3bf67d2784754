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

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "kotg/checkpoint.hpp"
#include "kotg/decode.hpp"
#include "kotg/keying.hpp"
#include "kotg/model.hpp"
#include "support/oracles.hpp"

namespace {

using kotg::Batch;
using kotg::HookFn;
using kotg::Matrix;
using kotg::Model;
using kotg::ModelConfig;
using kotg::Token;

ModelConfig small_config() {
    ModelConfig c;
    c.hidden = 32;
    c.layers = 2;
    c.heads = 4;
    c.context = 64;
    return c;
}

std::vector<Token> random_tokens(oracle::Gen & g, std::size_t n) {
    std::vector<Token> t(n);
    for (auto & x : t) {
        x = Token(g.below(257));
    }
    return t;
}

double max_logit_diff(const kotg::ForwardOutput<float> & a, const kotg::ForwardOutput<float> & b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.logits.size(); ++i) {
        m = std::max(m, kotg::max_abs_diff(a.logits[i], b.logits[i]));
    }
    return m;
}

TEST(ModelConfigType, ValidationAndJsonRoundTrip) {
    ModelConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
    EXPECT_EQ(back, c);
    ModelConfig bad = c;
    bad.heads = 5;
    EXPECT_THROW(bad.validate(), kotg::ConfigError);
    bad = c;
    bad.vocab = 256;
    EXPECT_THROW(bad.validate(), kotg::ConfigError);
    bad = c;
    bad.dropout = 1.0;
    EXPECT_THROW(bad.validate(), kotg::ConfigError);
}

TEST(ModelInit, DeterministicAndSeedSensitive) {
    const auto a = Model::init(small_config(), 3);
    const auto b = Model::init(small_config(), 3);
    const auto c = Model::init(small_config(), 4);
    EXPECT_EQ(kotg::params_hash(a.params()), kotg::params_hash(b.params()));
    EXPECT_NE(kotg::params_hash(a.params()), kotg::params_hash(c.params()));
    EXPECT_EQ(a.params().find("head.weight")->shape, (std::vector<std::size_t>{257, 32}));
    EXPECT_NE(a.params().find("tok_emb")->data, a.params().find("head.weight")->data);
}

TEST(Forward, ShapesAndErrors) {
    const auto m = Model::init(small_config(), 1);
    oracle::Gen g(1);
    const Batch batch{random_tokens(g, 5), random_tokens(g, 9)};
    const auto fo = m.forward(batch);
    ASSERT_EQ(fo.logits.size(), 2u);
    EXPECT_EQ(fo.hidden[1].rows(), 9u);
    EXPECT_EQ(fo.hidden[1].cols(), 32u);
    EXPECT_EQ(fo.logits[0].rows(), 5u);
    EXPECT_EQ(fo.logits[0].cols(), 257u);
    EXPECT_THROW(m.forward({{1, 2, 257}}), kotg::VocabError);
    EXPECT_THROW(m.forward({{-1}}), kotg::VocabError);
    EXPECT_THROW(m.forward({std::vector<Token>(65, 1)}), kotg::LengthError);
    EXPECT_NO_THROW(m.forward({std::vector<Token>(64, 1)}));
}

TEST(Forward, IdentityHookIsBitExactNoOp) {
    const auto m = Model::init(small_config(), 2);
    oracle::Gen g(2);
    const Batch batch{random_tokens(g, 17), random_tokens(g, 3)};
    const HookFn<float> id = [](const Matrix<float> & h, const kotg::RowMeta &) { return h; };
    const auto a = m.forward(batch);
    const auto b = m.forward(batch, &id);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        EXPECT_EQ(a.logits[i], b.logits[i]);
        EXPECT_EQ(a.hidden[i], b.hidden[i]);
    }
}

TEST(Forward, TransformThenInverseThroughHeadCancels) {
    const auto m = Model::init(small_config(), 3);
    oracle::Gen g(3);
    const auto t = g.transform(32, 3);
    const Batch batch{random_tokens(g, 20), random_tokens(g, 11)};
    const HookFn<float> fwd = [&](const Matrix<float> & h, const kotg::RowMeta &) {
        return kotg::apply_forward(h, t);
    };
    const HookFn<float> both = [&](const Matrix<float> & h, const kotg::RowMeta &) {
        return kotg::apply_inverse(kotg::apply_forward(h, t), t);
    };
    const auto base = m.forward(batch);
    const auto scrambled = m.forward(batch, &fwd);
    const auto cancelled = m.forward(batch, &both);
    EXPECT_LE(max_logit_diff(base, cancelled), 1e-3);
    EXPECT_GT(max_logit_diff(base, scrambled), 1e-3);
}

TEST(Forward, HookShapeChangeRejected) {
    const auto m = Model::init(small_config(), 4);
    const HookFn<float> shrink = [](const Matrix<float> & h, const kotg::RowMeta &) {
        return Matrix<float>(h.rows(), h.cols() - 1);
    };
    const HookFn<float> drop_row = [](const Matrix<float> & h, const kotg::RowMeta &) {
        return Matrix<float>(h.rows() - 1, h.cols());
    };
    EXPECT_THROW(m.forward({{1, 2, 3}}, &shrink), kotg::DimensionError);
    EXPECT_THROW(m.forward({{1, 2, 3}}, &drop_row), kotg::DimensionError);
}

TEST(Forward, HookSeesRowIndex) {
    const auto m = Model::init(small_config(), 5);
    std::vector<std::size_t> rows;
    const HookFn<float> spy = [&](const Matrix<float> & h, const kotg::RowMeta & meta) {
        rows.push_back(meta.row);
        return h;
    };
    (void)m.forward({{1}, {2, 3}, {4, 5, 6}}, &spy);
    EXPECT_EQ(rows, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Forward, LastOnlyHookSeesOnlyTheLastPosition) {
    const auto m = Model::init(small_config(), 9);
    oracle::Gen g(9);
    const auto t = g.transform(32, 3);
    const auto x = random_tokens(g, 15);
    std::vector<std::pair<std::size_t, std::size_t>> seen; // (rows, first_position)
    const HookFn<float> fwd = [&](const Matrix<float> & h, const kotg::RowMeta & meta) {
        seen.emplace_back(h.rows(), meta.first_position);
        return kotg::apply_forward(h, t);
    };
    const auto full = m.forward({x}, &fwd);
    const auto last = m.forward({x}, &fwd, true);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0], (std::pair<std::size_t, std::size_t>{15, 0}));
    EXPECT_EQ(seen[1], (std::pair<std::size_t, std::size_t>{1, 14}));
    ASSERT_EQ(last.logits[0].rows(), 1u);
    for (std::size_t v = 0; v < 257; ++v) {
        EXPECT_NEAR(last.logits[0](0, v), full.logits[0](14, v), 1e-5);
    }
}

TEST(Forward, CausalityProperty) {
    const auto m = Model::init(small_config(), 6);
    oracle::Gen g(6);
    for (int trial = 0; trial < 15; ++trial) {
        const std::size_t n = g.between(2, 40);
        auto toks = random_tokens(g, n);
        const std::size_t j = g.between(1, n - 1);
        const auto a = m.forward({toks});
        toks[j] = Token((toks[j] + 1 + g.below(255)) % 257);
        const auto b = m.forward({toks});
        for (std::size_t p = 0; p < j; ++p) {
            for (std::size_t v = 0; v < 257; ++v) {
                ASSERT_EQ(a.logits[0](p, v), b.logits[0](p, v)) << "pos " << p << " perturbed " << j;
            }
        }
        double later = 0.0;
        for (std::size_t v = 0; v < 257; ++v) {
            later = std::max(later, double(std::abs(a.logits[0](j, v) - b.logits[0](j, v))));
        }
        EXPECT_GT(later, 0.0);
    }
}

TEST(Forward, BatchRowsAreIndependent) {
    const auto m = Model::init(small_config(), 7);
    oracle::Gen g(7);
    const auto x = random_tokens(g, 12), y = random_tokens(g, 30);
    const auto joint = m.forward({x, y});
    const auto alone = m.forward({x});
    EXPECT_LE(kotg::max_abs_diff(joint.logits[0], alone.logits[0]), 1e-5);
}

TEST(Forward, LastOnlyMatchesFullLastRow) {
    const auto m = Model::init(small_config(), 8);
    oracle::Gen g(8);
    const auto x = random_tokens(g, 21);
    const auto full = m.forward({x});
    const auto last = m.forward({x}, nullptr, true);
    ASSERT_EQ(last.logits[0].rows(), 1u);
    for (std::size_t v = 0; v < 257; ++v) {
        EXPECT_NEAR(last.logits[0](0, v), full.logits[0](20, v), 1e-5);
    }
}

// Central differences in double precision on a 2-layer, H=16 model.
TEST(Gradient, MatchesFiniteDifferences) {
    ModelConfig c;
    c.hidden = 16;
    c.layers = 2;
    c.heads = 2;
    c.context = 32;
    auto m = Model::init(c, 9).cast<double>();
    // Spread parameters so the check is not dominated by tiny values.
    oracle::Gen g(9);
    for (auto & t : m.params()) {
        for (auto & x : t.data) {
            x += 0.05 * g.normal();
        }
    }
    const auto map = kotg::make_static_orthonormal(5, 16);
    const Batch batch{random_tokens(g, 9), random_tokens(g, 6), random_tokens(g, 13)};
    const kotg::TrainRowPolicy policy = [&](std::size_t r) -> const kotg::StaticOrthonormalMap * {
        return r == 1 ? &map : nullptr;
    };
    auto grads = m.params().zeros_like();
    (void)m.loss_and_grad(batch, policy, grads);

    int checked = 0;
    double worst = 0.0;
    while (checked < 100) {
        const std::size_t ti = g.below(m.params().size());
        auto & t = m.params()[ti];
        const std::size_t j = g.below(t.numel());
        const double orig = t.data[j];
        const double eps = 1e-5;
        t.data[j] = orig + eps;
        const double lp = m.loss(batch, policy);
        t.data[j] = orig - eps;
        const double lm = m.loss(batch, policy);
        t.data[j] = orig;
        const double num = (lp - lm) / (2 * eps);
        const double ana = grads[ti].data[j];
        const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
        const double rel = std::abs(num - ana) / denom;
        worst = std::max(worst, rel);
        EXPECT_LE(rel, 1e-2) << t.name << "[" << j << "] analytic " << ana << " numeric " << num;
        ++checked;
    }
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Loss, PolicyChangesLossOnlyForMappedRows) {
    const auto m = Model::init(small_config(), 10);
    oracle::Gen g(10);
    const auto map = kotg::make_static_orthonormal(2, 32);
    const Batch one{random_tokens(g, 15)};
    const kotg::TrainRowPolicy none = [](std::size_t) -> const kotg::StaticOrthonormalMap * { return nullptr; };
    const kotg::TrainRowPolicy all = [&](std::size_t) { return &map; };
    EXPECT_EQ(m.loss(one), m.loss(one, none));
    EXPECT_NE(m.loss(one), m.loss(one, all));
    const kotg::StaticOrthonormalMap wrong = kotg::make_static_orthonormal(2, 16);
    const kotg::TrainRowPolicy bad = [&](std::size_t) { return &wrong; };
    EXPECT_THROW(m.loss(one, bad), kotg::DimensionError);
}

TEST(Decode, SoftmaxNormalizedAndBannedMassZero) {
    oracle::Gen g(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> logits(257);
        for (auto & x : logits) {
            x = float(3.0 * g.normal());
        }
        std::array<bool, 256> banned{};
        for (int i = 0; i < 40; ++i) {
            banned[g.below(256)] = true;
        }
        const double temp = 0.2 + 2.0 * double(g.below(100)) / 100.0;
        const auto p = kotg::next_token_distribution<float>(logits, &banned, temp);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-5);
        for (std::size_t i = 0; i < 256; ++i) {
            if (banned[i]) {
                EXPECT_EQ(p[i], 0.0);
            }
        }
    }
}

TEST(Decode, AllBannedEmitsEos) {
    std::vector<float> logits(257, 0.0f);
    logits[256] = -1e9f;
    std::array<bool, 256> banned;
    banned.fill(true);
    const auto p = kotg::next_token_distribution<float>(logits, &banned, 1.0);
    EXPECT_EQ(p[256], 1.0);
}

bool brute_banned(const std::vector<std::string> & seqs, const std::vector<Token> & tail, int byte) {
    std::string s;
    for (Token t : tail) {
        s.push_back(char(t));
    }
    s.push_back(char(byte));
    for (const auto & b : seqs) {
        if (s.size() >= b.size() && s.compare(s.size() - b.size(), b.size(), b) == 0) {
            return true;
        }
    }
    return false;
}

TEST(BannedMatcherType, AgreesWithBruteForceSuffixCheck) {
    oracle::Gen g(12);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> seqs;
        for (std::size_t i = 0, n = g.between(1, 5); i < n; ++i) {
            seqs.push_back(g.ascii(g.between(1, 5), "<>BLOCKbl "));
        }
        const kotg::BannedMatcher matcher(seqs);
        std::vector<Token> tail;
        for (char c : g.ascii(g.between(0, 12), "<>BLOCKbl x")) {
            tail.push_back(Token(static_cast<unsigned char>(c)));
        }
        const auto mask = matcher.banned_next(tail);
        for (int b = 0; b < 256; ++b) {
            ASSERT_EQ(mask[std::size_t(b)], brute_banned(seqs, tail, b)) << "byte " << b;
        }
    }
}

TEST(BannedMatcherType, EmptyAndSize) {
    kotg::BannedMatcher m;
    EXPECT_TRUE(m.empty());
    m.add("");
    EXPECT_TRUE(m.empty());
    m.add("ab");
    m.add("b");
    EXPECT_EQ(m.size(), 2u);
    const auto mask = m.banned_next(std::vector<Token>{'a'});
    EXPECT_TRUE(mask['b']);
    EXPECT_FALSE(mask['a']);
}

TEST(Generate, GreedyDeterministicAndTemperatureZeroIsGreedy) {
    const auto m = Model::init(small_config(), 13);
    const auto prompt = kotg::encode("User: hi\nAssistant: ");
    kotg::GenerateOptions opts;
    opts.max_new = 12;
    const auto a = kotg::generate(m, prompt, opts);
    const auto b = kotg::generate(m, prompt, opts);
    EXPECT_EQ(a.tokens, b.tokens);
    kotg::GenerateOptions t0 = opts;
    t0.mode = kotg::DecodeMode::temperature;
    t0.temperature = 0.0;
    t0.sample_seed = 99;
    EXPECT_EQ(kotg::generate(m, prompt, t0).tokens, a.tokens);
}

TEST(Generate, SamplingSeededAndBounded) {
    const auto m = Model::init(small_config(), 14);
    const auto prompt = kotg::encode("abc");
    kotg::GenerateOptions opts;
    opts.mode = kotg::DecodeMode::temperature;
    opts.temperature = 1.0;
    opts.max_new = 20;
    opts.stop_at_eos = false;
    opts.sample_seed = 1;
    const auto a = kotg::generate(m, prompt, opts);
    const auto b = kotg::generate(m, prompt, opts);
    opts.sample_seed = 2;
    const auto c = kotg::generate(m, prompt, opts);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_NE(a.tokens, c.tokens);
    EXPECT_EQ(a.tokens.size(), 20u);
    EXPECT_EQ(a.steps, 20u);
    for (Token t : a.tokens) {
        EXPECT_LT(t, kotg::kEos);
    }
}

TEST(Generate, StopsAtContextAndCountsSteps) {
    const auto m = Model::init(small_config(), 15);
    std::atomic<uint64_t> counter{0};
    kotg::GenerateOptions opts;
    opts.max_new = 1000;
    opts.stop_at_eos = false;
    opts.step_counter = &counter;
    const auto r = kotg::generate(m, std::vector<Token>(60, 'a'), opts);
    EXPECT_EQ(r.tokens.size(), 4u);
    EXPECT_EQ(counter.load(), 4u);
    opts.max_new = 0;
    EXPECT_TRUE(kotg::generate(m, std::vector<Token>{1}, opts).tokens.empty());
}

TEST(Generate, Errors) {
    const auto m = Model::init(small_config(), 16);
    EXPECT_THROW(kotg::generate(m, std::vector<Token>{}, {}), kotg::EmptyPromptError);
    EXPECT_THROW(kotg::generate(m, std::vector<Token>(65, 1), {}), kotg::LengthError);
}

TEST(Generate, BannedSequencesNeverAppear) {
    // Make a model that strongly prefers "<BLOCK>" by biasing the head toward
    // those bytes, then check the ban list holds under sampling.
    auto m = Model::init(small_config(), 17);
    auto & bias = m.params()[m.params().index_of("head.bias")].data;
    for (char ch : std::string("<BLOCK>blck")) {
        bias[std::size_t(static_cast<unsigned char>(ch))] = 6.0f;
    }
    const std::vector<std::string> banned{"<BLOCK>", "<block>", "BLOCK", "<B", "LO"};
    const kotg::BannedMatcher matcher(banned);
    for (uint64_t seed = 0; seed < 30; ++seed) {
        kotg::GenerateOptions opts;
        opts.mode = kotg::DecodeMode::temperature;
        opts.temperature = 0.8;
        opts.max_new = 40;
        opts.sample_seed = seed;
        opts.banned = &matcher;
        const auto r = kotg::generate(m, kotg::encode("Assistant: "), opts);
        const std::string text = kotg::decode(r.tokens);
        for (const auto & b : banned) {
            EXPECT_EQ(text.find(b), std::string::npos) << text;
        }
    }
}

TEST(Perplexity, UntrainedModelIsNearUniform) {
    const auto m = Model::init(kotg::ModelConfig{}, 18);
    oracle::Gen g(18);
    for (int trial = 0; trial < 5; ++trial) {
        const auto toks = kotg::encode_with_eos(g.ascii(60, "abcdefghij KEY-<>:\n0123456789"));
        const double ppl = kotg::perplexity(m, toks);
        EXPECT_NEAR(ppl, 257.0, 0.15 * 257.0);
    }
    EXPECT_THROW(kotg::perplexity(m, std::vector<Token>{1}), kotg::LengthError);
}

TEST(Perplexity, MatchesManualLogSoftmax) {
    const auto m = Model::init(small_config(), 19);
    oracle::Gen g(19);
    const auto toks = random_tokens(g, 10);
    const auto fo = m.forward({toks});
    double nll = 0.0;
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
        double z = 0.0;
        for (std::size_t v = 0; v < 257; ++v) {
            z += std::exp(double(fo.logits[0](i, v)));
        }
        nll -= std::log(std::exp(double(fo.logits[0](i, std::size_t(toks[i + 1])))) / z);
    }
    EXPECT_NEAR(kotg::perplexity(m, toks), std::exp(nll / 9.0), 1e-4);
}

kotg::Checkpoint sample_checkpoint(bool with_optimizer) {
    auto m = Model::init(small_config(), 20);
    kotg::Checkpoint ck{m.config(), m.params(), {7, 20, "abc123", 5.5, 0.25}, std::nullopt};
    if (with_optimizer) {
        ck.optimizer = kotg::OptimizerState{7, m.params().zeros_like(), m.params().zeros_like()};
        ck.optimizer->m[0].data[3] = 1.5f;
        ck.optimizer->v[1].data[2] = 2.5f;
    }
    return ck;
}

TEST(Checkpoint, SaveLoadIsBitExact) {
    oracle::TempDir dir;
    const auto ck = sample_checkpoint(true);
    kotg::save_checkpoint(ck, dir.str("m.ckpt"));
    const auto back = kotg::load_checkpoint(dir.str("m.ckpt"));
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.metadata, ck.metadata);
    ASSERT_EQ(back.params.size(), ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        EXPECT_EQ(back.params[i].name, ck.params[i].name);
        EXPECT_EQ(back.params[i].data, ck.params[i].data);
    }
    ASSERT_TRUE(back.optimizer.has_value());
    EXPECT_EQ(back.optimizer->t, 7u);
    EXPECT_EQ(back.optimizer->m[0].data, ck.optimizer->m[0].data);
    EXPECT_EQ(back.optimizer->v[1].data, ck.optimizer->v[1].data);

    const Model a(ck.config, ck.params), b(back.config, back.params);
    oracle::Gen g(20);
    const Batch batch{random_tokens(g, 30)};
    EXPECT_EQ(a.forward(batch).logits[0], b.forward(batch).logits[0]);
    EXPECT_FALSE(std::filesystem::exists(dir.str("m.ckpt.tmp")));
}

TEST(Checkpoint, WithoutOptimizerState) {
    const auto ck = sample_checkpoint(false);
    const auto back = kotg::deserialize_checkpoint(kotg::serialize_checkpoint(ck));
    EXPECT_FALSE(back.optimizer.has_value());
    EXPECT_EQ(kotg::params_hash(back.params), kotg::params_hash(ck.params));
}

TEST(Checkpoint, LayoutIsDocumentedFormat) {
    const std::string bytes = kotg::serialize_checkpoint(sample_checkpoint(false));
    ASSERT_GE(bytes.size(), 20u);
    EXPECT_EQ(bytes.substr(0, 8), "KOTGCKPT");
    uint32_t version = 0;
    uint64_t hlen = 0;
    for (int i = 0; i < 4; ++i) {
        version |= uint32_t(uint8_t(bytes[8 + i])) << (8 * i);
    }
    for (int i = 0; i < 8; ++i) {
        hlen |= uint64_t(uint8_t(bytes[12 + i])) << (8 * i);
    }
    EXPECT_EQ(version, 1u);
    const auto header = nlohmann::json::parse(bytes.substr(20, hlen));
    EXPECT_EQ(header.at("config").get<ModelConfig>(), small_config());
    EXPECT_EQ(header.at("payload_bytes").get<uint64_t>(), bytes.size() - 20 - hlen);
    // First tensor value round-trips from its offset as little-endian f32.
    const auto & first = header.at("tensors").at(0);
    const std::size_t off = 20 + hlen + first.at("offset").get<std::size_t>();
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
        bits |= uint32_t(uint8_t(bytes[off + std::size_t(i)])) << (8 * i);
    }
    const auto ck = sample_checkpoint(false);
    EXPECT_EQ(std::bit_cast<float>(bits), ck.params.find(first.at("name").get<std::string>())->data[0]);
}

TEST(Checkpoint, TruncationAndCorruptionAreFormatErrors) {
    const std::string bytes = kotg::serialize_checkpoint(sample_checkpoint(true));
    oracle::Gen g(21);
    std::vector<std::size_t> cuts{0, 1, 7, 8, 11, 12, 19, 20, 21, 100, bytes.size() - 1};
    for (int i = 0; i < 40; ++i) {
        cuts.push_back(g.below(bytes.size()));
    }
    for (std::size_t cut : cuts) {
        EXPECT_THROW(kotg::deserialize_checkpoint(bytes.substr(0, cut)), kotg::CheckpointFormatError) << cut;
    }
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(kotg::deserialize_checkpoint(bad), kotg::CheckpointFormatError);
    bad = bytes;
    bad[8] = 2;
    EXPECT_THROW(kotg::deserialize_checkpoint(bad), kotg::CheckpointFormatError);
    bad = bytes;
    bad[21] = '#';
    EXPECT_THROW(kotg::deserialize_checkpoint(bad), kotg::CheckpointFormatError);
    EXPECT_THROW(kotg::load_checkpoint("/nonexistent/dir/x.ckpt"), kotg::IoError);
}

TEST(Checkpoint, HeaderSchemaViolations) {
    const auto ck = sample_checkpoint(false);
    const std::string bytes = kotg::serialize_checkpoint(ck);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) {
        hlen |= uint64_t(uint8_t(bytes[12 + i])) << (8 * i);
    }
    auto header = nlohmann::json::parse(bytes.substr(20, hlen));
    const std::string payload = bytes.substr(20 + hlen);
    auto rebuild = [&](const nlohmann::json & h) {
        const std::string hs = h.dump();
        std::string out = bytes.substr(0, 12);
        for (int i = 0; i < 8; ++i) {
            out.push_back(char(uint8_t(uint64_t(hs.size()) >> (8 * i))));
        }
        return out + hs + payload;
    };
    EXPECT_NO_THROW(kotg::deserialize_checkpoint(rebuild(header)));
    auto h1 = header;
    h1["tensors"].erase(0);
    EXPECT_THROW(kotg::deserialize_checkpoint(rebuild(h1)), kotg::CheckpointFormatError);
    auto h2 = header;
    h2["tensors"][0]["shape"] = {1, 1};
    EXPECT_THROW(kotg::deserialize_checkpoint(rebuild(h2)), kotg::CheckpointFormatError);
    auto h3 = header;
    h3["config"]["heads"] = 5;
    EXPECT_THROW(kotg::deserialize_checkpoint(rebuild(h3)), kotg::CheckpointFormatError);
}

TEST(Checkpoint, NeverContainsSecretOrKeys) {
    const std::string secret = "very-secret-server-bytes";
    ::setenv(kotg::kSecretEnvVar, secret.c_str(), 1);
    const std::string bytes = kotg::serialize_checkpoint(sample_checkpoint(true));
    EXPECT_EQ(bytes.find(secret), std::string::npos);
    for (const auto & e : kotg::RoleKeyRegistry::defaults().entries()) {
        EXPECT_EQ(bytes.find(e.key), std::string::npos);
    }
    ::unsetenv(kotg::kSecretEnvVar);
}

} // namespace
