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

// Byte-level causal transformer (pre-norm, learned positions, GELU MLP,
// untied output head) with a hook point between the final LayerNorm and the
// output projection:
//
//   hidden = LN_f(blocks(embed(tokens)))      S x H
//   hidden' = hook(hidden)                    S x H, shape-preserving
//   logits = hidden' * W_head^T + b_head      S x V
//
// The model is templated on its scalar type. Inference and training use
// float; gradient checking instantiates double.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "kotg/errors.hpp"
#include "kotg/matrix.hpp"
#include "kotg/stream.hpp"
#include "kotg/tokenizer.hpp"
#include "kotg/transform.hpp"

namespace kotg {

struct ModelConfig {
    int hidden = 128;
    int layers = 4;
    int heads = 4;
    int context = 256;
    int vocab = kVocabSize;
    int mlp_mult = 4;
    double dropout = 0.0;

    int head_dim() const { return hidden / heads; }
    int mlp_hidden() const { return hidden * mlp_mult; }

    void validate() const {
        if (hidden <= 0 || layers <= 0 || heads <= 0 || context <= 1 || mlp_mult <= 0) {
            throw ConfigError("model config: sizes must be positive (context >= 2)");
        }
        if (hidden % heads != 0) {
            throw ConfigError("model config: hidden size must be divisible by the number of heads");
        }
        if (vocab != kVocabSize) {
            throw ConfigError("model config: vocab size is fixed at 257");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("model config: dropout must be in [0, 1)");
        }
    }

    friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

inline void to_json(nlohmann::json & j, const ModelConfig & c) {
    j = nlohmann::json{{"hidden", c.hidden}, {"layers", c.layers},     {"heads", c.heads},    {"context", c.context},
                       {"vocab", c.vocab},   {"mlp_mult", c.mlp_mult}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json & j, ModelConfig & c) {
    ModelConfig d;
    c.hidden = j.value("hidden", d.hidden);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.context = j.value("context", d.context);
    c.vocab = j.value("vocab", d.vocab);
    c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
    c.dropout = j.value("dropout", d.dropout);
}

template <typename T>
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> data;

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t rows() const noexcept { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const noexcept { return shape.size() < 2 ? 1 : shape[1]; }
};

/// Ordered named tensors.
template <typename T>
class ParamTable {
public:
    std::size_t add(std::string name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= d;
        }
        index_[name] = tensors_.size();
        tensors_.push_back(Tensor<T>{std::move(name), std::move(shape), std::vector<T>(n, T(0))});
        return tensors_.size() - 1;
    }

    std::size_t size() const noexcept { return tensors_.size(); }
    Tensor<T> & operator[](std::size_t i) { return tensors_[i]; }
    const Tensor<T> & operator[](std::size_t i) const { return tensors_[i]; }

    const Tensor<T> * find(const std::string & name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tensors_[it->second];
    }

    std::size_t index_of(const std::string & name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw CheckpointFormatError("missing tensor '" + name + "'");
        }
        return it->second;
    }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto & t : tensors_) {
            n += t.numel();
        }
        return n;
    }

    void zero() {
        for (auto & t : tensors_) {
            std::fill(t.data.begin(), t.data.end(), T(0));
        }
    }

    ParamTable zeros_like() const {
        ParamTable out;
        for (const auto & t : tensors_) {
            out.add(t.name, t.shape);
        }
        return out;
    }

    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

private:
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct RowMeta {
    std::size_t row = 0;
    std::size_t first_position = 0; // sequence position of the hook input's first row
};

/// Pre-output-head hook: receives the hidden states of one batch row at the
/// positions whose logits are requested (all S, or only the last one during
/// last-position decoding) and returns a matrix of the same shape. Hooks are
/// expected to act on each position independently.
template <typename T>
using HookFn = std::function<Matrix<T>(const Matrix<T> &, const RowMeta &)>;

/// Training-time hook policy: a row maps to a static orthonormal map applied
/// before the head, or nullptr for identity. Linear maps only, so the
/// backward pass can apply the transpose.
using TrainRowPolicy = std::function<const StaticOrthonormalMap *(std::size_t row)>;

template <typename T>
struct ForwardOutput {
    std::vector<Matrix<T>> hidden; // pre-hook, one S x H matrix per row
    std::vector<Matrix<T>> logits; // S x V per row (1 x V when last_only)
};

using Batch = std::vector<std::vector<Token>>;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
Eigen::Map<const RowMat<T>> cmat(const Tensor<T> & t) {
    return Eigen::Map<const RowMat<T>>(t.data.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}
template <typename T>
Eigen::Map<RowMat<T>> mmat(Tensor<T> & t) {
    return Eigen::Map<RowMat<T>>(t.data.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}
template <typename T>
Eigen::Map<const RowVec<T>> crow(const Tensor<T> & t) {
    return Eigen::Map<const RowVec<T>>(t.data.data(), Eigen::Index(t.numel()));
}
template <typename T>
Eigen::Map<RowVec<T>> mrow(Tensor<T> & t) {
    return Eigen::Map<RowVec<T>>(t.data.data(), Eigen::Index(t.numel()));
}

template <typename T>
void layernorm_forward(const RowMat<T> & x, const Tensor<T> & g, const Tensor<T> & b, RowMat<T> & y, ColVec<T> & mean,
                       ColVec<T> & rstd) {
    constexpr T eps = T(1e-5);
    const Eigen::Index n = x.rows(), h = x.cols();
    y.resize(n, h);
    mean.resize(n);
    rstd.resize(n);
    const auto gv = crow(g);
    const auto bv = crow(b);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto xr = x.row(r);
        const T mu = xr.mean();
        const T var = (xr.array() - mu).square().mean();
        const T rs = T(1) / std::sqrt(var + eps);
        mean(r) = mu;
        rstd(r) = rs;
        y.row(r) = ((xr.array() - mu) * rs * gv.array() + bv.array()).matrix();
    }
}

// Adds the column sums of m to a bias gradient. Rows are accumulated in
// order so the result does not depend on buffer alignment.
template <typename T>
void add_column_sums(Tensor<T> & db, const RowMat<T> & m) {
    T * out = db.data.data();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const T * row = m.data() + r * m.cols();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out[c] += row[c];
        }
    }
}

template <typename T>
void layernorm_backward(const RowMat<T> & dy, const RowMat<T> & x, const ColVec<T> & mean, const ColVec<T> & rstd,
                        const Tensor<T> & g, RowMat<T> & dx, Tensor<T> & dg, Tensor<T> & db) {
    const Eigen::Index n = x.rows(), h = x.cols();
    dx.resize(n, h);
    const auto gv = crow(g);
    auto dgv = mrow(dg);
    auto dbv = mrow(db);
    RowVec<T> xhat(h), dxhat(h);
    for (Eigen::Index r = 0; r < n; ++r) {
        xhat = (x.row(r).array() - mean(r)) * rstd(r);
        dgv.array() += dy.row(r).array() * xhat.array();
        dbv += dy.row(r);
        dxhat = (dy.row(r).array() * gv.array()).matrix();
        const T m1 = dxhat.mean();
        const T m2 = (dxhat.array() * xhat.array()).mean();
        dx.row(r) = ((dxhat.array() - m1 - xhat.array() * m2) * rstd(r)).matrix();
    }
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

/// Tanh-approximated GELU, vectorized. Also returns the tanh term, which the
/// backward pass reuses.
template <typename Mat>
void gelu_forward(const Mat & u, Mat & t, Mat & g) {
    using T = typename Mat::Scalar;
    const auto ua = u.array();
    t = (T(kGeluC) * (ua + T(kGeluA) * ua * ua * ua)).tanh().matrix();
    g = (T(0.5) * ua * (T(1) + t.array())).matrix();
}

template <typename Mat>
void gelu_backward(const Mat & u, const Mat & t, Mat & dg) {
    using T = typename Mat::Scalar;
    const auto ua = u.array();
    const auto ta = t.array();
    dg.array() *= T(0.5) * (T(1) + ta) +
                  T(0.5) * ua * (T(1) - ta * ta) * T(kGeluC) * (T(1) + T(3 * kGeluA) * ua * ua);
}

} // namespace detail

template <typename T>
class TinyLM {
public:
    using Scalar = T;
    using RowMat = detail::RowMat<T>;
    using ColVec = detail::ColVec<T>;

    TinyLM(ModelConfig config, ParamTable<T> params) : config_(config), params_(std::move(params)) {
        config_.validate();
        detail::keep_large_buffers_on_heap();
        bind();
    }

    /// Parameter layout with every tensor zero-filled.
    static ParamTable<T> layout(const ModelConfig & c) {
        c.validate();
        const std::size_t h = std::size_t(c.hidden), v = std::size_t(c.vocab), f = std::size_t(c.mlp_hidden());
        ParamTable<T> p;
        p.add("tok_emb", {v, h});
        p.add("pos_emb", {std::size_t(c.context), h});
        for (int l = 0; l < c.layers; ++l) {
            const std::string pre = "layers." + std::to_string(l) + ".";
            p.add(pre + "ln1.weight", {h});
            p.add(pre + "ln1.bias", {h});
            p.add(pre + "attn.qkv.weight", {3 * h, h});
            p.add(pre + "attn.qkv.bias", {3 * h});
            p.add(pre + "attn.out.weight", {h, h});
            p.add(pre + "attn.out.bias", {h});
            p.add(pre + "ln2.weight", {h});
            p.add(pre + "ln2.bias", {h});
            p.add(pre + "mlp.fc.weight", {f, h});
            p.add(pre + "mlp.fc.bias", {f});
            p.add(pre + "mlp.proj.weight", {h, f});
            p.add(pre + "mlp.proj.bias", {h});
        }
        p.add("ln_f.weight", {h});
        p.add("ln_f.bias", {h});
        p.add("head.weight", {v, h});
        p.add("head.bias", {v});
        return p;
    }

    /// Gaussian(0, 0.02) weights, residual projections scaled by 1/sqrt(2L),
    /// unit LayerNorm gains, zero biases.
    static TinyLM init(const ModelConfig & c, uint64_t seed) {
        ParamTable<T> p = layout(c);
        SeedStream s = SeedStream::from_u64(seed, "kotg/init");
        const double resid = 0.02 / std::sqrt(2.0 * c.layers);
        for (auto & t : p) {
            const auto & n = t.name;
            auto ends = [&](const char * suf) {
                const std::string ss(suf);
                return n.size() >= ss.size() && n.compare(n.size() - ss.size(), ss.size(), ss) == 0;
            };
            if (ends("ln1.weight") || ends("ln2.weight") || n == "ln_f.weight") {
                std::fill(t.data.begin(), t.data.end(), T(1));
            } else if (t.shape.size() == 2) {
                const double sd = (ends("attn.out.weight") || ends("mlp.proj.weight")) ? resid : 0.02;
                for (auto & x : t.data) {
                    x = T(sd * s.gaussian());
                }
            }
        }
        return TinyLM(c, std::move(p));
    }

    const ModelConfig & config() const noexcept { return config_; }
    const ParamTable<T> & params() const noexcept { return params_; }
    ParamTable<T> & params() noexcept { return params_; }

    template <typename U>
    TinyLM<U> cast() const {
        ParamTable<U> p = TinyLM<U>::layout(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            for (std::size_t j = 0; j < params_[i].numel(); ++j) {
                p[i].data[j] = U(params_[i].data[j]);
            }
        }
        return TinyLM<U>(config_, std::move(p));
    }

    void check_batch(const Batch & batch) const {
        if (batch.empty()) {
            throw LengthError("empty batch");
        }
        for (const auto & seq : batch) {
            if (seq.empty()) {
                throw LengthError("empty sequence");
            }
            if (seq.size() > std::size_t(config_.context)) {
                throw LengthError("sequence of length " + std::to_string(seq.size()) + " exceeds context " +
                                  std::to_string(config_.context));
            }
            for (Token t : seq) {
                if (t < 0 || t >= config_.vocab) {
                    throw VocabError("token id " + std::to_string(t) + " outside vocabulary");
                }
            }
        }
    }

    /// Inference forward pass. Rows may have different lengths; each is
    /// processed causally on its own, so no padding is involved.
    ForwardOutput<T> forward(const Batch & batch, const HookFn<T> * hook = nullptr, bool last_only = false) const {
        check_batch(batch);
        Acts a;
        run_trunk(batch, a, nullptr);
        const Eigen::Index h = config_.hidden;
        ForwardOutput<T> out;
        out.hidden.reserve(batch.size());
        out.logits.reserve(batch.size());
        const auto wh = detail::cmat(params_[head_w_]);
        const auto bh = detail::crow(params_[head_b_]);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Eigen::Index s0 = Eigen::Index(a.offsets[b]);
            const Eigen::Index len = Eigen::Index(batch[b].size());
            Matrix<T> hid{static_cast<std::size_t>(len), static_cast<std::size_t>(h), T(0)};
            Eigen::Map<RowMat>(hid.data(), len, h) = a.hf.block(s0, 0, len, h);
            const Eigen::Index first = last_only ? len - 1 : 0;
            const Eigen::Index nrows = len - first;
            Matrix<T> used;
            const T * head_in = hid.data() + first * h;
            if (hook != nullptr && *hook) {
                Matrix<T> in{static_cast<std::size_t>(nrows), static_cast<std::size_t>(h), T(0)};
                std::copy(hid.data() + first * h, hid.data() + len * h, in.data());
                used = (*hook)(in, RowMeta{b, std::size_t(first)});
                if (used.rows() != in.rows() || used.cols() != in.cols()) {
                    throw DimensionError("hook changed the hidden-state shape");
                }
                head_in = used.data();
            }
            Eigen::Map<const RowMat> um(head_in, nrows, h);
            Matrix<T> logits(std::size_t(nrows), std::size_t(config_.vocab));
            Eigen::Map<RowMat> lm(logits.data(), nrows, config_.vocab);
            lm.noalias() = um * wh.transpose();
            lm.rowwise() += bh;
            out.hidden.push_back(std::move(hid));
            out.logits.push_back(std::move(logits));
        }
        return out;
    }

    /// Mean next-token cross-entropy over all predicted positions of the
    /// batch (every position but the last of each row).
    T loss(const Batch & batch, const TrainRowPolicy & policy = {}) const {
        check_batch(batch);
        Acts a;
        run_trunk(batch, a, nullptr);
        apply_train_policy(batch, a, policy);
        return head_loss(batch, a, nullptr);
    }

    /// Loss and gradients (accumulated into `grads`, which must share the
    /// parameter layout). `dropout_stream` is required when dropout > 0.
    T loss_and_grad(const Batch & batch, const TrainRowPolicy & policy, ParamTable<T> & grads,
                    SeedStream * dropout_stream = nullptr) const {
        check_batch(batch);
        Acts a;
        run_trunk(batch, a, config_.dropout > 0.0 ? dropout_stream : nullptr);
        apply_train_policy(batch, a, policy);
        RowMat dht;
        const T l = head_loss(batch, a, &dht, &grads);
        backward(batch, a, policy, dht, grads);
        return l;
    }

private:
    struct LayerIds {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };

    struct LayerActs {
        RowMat x_in, ln1, qkv, ctx, x_mid, ln2, u, t, g;
        ColVec mean1, rstd1, mean2, rstd2;
        std::vector<RowMat> probs; // per (row, head)
        RowMat mask1, mask2;       // dropout masks (empty when unused)
    };

    struct Acts {
        std::vector<std::size_t> offsets;
        std::vector<LayerActs> layers;
        RowMat x_final, hf, ht;
        ColVec meanf, rstdf;
    };

    void bind() {
        const ParamTable<T> expect = layout(config_);
        if (expect.size() != params_.size()) {
            throw CheckpointFormatError("parameter table does not match the model config");
        }
        for (std::size_t i = 0; i < expect.size(); ++i) {
            if (expect[i].name != params_[i].name || expect[i].shape != params_[i].shape) {
                throw CheckpointFormatError("parameter '" + params_[i].name + "' does not match the model layout");
            }
        }
        tok_ = params_.index_of("tok_emb");
        pos_ = params_.index_of("pos_emb");
        layer_ids_.clear();
        for (int l = 0; l < config_.layers; ++l) {
            const std::string pre = "layers." + std::to_string(l) + ".";
            layer_ids_.push_back(LayerIds{
                params_.index_of(pre + "ln1.weight"), params_.index_of(pre + "ln1.bias"),
                params_.index_of(pre + "attn.qkv.weight"), params_.index_of(pre + "attn.qkv.bias"),
                params_.index_of(pre + "attn.out.weight"), params_.index_of(pre + "attn.out.bias"),
                params_.index_of(pre + "ln2.weight"), params_.index_of(pre + "ln2.bias"),
                params_.index_of(pre + "mlp.fc.weight"), params_.index_of(pre + "mlp.fc.bias"),
                params_.index_of(pre + "mlp.proj.weight"), params_.index_of(pre + "mlp.proj.bias")});
        }
        lnf_g_ = params_.index_of("ln_f.weight");
        lnf_b_ = params_.index_of("ln_f.bias");
        head_w_ = params_.index_of("head.weight");
        head_b_ = params_.index_of("head.bias");
    }

    static void dropout_mask(RowMat & mask, Eigen::Index rows, Eigen::Index cols, double p, SeedStream & s) {
        mask.resize(rows, cols);
        const T keep_scale = T(1.0 / (1.0 - p));
        const unsigned threshold = unsigned(std::lround(p * 256.0));
        for (Eigen::Index i = 0; i < mask.size(); ++i) {
            mask.data()[i] = s.next_byte() < threshold ? T(0) : keep_scale;
        }
    }

    void run_trunk(const Batch & batch, Acts & a, SeedStream * drop) const {
        const Eigen::Index h = config_.hidden;
        const int nh = config_.heads;
        const Eigen::Index d = config_.head_dim();
        const T scale = T(1) / std::sqrt(T(d));

        a.offsets.assign(batch.size() + 1, 0);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            a.offsets[b + 1] = a.offsets[b] + batch[b].size();
        }
        const Eigen::Index n = Eigen::Index(a.offsets.back());

        RowMat x(n, h);
        const auto & tok = params_[tok_];
        const auto & pos = params_[pos_];
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (std::size_t i = 0; i < batch[b].size(); ++i) {
                const Eigen::Index r = Eigen::Index(a.offsets[b] + i);
                const T * te = tok.data.data() + std::size_t(batch[b][i]) * std::size_t(h);
                const T * pe = pos.data.data() + i * std::size_t(h);
                for (Eigen::Index c = 0; c < h; ++c) {
                    x(r, c) = te[c] + pe[c];
                }
            }
        }

        a.layers.resize(std::size_t(config_.layers));
        for (int l = 0; l < config_.layers; ++l) {
            const LayerIds & id = layer_ids_[std::size_t(l)];
            LayerActs & la = a.layers[std::size_t(l)];
            la.x_in = x;
            detail::layernorm_forward(x, params_[id.ln1_g], params_[id.ln1_b], la.ln1, la.mean1, la.rstd1);
            la.qkv.noalias() = la.ln1 * detail::cmat(params_[id.w_qkv]).transpose();
            la.qkv.rowwise() += detail::crow(params_[id.b_qkv]);

            la.ctx.setZero(n, h);
            la.probs.resize(batch.size() * std::size_t(nh));
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const Eigen::Index s0 = Eigen::Index(a.offsets[b]);
                const Eigen::Index len = Eigen::Index(batch[b].size());
                for (int hd = 0; hd < nh; ++hd) {
                    const auto q = la.qkv.block(s0, hd * d, len, d);
                    const auto k = la.qkv.block(s0, h + hd * d, len, d);
                    const auto v = la.qkv.block(s0, 2 * h + hd * d, len, d);
                    RowMat & p = la.probs[b * std::size_t(nh) + std::size_t(hd)];
                    p.noalias() = (q * k.transpose()) * scale;
                    for (Eigen::Index i = 0; i < len; ++i) {
                        const T mx = p.row(i).head(i + 1).maxCoeff();
                        T sum = T(0);
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            const T e = std::exp(p(i, j) - mx);
                            p(i, j) = e;
                            sum += e;
                        }
                        const T inv = T(1) / sum;
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            p(i, j) *= inv;
                        }
                        for (Eigen::Index j = i + 1; j < len; ++j) {
                            p(i, j) = T(0);
                        }
                    }
                    la.ctx.block(s0, hd * d, len, d).noalias() = p * v;
                }
            }
            RowMat o = la.ctx * detail::cmat(params_[id.w_o]).transpose();
            o.rowwise() += detail::crow(params_[id.b_o]);
            if (drop != nullptr) {
                dropout_mask(la.mask1, n, h, config_.dropout, *drop);
                o.array() *= la.mask1.array();
            }
            x += o;
            la.x_mid = x;

            detail::layernorm_forward(x, params_[id.ln2_g], params_[id.ln2_b], la.ln2, la.mean2, la.rstd2);
            la.u.noalias() = la.ln2 * detail::cmat(params_[id.w_fc]).transpose();
            la.u.rowwise() += detail::crow(params_[id.b_fc]);
            detail::gelu_forward(la.u, la.t, la.g);
            RowMat y = la.g * detail::cmat(params_[id.w_proj]).transpose();
            y.rowwise() += detail::crow(params_[id.b_proj]);
            if (drop != nullptr) {
                dropout_mask(la.mask2, n, h, config_.dropout, *drop);
                y.array() *= la.mask2.array();
            }
            x += y;
        }
        a.x_final = std::move(x);
        detail::layernorm_forward(a.x_final, params_[lnf_g_], params_[lnf_b_], a.hf, a.meanf, a.rstdf);
    }

    void apply_train_policy(const Batch & batch, Acts & a, const TrainRowPolicy & policy) const {
        a.ht = a.hf;
        if (!policy) {
            return;
        }
        const Eigen::Index h = config_.hidden;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const StaticOrthonormalMap * map = policy(b);
            if (map == nullptr) {
                continue;
            }
            if (map->dim() != std::size_t(h)) {
                throw DimensionError("training map dimension differs from the model hidden size");
            }
            const Eigen::Index s0 = Eigen::Index(a.offsets[b]);
            const Eigen::Index len = Eigen::Index(batch[b].size());
            Eigen::Map<const detail::RowMat<float>> q(map->q.data(), h, h);
            a.ht.block(s0, 0, len, h).noalias() = a.hf.block(s0, 0, len, h) * q.template cast<T>();
        }
    }

    // Computes logits from a.ht, the loss, and optionally dL/d(ht) plus the
    // head gradients.
    T head_loss(const Batch & batch, const Acts & a, RowMat * dht, ParamTable<T> * grads = nullptr) const {
        const Eigen::Index n = a.ht.rows();
        const Eigen::Index v = config_.vocab;
        RowMat logits = a.ht * detail::cmat(params_[head_w_]).transpose();
        logits.rowwise() += detail::crow(params_[head_b_]);

        std::size_t count = 0;
        for (const auto & seq : batch) {
            count += seq.size() - 1;
        }
        if (count == 0) {
            throw LengthError("batch has no next-token targets");
        }
        const T inv_count = T(1) / T(count);
        double total = 0.0;
        RowMat dlogits;
        if (dht != nullptr) {
            dlogits.setZero(n, v);
        }
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (std::size_t i = 0; i + 1 < batch[b].size(); ++i) {
                const Eigen::Index r = Eigen::Index(a.offsets[b] + i);
                const Token target = batch[b][i + 1];
                const auto row = logits.row(r);
                const T mx = row.maxCoeff();
                const T sum = (row.array() - mx).exp().sum();
                const T lse = mx + std::log(sum);
                total += double(lse - row(target));
                if (dht != nullptr) {
                    dlogits.row(r) = ((row.array() - lse).exp() * inv_count).matrix();
                    dlogits(r, target) -= inv_count;
                }
            }
        }
        if (dht != nullptr) {
            auto & gw = (*grads)[head_w_];
            auto & gb = (*grads)[head_b_];
            detail::mmat(gw).noalias() += dlogits.transpose() * a.ht;
            detail::add_column_sums(gb, dlogits);
            dht->noalias() = dlogits * detail::cmat(params_[head_w_]);
        }
        return T(total / double(count));
    }

    void backward(const Batch & batch, const Acts & a, const TrainRowPolicy & policy, RowMat & dht,
                  ParamTable<T> & grads) const {
        const Eigen::Index h = config_.hidden;
        const int nh = config_.heads;
        const Eigen::Index d = config_.head_dim();
        const T scale = T(1) / std::sqrt(T(d));

        // Through the training hook: d(hf) = d(ht) * Q^T on scrambled rows.
        if (policy) {
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const StaticOrthonormalMap * map = policy(b);
                if (map == nullptr) {
                    continue;
                }
                const Eigen::Index s0 = Eigen::Index(a.offsets[b]);
                const Eigen::Index len = Eigen::Index(batch[b].size());
                Eigen::Map<const detail::RowMat<float>> q(map->q.data(), h, h);
                RowMat blk = dht.block(s0, 0, len, h) * q.template cast<T>().transpose();
                dht.block(s0, 0, len, h) = blk;
            }
        }

        RowMat dx;
        detail::layernorm_backward(dht, a.x_final, a.meanf, a.rstdf, params_[lnf_g_], dx, grads[lnf_g_],
                                   grads[lnf_b_]);

        for (int l = config_.layers - 1; l >= 0; --l) {
            const LayerIds & id = layer_ids_[std::size_t(l)];
            const LayerActs & la = a.layers[std::size_t(l)];

            // MLP branch.
            RowMat dy = dx;
            if (la.mask2.size() > 0) {
                dy.array() *= la.mask2.array();
            }
            detail::mmat(grads[id.w_proj]).noalias() += dy.transpose() * la.g;
            detail::add_column_sums(grads[id.b_proj], dy);
            RowMat dg = dy * detail::cmat(params_[id.w_proj]);
            detail::gelu_backward(la.u, la.t, dg);
            const RowMat & du = dg;
            detail::mmat(grads[id.w_fc]).noalias() += du.transpose() * la.ln2;
            detail::add_column_sums(grads[id.b_fc], du);
            RowMat dln2 = du * detail::cmat(params_[id.w_fc]);
            RowMat dxm;
            detail::layernorm_backward(dln2, la.x_mid, la.mean2, la.rstd2, params_[id.ln2_g], dxm, grads[id.ln2_g],
                                       grads[id.ln2_b]);
            dx += dxm;

            // Attention branch.
            RowMat dout = dx;
            if (la.mask1.size() > 0) {
                dout.array() *= la.mask1.array();
            }
            detail::mmat(grads[id.w_o]).noalias() += dout.transpose() * la.ctx;
            detail::add_column_sums(grads[id.b_o], dout);
            RowMat dctx = dout * detail::cmat(params_[id.w_o]);
            RowMat dqkv = RowMat::Zero(la.qkv.rows(), la.qkv.cols());
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const Eigen::Index s0 = Eigen::Index(a.offsets[b]);
                const Eigen::Index len = Eigen::Index(batch[b].size());
                for (int hd = 0; hd < nh; ++hd) {
                    const auto q = la.qkv.block(s0, hd * d, len, d);
                    const auto k = la.qkv.block(s0, h + hd * d, len, d);
                    const auto v = la.qkv.block(s0, 2 * h + hd * d, len, d);
                    const RowMat & p = la.probs[b * std::size_t(nh) + std::size_t(hd)];
                    const auto dc = dctx.block(s0, hd * d, len, d);
                    RowMat dp = dc * v.transpose();
                    dqkv.block(s0, 2 * h + hd * d, len, d).noalias() += p.transpose() * dc;
                    ColVec rs = (dp.array() * p.array()).rowwise().sum();
                    RowMat ds = (p.array() * (dp.colwise() - rs).array()).matrix() * scale;
                    dqkv.block(s0, hd * d, len, d).noalias() += ds * k;
                    dqkv.block(s0, h + hd * d, len, d).noalias() += ds.transpose() * q;
                }
            }
            detail::mmat(grads[id.w_qkv]).noalias() += dqkv.transpose() * la.ln1;
            detail::add_column_sums(grads[id.b_qkv], dqkv);
            RowMat dln1 = dqkv * detail::cmat(params_[id.w_qkv]);
            RowMat dxi;
            detail::layernorm_backward(dln1, la.x_in, la.mean1, la.rstd1, params_[id.ln1_g], dxi, grads[id.ln1_g],
                                       grads[id.ln1_b]);
            dx += dxi;
        }

        auto & gt = grads[tok_];
        auto & gp = grads[pos_];
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (std::size_t i = 0; i < batch[b].size(); ++i) {
                const Eigen::Index r = Eigen::Index(a.offsets[b] + i);
                T * te = gt.data.data() + std::size_t(batch[b][i]) * std::size_t(h);
                T * pe = gp.data.data() + i * std::size_t(h);
                for (Eigen::Index c = 0; c < h; ++c) {
                    te[c] += dx(r, c);
                    pe[c] += dx(r, c);
                }
            }
        }
    }

    ModelConfig config_;
    ParamTable<T> params_;
    std::size_t tok_ = 0, pos_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
    std::vector<LayerIds> layer_ids_;
};

using Model = TinyLM<float>;

} // namespace kotg
