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

// Orthonormal maps acting on hidden states from the right.
//
// Hidden states are row vectors, so a map T is applied as h -> h * T. A
// session transform is the product T = P * S * H(v_1) * ... * H(v_k) of a
// column permutation, a diagonal sign flip and k Householder reflections
// H(v) = I - 2 v v^T; applying it factor by factor costs O(S * H * (k + 2)).
// The inverse applies H(v_k) ... H(v_1), then S, then P^-1.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kotg/errors.hpp"
#include "kotg/matrix.hpp"
#include "kotg/stream.hpp"

namespace kotg {

inline constexpr double kUnitNormTolerance = 1e-6;

namespace detail {

inline void check_permutation(std::span<const uint32_t> perm) {
    std::vector<bool> seen(perm.size(), false);
    for (uint32_t p : perm) {
        if (p >= perm.size() || seen[p]) {
            throw InvariantError("permutation is not a bijection on [0, " + std::to_string(perm.size()) + ")");
        }
        seen[p] = true;
    }
}

inline void check_signs(std::span<const float> signs) {
    for (float s : signs) {
        if (s != 1.0f && s != -1.0f) {
            throw InvariantError("sign entry is not exactly +1 or -1");
        }
    }
}

inline void check_unit(std::span<const float> v) {
    double n2 = 0.0;
    for (float x : v) {
        n2 += double(x) * double(x);
    }
    if (std::abs(std::sqrt(n2) - 1.0) > kUnitNormTolerance) {
        throw InvariantError("Householder vector is not unit norm");
    }
}

template <typename T>
void check_cols(const Matrix<T> & h, std::size_t n, const char * what) {
    if (h.cols() != n) {
        throw DimensionError(std::string(what) + ": expected " + std::to_string(n) + " columns, got " +
                             std::to_string(h.cols()));
    }
}

// In-place kernels; callers have validated their arguments.

template <typename T>
void householder_inplace(Matrix<T> & h, std::span<const float> v) {
    const std::size_t n = v.size();
    for (std::size_t r = 0; r < h.rows(); ++r) {
        T * row = h.data() + r * n;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dot += double(row[i]) * double(v[i]);
        }
        const T scale = T(2.0 * dot);
        for (std::size_t i = 0; i < n; ++i) {
            row[i] -= scale * T(v[i]);
        }
    }
}

template <typename T>
void signs_inplace(Matrix<T> & h, std::span<const float> signs) {
    const std::size_t n = signs.size();
    for (std::size_t r = 0; r < h.rows(); ++r) {
        T * row = h.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            row[i] *= T(signs[i]);
        }
    }
}

template <typename T>
Matrix<T> permute(const Matrix<T> & h, std::span<const uint32_t> perm) {
    Matrix<T> out(h.rows(), h.cols());
    const std::size_t n = perm.size();
    for (std::size_t r = 0; r < h.rows(); ++r) {
        const T * src = h.data() + r * n;
        T * dst = out.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            dst[perm[i]] = src[i];
        }
    }
    return out;
}

} // namespace detail

/// Factored orthonormal map: permutation, signs, k unit Householder vectors.
///
/// perm[i] is the destination column of input column i under forward
/// application. The inverse permutation is computed once at construction.
class SessionTransform {
public:
    SessionTransform() = default;

    SessionTransform(std::vector<uint32_t> perm, std::vector<float> signs, std::vector<std::vector<float>> householders)
        : perm_(std::move(perm)), signs_(std::move(signs)), householders_(std::move(householders)) {
        detail::check_permutation(perm_);
        if (signs_.size() != perm_.size()) {
            throw DimensionError("sign vector length differs from permutation length");
        }
        detail::check_signs(signs_);
        for (const auto & v : householders_) {
            if (v.size() != perm_.size()) {
                throw DimensionError("Householder vector length differs from permutation length");
            }
            detail::check_unit(v);
        }
        inverse_perm_.resize(perm_.size());
        for (std::size_t i = 0; i < perm_.size(); ++i) {
            inverse_perm_[perm_[i]] = uint32_t(i);
        }
    }

    static SessionTransform identity(std::size_t dim) {
        std::vector<uint32_t> perm(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            perm[i] = uint32_t(i);
        }
        return SessionTransform(std::move(perm), std::vector<float>(dim, 1.0f), {});
    }

    std::size_t dim() const noexcept { return perm_.size(); }
    std::size_t k() const noexcept { return householders_.size(); }

    const std::vector<uint32_t> & perm() const noexcept { return perm_; }
    const std::vector<uint32_t> & inverse_perm() const noexcept { return inverse_perm_; }
    const std::vector<float> & signs() const noexcept { return signs_; }
    const std::vector<std::vector<float>> & householders() const noexcept { return householders_; }

    friend bool operator==(const SessionTransform &, const SessionTransform &) = default;

private:
    std::vector<uint32_t> perm_;
    std::vector<uint32_t> inverse_perm_;
    std::vector<float> signs_;
    std::vector<std::vector<float>> householders_;
};

/// Dense H x H orthonormal matrix Q.
struct StaticOrthonormalMap {
    Matrix<float> q;

    std::size_t dim() const noexcept { return q.rows(); }
};

/// h * (I - 2 v v^T).
template <typename T>
Matrix<T> apply_householder(const Matrix<T> & h, std::span<const float> v) {
    detail::check_cols(h, v.size(), "apply_householder");
    detail::check_unit(v);
    Matrix<T> out = h;
    detail::householder_inplace(out, v);
    return out;
}

/// Right-multiplication by the permutation matrix with P[i][perm[i]] = 1.
template <typename T>
Matrix<T> apply_permutation(const Matrix<T> & h, std::span<const uint32_t> perm) {
    detail::check_cols(h, perm.size(), "apply_permutation");
    detail::check_permutation(perm);
    return detail::permute(h, perm);
}

template <typename T>
Matrix<T> apply_signs(const Matrix<T> & h, std::span<const float> signs) {
    detail::check_cols(h, signs.size(), "apply_signs");
    detail::check_signs(signs);
    Matrix<T> out = h;
    detail::signs_inplace(out, signs);
    return out;
}

/// h * P * S * H(v_1) * ... * H(v_k), factor by factor.
template <typename T>
Matrix<T> apply_forward(const Matrix<T> & h, const SessionTransform & t) {
    detail::check_cols(h, t.dim(), "apply_forward");
    Matrix<T> out = detail::permute(h, std::span<const uint32_t>(t.perm()));
    detail::signs_inplace(out, std::span<const float>(t.signs()));
    for (const auto & v : t.householders()) {
        detail::householder_inplace(out, std::span<const float>(v));
    }
    return out;
}

/// h * H(v_k) * ... * H(v_1) * S * P^-1.
template <typename T>
Matrix<T> apply_inverse(const Matrix<T> & h, const SessionTransform & t) {
    detail::check_cols(h, t.dim(), "apply_inverse");
    Matrix<T> out = h;
    for (auto it = t.householders().rbegin(); it != t.householders().rend(); ++it) {
        detail::householder_inplace(out, std::span<const float>(*it));
    }
    detail::signs_inplace(out, std::span<const float>(t.signs()));
    return detail::permute(out, std::span<const uint32_t>(t.inverse_perm()));
}

namespace detail {

// dst[j] += sum_i src[i] * m[i][j] for j in [j0, n).
template <typename T>
void accumulate_rows(const T * src, const float * m, T * dst, std::size_t n, std::size_t j0) {
    for (std::size_t i = 0; i < n; ++i) {
        const T a = src[i];
        const float * mi = m + i * n;
        for (std::size_t j = j0; j < n; ++j) {
            dst[j] += a * T(mi[j]);
        }
    }
}

} // namespace detail

/// h * Q, or h * Q^T when inverse is set.
template <typename T>
Matrix<T> apply_dense(const Matrix<T> & h, const StaticOrthonormalMap & map, bool inverse) {
    const std::size_t n = map.dim();
    detail::check_cols(h, n, "apply_dense");
    Matrix<T> out(h.rows(), n);
    // Row r of the result is sum_i h[r][i] * M[i], with M = Q or Q^T. Both
    // directions use this accumulate-rows form, which vectorizes; a dot
    // product per output entry would not (float reductions stay scalar).
    std::vector<float> qt;
    const float * m = map.q.data();
    if (inverse) {
        qt.resize(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                qt[j * n + i] = m[i * n + j];
            }
        }
        m = qt.data();
    }
    // Blocks of 4 rows x 32 columns keep eight independent accumulator
    // vectors in registers; leftovers take the plain accumulate loop.
    constexpr std::size_t kRows = 4, kCols = 32;
    const std::size_t rows = h.rows();
    std::size_t r0 = 0;
    for (; r0 + kRows <= rows; r0 += kRows) {
        std::size_t j0 = 0;
        for (; j0 + kCols <= n; j0 += kCols) {
            T acc[kRows][kCols] = {};
            for (std::size_t i = 0; i < n; ++i) {
                const float * mi = m + i * n + j0;
                for (std::size_t rr = 0; rr < kRows; ++rr) {
                    const T a = h.data()[(r0 + rr) * n + i];
                    for (std::size_t j = 0; j < kCols; ++j) {
                        acc[rr][j] += a * T(mi[j]);
                    }
                }
            }
            for (std::size_t rr = 0; rr < kRows; ++rr) {
                std::copy(acc[rr], acc[rr] + kCols, out.data() + (r0 + rr) * n + j0);
            }
        }
        for (std::size_t rr = 0; rr < kRows; ++rr) {
            detail::accumulate_rows(h.data() + (r0 + rr) * n, m, out.data() + (r0 + rr) * n, n, j0);
        }
    }
    for (; r0 < rows; ++r0) {
        detail::accumulate_rows(h.data() + r0 * n, m, out.data() + r0 * n, n, 0);
    }
    return out;
}

/// Q from the Householder QR of a seeded Gaussian matrix, with the signs of
/// Q's columns chosen so that R has a non-negative diagonal.
inline StaticOrthonormalMap make_static_orthonormal(uint64_t seed, std::size_t dim) {
    if (dim == 0) {
        throw DimensionError("make_static_orthonormal: dim must be >= 1");
    }
    SeedStream stream = SeedStream::from_u64(seed, "kotg/static-map");
    const std::size_t n = dim;
    std::vector<double> a(n * n);
    for (double & x : a) {
        x = stream.gaussian();
    }

    std::vector<std::vector<double>> reflectors(n);
    std::vector<double> r_diag(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double norm2 = 0.0;
        for (std::size_t i = j; i < n; ++i) {
            norm2 += a[i * n + j] * a[i * n + j];
        }
        const double norm = std::sqrt(norm2);
        if (norm == 0.0) {
            continue;
        }
        const double x0 = a[j * n + j];
        const double alpha = x0 >= 0.0 ? -norm : norm;
        std::vector<double> v(n - j);
        for (std::size_t i = j; i < n; ++i) {
            v[i - j] = a[i * n + j];
        }
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double x : v) {
            vnorm2 += x * x;
        }
        const double vnorm = std::sqrt(vnorm2);
        if (vnorm == 0.0) {
            r_diag[j] = alpha;
            continue;
        }
        for (double & x : v) {
            x /= vnorm;
        }
        for (std::size_t c = j; c < n; ++c) {
            double dot = 0.0;
            for (std::size_t i = j; i < n; ++i) {
                dot += v[i - j] * a[i * n + c];
            }
            for (std::size_t i = j; i < n; ++i) {
                a[i * n + c] -= 2.0 * dot * v[i - j];
            }
        }
        r_diag[j] = a[j * n + j];
        reflectors[j] = std::move(v);
    }

    // Q = H_0 H_1 ... H_{n-1} I, accumulated backwards.
    std::vector<double> q(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        q[i * n + i] = 1.0;
    }
    for (std::size_t jj = n; jj-- > 0;) {
        const auto & v = reflectors[jj];
        if (v.empty()) {
            continue;
        }
        for (std::size_t c = 0; c < n; ++c) {
            double dot = 0.0;
            for (std::size_t i = jj; i < n; ++i) {
                dot += v[i - jj] * q[i * n + c];
            }
            for (std::size_t i = jj; i < n; ++i) {
                q[i * n + c] -= 2.0 * dot * v[i - jj];
            }
        }
    }

    StaticOrthonormalMap map{Matrix<float>(n, n)};
    for (std::size_t c = 0; c < n; ++c) {
        const double s = r_diag[c] < 0.0 ? -1.0 : 1.0;
        for (std::size_t r = 0; r < n; ++r) {
            map.q(r, c) = float(s * q[r * n + c]);
        }
    }
    return map;
}

} // namespace kotg
