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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "kotg/errors.hpp"

namespace kotg {

namespace detail {

// Training steps and decode calls allocate and free buffers of a few
// megabytes. Above glibc's mmap threshold each of those becomes an
// mmap/munmap pair plus fresh page faults, which costs time and makes
// timings noisy. Process-wide, applied once.
inline void keep_large_buffers_on_heap() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        return true;
    }();
    (void)done;
#endif
}


} // namespace detail

/// Dense row-major matrix with value semantics.
///
/// Used for hidden states (one row per sequence position, one column per
/// hidden unit) and for the small square maps that act on them from the right.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto & row : init) {
            if (row.size() != cols_) {
                throw DimensionError("ragged matrix initializer");
            }
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = T(1);
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T & operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T & operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    T * data() noexcept { return data_.data(); }
    const T * data() const noexcept { return data_.data(); }
    std::vector<T> & values() noexcept { return data_; }
    const std::vector<T> & values() const noexcept { return data_; }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const Matrix & a, const Matrix & b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/// S x H pre-output-head hidden states in the inference dtype.
using HiddenMatrix = Matrix<float>;

template <typename T>
double max_abs_diff(const Matrix<T> & a, const Matrix<T> & b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError("max_abs_diff: shape mismatch");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    }
    return m;
}

template <typename T>
double row_norm(const Matrix<T> & m, std::size_t r) {
    double s = 0.0;
    for (T v : m.row(r)) {
        s += double(v) * double(v);
    }
    return std::sqrt(s);
}

} // namespace kotg
