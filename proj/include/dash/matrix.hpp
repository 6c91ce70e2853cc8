#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "dash/errors.hpp"

// Dense float32 kernels. All loops use a fixed accumulation order and
// 64-bit accumulators inside reductions, so results are bit-reproducible
// across invocations.

namespace dash {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> vals) {
        Matrix m(vals.size(), vals.size() ? vals.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : vals) {
            require(r.size() == m.cols, "Matrix::from_rows: ragged rows");
            std::size_t j = 0;
            for (float v : r) m.at(i, j++) = v;
            ++i;
        }
        return m;
    }

    float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Per-entry boolean companion to a Matrix; nonzero = entry participates.
using Mask = std::vector<std::uint8_t>;

inline Mask causal_mask(std::size_t n) {
    Mask m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1;
    return m;
}

// C = A * B with a fixed i-k-j loop so the k-accumulation order never varies.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        float* out = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const float aik = a.at(i, k);
            const float* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-wise stable softmax. Masked-out entries come back as exact zeros.
// A fully masked row has no attention context and is a contract violation.
inline Matrix softmax_rows(const Matrix& a, const Mask* allowed = nullptr) {
    if (allowed) require(allowed->size() == a.data.size(), "softmax_rows: mask size mismatch");
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < a.cols; ++j) {
            if (allowed && !(*allowed)[i * a.cols + j]) continue;
            any = true;
            mx = std::max(mx, a.at(i, j));
        }
        require(any, "softmax_rows: fully masked row (empty attention context)");
        double denom = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            if (allowed && !(*allowed)[i * a.cols + j]) continue;
            denom += std::exp(static_cast<double>(a.at(i, j)) - static_cast<double>(mx));
        }
        for (std::size_t j = 0; j < a.cols; ++j) {
            if (allowed && !(*allowed)[i * a.cols + j]) {
                out.at(i, j) = 0.0f;
                continue;
            }
            const double e = std::exp(static_cast<double>(a.at(i, j)) - static_cast<double>(mx));
            out.at(i, j) = static_cast<float>(e / denom);
        }
    }
    return out;
}

// out[i] = gain[i] * row[i] / sqrt(mean(row^2) + eps)
inline std::vector<float> rms_norm(std::span<const float> row, std::span<const float> gain,
                                   float eps) {
    require(row.size() == gain.size(), "rms_norm: row/gain length mismatch");
    require(eps >= 0.0f, "rms_norm: negative eps");
    double ms = 0.0;
    for (float v : row) ms += static_cast<double>(v) * static_cast<double>(v);
    ms /= row.empty() ? 1.0 : static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(ms + static_cast<double>(eps));
    std::vector<float> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
        out[i] = static_cast<float>(static_cast<double>(gain[i]) * static_cast<double>(row[i]) * inv);
    return out;
}

inline Matrix rms_norm_rows(const Matrix& a, std::span<const float> gain, float eps) {
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        auto r = rms_norm(a.row(i), gain, eps);
        std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
}

// out[t] = || a[t,*] ||_2, accumulated in double
inline std::vector<float> l2_norm_rows(const Matrix& a) {
    std::vector<float> out(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            const double v = a.at(i, j);
            s += v * v;
        }
        out[i] = static_cast<float>(std::sqrt(s));
    }
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Matrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "sub: shape mismatch");
    Matrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

}  // namespace dash
