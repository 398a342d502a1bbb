#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "mxd/error.hpp"

namespace mxd {

template <class T>
using Vector = std::vector<T>;

/// Dense row-major matrix. Element (r, c) lives at data()[r * cols() + c].
template <class T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require_same("Matrix data length", data_.size(), rows_ * cols_);
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }

    Vector<T> col(std::size_t c) const {
        Vector<T> out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }

    Matrix transposed() const {
        Matrix out(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <class U, class T>
Vector<U> cast_vector(std::span<const T> v) {
    Vector<U> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](T x) { return static_cast<U>(x); });
    return out;
}

// Dense kernels. Loops run in a fixed order so results are reproducible.

/// out = Mᵀ v, with M of shape R×C and v of length R.
template <class T>
void gemv_t(const Matrix<T>& m, std::span<const T> v, std::span<T> out) {
    require_same("gemv_t input", v.size(), m.rows());
    require_same("gemv_t output", out.size(), m.cols());
    std::fill(out.begin(), out.end(), T(0));
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const T s = v[r];
        if (s == T(0)) continue;
        const T* row = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += s * row[c];
    }
}

template <class T>
Vector<T> gemv_t(const Matrix<T>& m, std::span<const T> v) {
    Vector<T> out(m.cols());
    gemv_t<T>(m, v, out);
    return out;
}

/// out = M v, with M of shape R×C and v of length C.
template <class T>
void gemv(const Matrix<T>& m, std::span<const T> v, std::span<T> out) {
    require_same("gemv input", v.size(), m.cols());
    require_same("gemv output", out.size(), m.rows());
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const T* row = m.data() + r * cols;
        T acc = T(0);
        for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
        out[r] = acc;
    }
}

template <class T>
Vector<T> gemv(const Matrix<T>& m, std::span<const T> v) {
    Vector<T> out(m.rows());
    gemv<T>(m, v, out);
    return out;
}

/// M += scale · u vᵀ
template <class T>
void add_outer(Matrix<T>& m, std::span<const T> u, std::span<const T> v, T scale = T(1)) {
    require_same("add_outer rows", u.size(), m.rows());
    require_same("add_outer cols", v.size(), m.cols());
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const T s = scale * u[r];
        if (s == T(0)) continue;
        T* row = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) row[c] += s * v[c];
    }
}

/// C = A B
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    require_same("matmul inner", a.cols(), b.rows());
    Matrix<T> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T* orow = out.data() + i * b.cols();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T s = a(i, k);
            const T* brow = b.data() + k * b.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += s * brow[j];
        }
    }
    return out;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
    require_same("dot", a.size(), b.size());
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    require_same("axpy", x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <class T>
T squared_norm(std::span<const T> v) {
    T acc = T(0);
    for (T x : v) acc += x * x;
    return acc;
}

} // namespace mxd
