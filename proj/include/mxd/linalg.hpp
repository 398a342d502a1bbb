#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxd/error.hpp"
#include "mxd/rng.hpp"
#include "mxd/tensor.hpp"

namespace mxd {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Vector<T> hadamard(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw DimensionError("hadamard length mismatch", a.size(), b.size());
    Vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class T>
Vector<T> hadamard(const Vector<T>& a, const Vector<T>& b) {
    return hadamard<T>(std::span<const T>(a), std::span<const T>(b));
}

// ---------------------------------------------------------------------------
// TopK
// ---------------------------------------------------------------------------

/// Sparse vector produced by TopK: `values[j]` sits at position `indices[j]`
/// of a `dim`-length vector. Indices are strictly increasing.
template <class T>
struct SparseCoeffs {
    std::size_t dim = 0;
    std::vector<std::size_t> indices;
    std::vector<T> values;

    std::size_t k() const noexcept { return indices.size(); }

    Vector<T> densify() const {
        Vector<T> out(dim, T(0));
        for (std::size_t j = 0; j < indices.size(); ++j) out[indices[j]] = values[j];
        return out;
    }
};

/// Keeps the k largest entries of v (after ReLU when `pre_relu`). Ties go to
/// the lowest index. The kept values are stored in index order.
template <class T>
SparseCoeffs<T> topk(std::span<const T> v, std::size_t k, bool pre_relu = false) {
    if (k == 0 || k > v.size())
        throw DomainError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(v.size()) + "]");
    auto value_at = [&](std::size_t i) { return pre_relu ? std::max(v[i], T(0)) : v[i]; };

    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        const T va = value_at(a), vb = value_at(b);
        return va > vb || (va == vb && a < b);
    };
    if (k < v.size()) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
    order.resize(k);
    std::sort(order.begin(), order.end());

    SparseCoeffs<T> out;
    out.dim = v.size();
    out.indices = std::move(order);
    out.values.reserve(k);
    for (std::size_t i : out.indices) out.values.push_back(value_at(i));
    return out;
}

template <class T>
SparseCoeffs<T> topk(const Vector<T>& v, std::size_t k, bool pre_relu = false) {
    return topk<T>(std::span<const T>(v), k, pre_relu);
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, gelu, gelu_tanh, swish, identity };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::gelu_tanh: return "gelu_tanh";
        case Activation::swish: return "swish";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation parse_activation(std::string_view s) {
    for (Activation a : {Activation::relu, Activation::gelu, Activation::gelu_tanh, Activation::swish, Activation::identity})
        if (to_string(a) == s) return a;
    throw DomainError("unknown activation '" + std::string(s) + "'");
}

/// GELU is the exact x·Φ(x) form; `gelu_tanh` selects the tanh approximation.
template <class T>
T activate(Activation kind, T x) {
    switch (kind) {
        case Activation::relu: return x > T(0) ? x : T(0);
        case Activation::gelu: return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
        case Activation::gelu_tanh: {
            const T c = T(0.7978845608028654);  // sqrt(2/pi)
            return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
        }
        case Activation::swish: return x / (T(1) + std::exp(-x));
        case Activation::identity: return x;
    }
    return x;
}

template <class T>
T activate_grad(Activation kind, T x) {
    switch (kind) {
        case Activation::relu: return x > T(0) ? T(1) : T(0);
        case Activation::gelu: {
            const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
            const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
            return cdf + x * pdf;
        }
        case Activation::gelu_tanh: {
            const T c = T(0.7978845608028654);
            const T inner = c * (x + T(0.044715) * x * x * x);
            const T t = std::tanh(inner);
            const T dinner = c * (T(1) + T(3) * T(0.044715) * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dinner;
        }
        case Activation::swish: {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s + x * s * (T(1) - s);
        }
        case Activation::identity: return T(1);
    }
    return T(1);
}

template <class T>
Vector<T> activation(Activation kind, std::span<const T> v) {
    Vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate(kind, v[i]);
    return out;
}

template <class T>
Vector<T> activation(Activation kind, const Vector<T>& v) {
    return activation<T>(kind, std::span<const T>(v));
}

// ---------------------------------------------------------------------------
// Singular values and numerical rank
// ---------------------------------------------------------------------------

/// Singular values (descending) by one-sided Jacobi rotations in double
/// precision. Works on the orientation with fewer columns.
template <class T>
std::vector<double> singular_values(const Matrix<T>& m) {
    if (m.rows() == 0 || m.cols() == 0) throw DomainError("singular_values: empty matrix");
    if (!m.all_finite()) throw DomainError("singular_values: non-finite entry");

    const bool flip = m.cols() > m.rows();
    const std::size_t n = flip ? m.rows() : m.cols();  // columns processed
    const std::size_t len = flip ? m.cols() : m.rows();
    // Column-major working copy: column j occupies a[j*len .. j*len+len).
    std::vector<double> a(n * len);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < len; ++i)
            a[j * len + i] = static_cast<double>(flip ? m(j, i) : m(i, j));

    const double tol = std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            double* cp = a.data() + p * len;
            for (std::size_t q = p + 1; q < n; ++q) {
                double* cq = a.data() + q * len;
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < len; ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < len; ++i) {
                    const double x = cp[i], y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < len; ++i) acc += a[j * len + i] * a[j * len + i];
        sv[j] = std::sqrt(acc);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

/// Default multiplier on max(rows, cols)·σ_max·ε.
inline constexpr double kRankToleranceFactor = 10.0;

/// Number of singular values above max(rows, cols)·σ_max·ε_T·tolerance_factor,
/// where ε_T is the machine epsilon of the matrix's own scalar type.
template <class T>
std::size_t numerical_rank(const Matrix<T>& m, double tolerance_factor = kRankToleranceFactor) {
    const auto sv = singular_values(m);
    if (sv.front() == 0.0) return 0;
    const double eps = static_cast<double>(std::numeric_limits<T>::epsilon());
    const double threshold = static_cast<double>(std::max(m.rows(), m.cols())) * sv.front() * eps * tolerance_factor;
    return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s > threshold; }));
}

// ---------------------------------------------------------------------------
// Khatri-Rao
// ---------------------------------------------------------------------------

/// Column-wise Kronecker product of C (N×O) and D (H×O): an (N·H)×O matrix
/// whose row n·H + h equals c_n ⊙ d_h.
template <class T>
Matrix<T> khatri_rao(const Matrix<T>& c, const Matrix<T>& d) {
    if (c.cols() != d.cols()) throw DimensionError("khatri_rao column mismatch", c.cols(), d.cols());
    const std::size_t cols = c.cols();
    Matrix<T> out(c.rows() * d.rows(), cols);
    for (std::size_t n = 0; n < c.rows(); ++n)
        for (std::size_t h = 0; h < d.rows(); ++h) {
            T* orow = out.data() + (n * d.rows() + h) * cols;
            for (std::size_t o = 0; o < cols; ++o) orow[o] = c(n, o) * d(h, o);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

enum class InitScheme { kaiming_uniform, zeros, empirical_mean_bias };

inline InitScheme parse_init_scheme(std::string_view s) {
    if (s == "kaiming_uniform") return InitScheme::kaiming_uniform;
    if (s == "zeros") return InitScheme::zeros;
    if (s == "empirical_mean_bias") return InitScheme::empirical_mean_bias;
    throw DomainError("unknown init scheme '" + std::string(s) + "'");
}

/// kaiming_uniform: U(−1/√rows, 1/√rows), rows being the fan-in of an
/// input-major weight. empirical_mean_bias: `rows` copies of the column means
/// of `data` (which must be given and have `cols` columns).
template <class T>
Matrix<T> init_matrix(Rng& rng, std::size_t rows, std::size_t cols, InitScheme scheme,
                      const Matrix<T>* data = nullptr) {
    if (rows == 0 || cols == 0) throw DomainError("init_matrix: dims must be >= 1");
    Matrix<T> m(rows, cols);
    switch (scheme) {
        case InitScheme::zeros: break;
        case InitScheme::kaiming_uniform: {
            const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
            for (T& v : m.flat()) v = static_cast<T>(rng.uniform(-bound, bound));
            break;
        }
        case InitScheme::empirical_mean_bias: {
            if (data == nullptr || data->rows() == 0)
                throw DomainError("init_matrix: empirical_mean_bias needs a non-empty data matrix");
            require_same("empirical_mean_bias columns", data->cols(), cols);
            std::vector<double> mean(cols, 0.0);
            for (std::size_t r = 0; r < data->rows(); ++r)
                for (std::size_t c = 0; c < cols; ++c) mean[c] += static_cast<double>((*data)(r, c));
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) m(r, c) = static_cast<T>(mean[c] / static_cast<double>(data->rows()));
            break;
        }
    }
    return m;
}

template <class T>
Vector<T> column_means(const Matrix<T>& data) {
    Rng unused(0);
    const auto m = init_matrix<T>(unused, 1, data.cols(), InitScheme::empirical_mean_bias, &data);
    return Vector<T>(m.flat().begin(), m.flat().end());
}

} // namespace mxd
