#pragma once

// Normalized reconstruction objective, analytic gradients for every student
// layer, Adam, and the train-time K schedule.
//
// TopK is treated as a fixed mask in the backward pass: only coordinates that
// survived the forward selection receive gradient.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mxd/error.hpp"
#include "mxd/layers.hpp"
#include "mxd/linalg.hpp"
#include "mxd/rng.hpp"
#include "mxd/tensor.hpp"

namespace mxd {

/// ‖y_true − y_hat‖² / ‖y_true‖.
template <class T>
T loss_normalized_recon(std::span<const T> y_hat, std::span<const T> y_true) {
    require_same("loss length", y_hat.size(), y_true.size());
    const T norm = std::sqrt(squared_norm(y_true));
    if (norm == T(0)) throw DomainError("loss_normalized_recon: target has zero norm");
    T err = T(0);
    for (std::size_t i = 0; i < y_hat.size(); ++i) {
        const T d = y_true[i] - y_hat[i];
        err += d * d;
    }
    return err / norm;
}

/// Mean of the per-row normalized losses.
template <class T>
T loss_normalized_recon(const Matrix<T>& y_hat, const Matrix<T>& y_true) {
    require_same("loss rows", y_hat.rows(), y_true.rows());
    if (y_hat.rows() == 0) throw DomainError("loss_normalized_recon: empty batch");
    double acc = 0;
    for (std::size_t r = 0; r < y_hat.rows(); ++r) acc += loss_normalized_recon<T>(y_hat.row(r), y_true.row(r));
    return static_cast<T>(acc / static_cast<double>(y_hat.rows()));
}

// ---------------------------------------------------------------------------
// Backward passes. Each accumulates `scale`·∂loss/∂θ into `g` (a layer of the
// same shape) and returns the unscaled loss of the single example.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
T loss_and_grad(std::span<const T> y_hat, std::span<const T> y_true, T scale, Vector<T>& dy) {
    const T loss = loss_normalized_recon(y_hat, y_true);
    const T norm = std::sqrt(squared_norm(y_true));
    dy.resize(y_hat.size());
    for (std::size_t i = 0; i < y_hat.size(); ++i) dy[i] = scale * T(2) * (y_hat[i] - y_true[i]) / norm;
    return loss;
}

/// Gate and encoder gradients shared by the MoE family. `da` holds ∂/∂a_j for
/// the kept coefficients (aligned with t.a.indices); `dz` holds ∂/∂z.
template <class T, class L>
void backprop_gate_and_encoder(const L& l, L& g, std::span<const T> x, const MoeTrace<T>& t,
                               std::span<const T> da, std::span<const T> dz) {
    for (std::size_t j = 0; j < t.a.k(); ++j) {
        const std::size_t n = t.a.indices[j];
        T d = da[j];
        if (l.gate_relu && !(t.gate_pre[n] > T(0))) d = T(0);
        if (d == T(0)) continue;
        g.b_gate[n] += d;
        for (std::size_t i = 0; i < x.size(); ++i) g.G(i, n) += x[i] * d;
    }
    const std::size_t H = l.hidden_dim();
    Vector<T> dpre(H);
    if constexpr (requires { l.E_glu; }) {
        if (l.E_glu) {
            Vector<T> dglu(H);
            for (std::size_t h = 0; h < H; ++h) {
                dpre[h] = dz[h] * activate(l.glu_act, t.glu_pre[h]);
                dglu[h] = dz[h] * t.hid_pre[h] * activate_grad(l.glu_act, t.glu_pre[h]);
            }
            add_outer<T>(*g.E_glu, x, dglu);
            add_outer<T>(g.E, x, dpre);
            add_in_place<T>(g.b_enc, dpre);
            return;
        }
    }
    for (std::size_t h = 0; h < H; ++h) dpre[h] = dz[h] * activate_grad(l.enc_act, t.hid_pre[h]);
    add_outer<T>(g.E, x, dpre);
    add_in_place<T>(g.b_enc, dpre);
}

} // namespace detail

template <class T>
T backward(const SparseMlp<T>& l, SparseMlp<T>& g, std::span<const T> x, std::span<const T> y_true,
           std::size_t k = 0, T scale = T(1)) {
    SparseTrace<T> t;
    const Vector<T> y_hat = sparse_mlp_forward(l, x, y_true, k, &t);
    Vector<T> dy;
    const T loss = detail::loss_and_grad<T>(y_hat, y_true, scale, dy);
    const std::span<const T> u = l.input_source() == InputSource::post_mlp ? y_true : x;

    detail::add_in_place<T>(g.b_dec, dy);
    if (l.skip) add_outer<T>(*g.skip, x, dy);
    for (std::size_t j = 0; j < t.z.k(); ++j) {
        const std::size_t h = t.z.indices[j];
        axpy<T>(t.z.values[j], dy, g.D.row(h));
        T d = dot<T>(l.D.row(h), dy);
        if (l.pre_relu && !(t.pre[h] > T(0))) d = T(0);
        if (d == T(0)) continue;
        g.b_enc[h] += d;
        for (std::size_t i = 0; i < u.size(); ++i) g.E(i, h) += u[i] * d;
    }
    return loss;
}

template <class T>
T backward(const Mxd<T>& l, Mxd<T>& g, std::span<const T> x, std::span<const T> y_true, std::size_t k = 0,
           T scale = T(1)) {
    MoeTrace<T> t;
    const Vector<T> y_hat = mxd_forward(l, x, k, &t);
    Vector<T> dy;
    const T loss = detail::loss_and_grad<T>(y_hat, y_true, scale, dy);
    const std::size_t O = l.output_dim();

    detail::add_in_place<T>(g.b_dec, dy);
    Vector<T> dleft(O), dright(O);  // ∂/∂(Cᵀa), ∂/∂(Dᵀz)
    for (std::size_t o = 0; o < O; ++o) {
        dleft[o] = dy[o] * t.right[o];
        dright[o] = dy[o] * t.left[o];
    }
    Vector<T> da(t.a.k());
    for (std::size_t j = 0; j < t.a.k(); ++j) {
        const std::size_t n = t.a.indices[j];
        axpy<T>(t.a.values[j], dleft, g.C.row(n));
        da[j] = dot<T>(l.C.row(n), dleft);
    }
    add_outer<T>(g.D, t.z, dright);
    const Vector<T> dz = gemv<T>(l.D, std::span<const T>(dright));
    detail::backprop_gate_and_encoder<T>(l, g, x, t, da, dz);
    return loss;
}

template <class T>
T backward(const MuMoe<T>& l, MuMoe<T>& g, std::span<const T> x, std::span<const T> y_true, std::size_t k = 0,
           T scale = T(1)) {
    MoeTrace<T> t;
    const Vector<T> y_hat = mumoe_forward(l, x, k, &t);
    Vector<T> dy;
    const T loss = detail::loss_and_grad<T>(y_hat, y_true, scale, dy);
    const std::size_t R = l.rank();

    detail::add_in_place<T>(g.b_dec, dy);
    Vector<T> h(R);
    for (std::size_t r = 0; r < R; ++r) h[r] = t.left[r] * t.right[r];
    add_outer<T>(g.W, dy, h);
    const Vector<T> dh = gemv_t<T>(l.W, std::span<const T>(dy));
    Vector<T> dleft(R), dright(R);
    for (std::size_t r = 0; r < R; ++r) {
        dleft[r] = dh[r] * t.right[r];
        dright[r] = dh[r] * t.left[r];
    }
    Vector<T> da(t.a.k());
    for (std::size_t j = 0; j < t.a.k(); ++j) {
        const std::size_t n = t.a.indices[j];
        T acc = T(0);
        for (std::size_t r = 0; r < R; ++r) {
            g.C(r, n) += dleft[r] * t.a.values[j];
            acc += l.C(r, n) * dleft[r];
        }
        da[j] = acc;
    }
    add_outer<T>(g.D, dright, t.z);
    const Vector<T> dz = gemv_t<T>(l.D, std::span<const T>(dright));
    detail::backprop_gate_and_encoder<T>(l, g, x, t, da, dz);
    return loss;
}

template <class T>
T backward(const Mov<T>& l, Mov<T>& g, std::span<const T> x, std::span<const T> y_true, std::size_t k = 0,
           T scale = T(1)) {
    MoeTrace<T> t;
    const Vector<T> y_hat = mov_forward(l, x, k, &t);
    Vector<T> dy;
    const T loss = detail::loss_and_grad<T>(y_hat, y_true, scale, dy);
    const std::size_t H = l.hidden_dim();

    detail::add_in_place<T>(g.b_dec, dy);
    add_outer<T>(g.D, t.right, dy);
    const Vector<T> dv = gemv<T>(l.D, std::span<const T>(dy));
    Vector<T> dm(H), dz(H);
    for (std::size_t h = 0; h < H; ++h) {
        dm[h] = dv[h] * t.z[h];
        dz[h] = dv[h] * t.left[h];
    }
    Vector<T> da(t.a.k());
    for (std::size_t j = 0; j < t.a.k(); ++j) {
        const std::size_t n = t.a.indices[j];
        axpy<T>(t.a.values[j], dm, g.C.row(n));
        da[j] = dot<T>(l.C.row(n), dm);
    }
    detail::backprop_gate_and_encoder<T>(l, g, x, t, da, dz);
    return loss;
}

template <class T>
concept Trainable = requires(const T& l) { l.k; };

/// Mean normalized loss over the rows `batch` of (X, Y); gradients of that
/// mean are accumulated into `g` (which is zeroed first).
template <class T, class L>
T backward_batch(const L& l, L& g, const Matrix<T>& X, const Matrix<T>& Y, std::span<const std::size_t> batch,
                 std::size_t k = 0) {
    if (batch.empty()) throw DomainError("backward_batch: empty batch");
    if (stored_param_count(g) == stored_param_count(l)) zero_params(g);
    else g = zeros_like(l);
    const T scale = T(1) / static_cast<T>(batch.size());
    double total = 0;
    for (std::size_t r : batch) total += static_cast<double>(backward(l, g, X.row(r), Y.row(r), k, scale));
    return static_cast<T>(total / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are laid out in the parameter visit
/// order of the layer they were created for.
template <class T>
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    std::uint64_t step() const noexcept { return step_; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }

    /// Applies one update to the parameters of `params` from `grads`.
    template <class L>
    void update(L& params, const L& grads) {
        std::vector<std::span<const T>> g;
        grads.visit_params([&](std::string_view, std::size_t, std::size_t, std::span<const T> d) { g.push_back(d); });
        std::vector<std::span<T>> p;
        params.visit_params([&](std::string_view, std::size_t, std::size_t, std::span<T> d) { p.push_back(d); });
        update_spans(p, g);
    }

    void update_spans(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads) {
        require_same("adam tensor count", params.size(), grads.size());
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
        require_same("adam state tensor count", m_.size(), params.size());
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        const double step_size = cfg_.lr / bc1;
        const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
        for (std::size_t t = 0; t < params.size(); ++t) {
            require_same("adam tensor size", params[t].size(), grads[t].size());
            require_same("adam moment size", params[t].size(), m_[t].size());
            auto& m = m_[t];
            auto& v = v_[t];
            const auto p = params[t];
            const auto g = grads[t];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double denom = std::sqrt(v[i]) * inv_sqrt_bc2 + cfg_.eps;
                p[i] = static_cast<T>(static_cast<double>(p[i]) - step_size * m[i] / denom);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// K schedule
// ---------------------------------------------------------------------------

enum class KMode { fixed, random_uniform };

/// Train-time K: fixed, or K̂ ~ Unif{K − K/a, …, K + K/a} (integer division).
class KSchedule {
public:
    KSchedule(std::size_t base_k, KMode mode = KMode::fixed, std::size_t divisor = 2, std::uint64_t seed = 0)
        : base_k_(base_k), mode_(mode), divisor_(divisor), rng_(seed) {
        if (base_k_ == 0) throw DomainError("KSchedule: base_k must be >= 1");
        if (mode_ == KMode::random_uniform) {
            if (divisor_ == 0) throw DomainError("KSchedule: divisor must be >= 1");
            if (base_k_ < divisor_) throw DomainError("KSchedule: base_k must be >= divisor");
        }
    }

    std::size_t base_k() const noexcept { return base_k_; }
    KMode mode() const noexcept { return mode_; }
    std::size_t lower() const noexcept { return mode_ == KMode::fixed ? base_k_ : base_k_ - base_k_ / divisor_; }
    std::size_t upper() const noexcept { return mode_ == KMode::fixed ? base_k_ : base_k_ + base_k_ / divisor_; }

    std::size_t sample() {
        if (mode_ == KMode::fixed) return base_k_;
        return static_cast<std::size_t>(rng_.uniform_int(static_cast<std::int64_t>(lower()), static_cast<std::int64_t>(upper())));
    }

private:
    std::size_t base_k_;
    KMode mode_;
    std::size_t divisor_;
    Rng rng_;
};

inline std::size_t sample_k(KSchedule& s) { return s.sample(); }

} // namespace mxd
