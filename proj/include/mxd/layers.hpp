#pragma once

// Teacher MLPs and the sparse layers trained to replace them.
//
// Weight layout is input-major throughout: an encoder maps x ∈ R^I through
// Eᵀx with E of shape I×H, a decoder maps z ∈ R^H through Dᵀz with D of
// shape H×O. Mixture-of-Decoders layers compute
//
//     a = TopK(ReLU(Gᵀx + b_gate)),   z = φ(Eᵀx + b_enc),
//     y = (Cᵀa) ⊙ (Dᵀz) + b_dec,
//
// which equals Σ_n a_n W_nᵀ z for the implicit experts W_n = D·diag(c_n).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "mxd/error.hpp"
#include "mxd/linalg.hpp"
#include "mxd/tensor.hpp"

namespace mxd {

enum class LayerKind : std::uint16_t {
    teacher_mlp = 1,
    teacher_glu = 2,
    sae = 3,
    tc = 4,
    stc = 5,
    mxd = 6,
    mxd_glu = 7,
    mumoe = 8,
    mov = 9,
    toy_lm = 16,
};

inline std::string_view to_string(LayerKind k) {
    switch (k) {
        case LayerKind::teacher_mlp: return "teacher_mlp";
        case LayerKind::teacher_glu: return "teacher_glu";
        case LayerKind::sae: return "sae";
        case LayerKind::tc: return "tc";
        case LayerKind::stc: return "stc";
        case LayerKind::mxd: return "mxd";
        case LayerKind::mxd_glu: return "mxd_glu";
        case LayerKind::mumoe: return "mumoe";
        case LayerKind::mov: return "mov";
        case LayerKind::toy_lm: return "toy_lm";
    }
    return "?";
}

inline LayerKind parse_layer_kind(std::string_view s) {
    for (auto k : {LayerKind::teacher_mlp, LayerKind::teacher_glu, LayerKind::sae, LayerKind::tc, LayerKind::stc,
                   LayerKind::mxd, LayerKind::mxd_glu, LayerKind::mumoe, LayerKind::mov, LayerKind::toy_lm})
        if (to_string(k) == s) return k;
    throw DomainError("unknown layer kind '" + std::string(s) + "'");
}

/// Visitor callback signature used by every layer's `visit_params`:
///     f(std::string_view name, std::size_t rows, std::size_t cols, std::span<T> data)
/// Vectors are reported as rows = 1.
namespace detail {

template <class F, class M>
void visit_matrix(F& f, std::string_view name, M& m) {
    f(name, m.rows(), m.cols(), m.flat());
}

template <class F, class V>
void visit_vector(F& f, std::string_view name, V& v) {
    using Elem = std::remove_reference_t<decltype(v[0])>;
    f(name, std::size_t{1}, v.size(), std::span<Elem>(v.data(), v.size()));
}

template <class T>
void require_dims(const char* what, const Matrix<T>& m, std::size_t rows, std::size_t cols) {
    if (m.rows() != rows) throw DimensionError(std::string(what) + " rows", m.rows(), rows);
    if (m.cols() != cols) throw DimensionError(std::string(what) + " cols", m.cols(), cols);
}

template <class T>
void add_in_place(std::span<T> y, std::span<const T> b) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Teachers
// ---------------------------------------------------------------------------

/// Dense MLP: y = D*ᵀ φ(E*ᵀx + b_enc) + b_dec.
template <class T>
struct TeacherMlp {
    Matrix<T> E;  // I×H*
    Matrix<T> D;  // H*×O
    Vector<T> b_enc;
    Vector<T> b_dec;
    Activation act = Activation::gelu;

    static constexpr LayerKind kind() { return LayerKind::teacher_mlp; }
    std::size_t input_dim() const { return E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return D.cols(); }

    void validate() const {
        detail::require_dims("TeacherMlp.D", D, E.cols(), D.cols());
        require_same("TeacherMlp.b_enc", b_enc.size(), E.cols());
        require_same("TeacherMlp.b_dec", b_dec.size(), D.cols());
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
    }
};

/// Gated MLP: y = D*ᵀ (ψ(E_gluᵀx) ⊙ (Eᵀx + b_enc)) + b_dec.
template <class T>
struct TeacherGlu {
    Matrix<T> E_glu;  // I×H*
    Matrix<T> E;      // I×H*
    Matrix<T> D;      // H*×O
    Vector<T> b_enc;
    Vector<T> b_dec;
    Activation gate_act = Activation::swish;

    static constexpr LayerKind kind() { return LayerKind::teacher_glu; }
    std::size_t input_dim() const { return E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return D.cols(); }

    void validate() const {
        detail::require_dims("TeacherGlu.E_glu", E_glu, E.rows(), E.cols());
        detail::require_dims("TeacherGlu.D", D, E.cols(), D.cols());
        require_same("TeacherGlu.b_enc", b_enc.size(), E.cols());
        require_same("TeacherGlu.b_dec", b_dec.size(), D.cols());
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "E_glu", s.E_glu);
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
    }
};

// ---------------------------------------------------------------------------
// Sparse MLPs: SAE, Transcoder, Skip Transcoder
// ---------------------------------------------------------------------------

enum class InputSource : std::uint8_t { pre_mlp = 0, post_mlp = 1 };

/// y = Dᵀ TopK(Eᵀu + b_enc) + b_dec (+ Sᵀx for skip transcoders), where u is
/// the pre-MLP input x (TC/STC) or the MLP output itself (SAE).
template <class T>
struct SparseMlp {
    LayerKind variant = LayerKind::tc;  // sae | tc | stc
    Matrix<T> E;                        // U×H (U = I, or O for SAE)
    Matrix<T> D;                        // H×O
    Vector<T> b_enc;
    Vector<T> b_dec;
    std::optional<Matrix<T>> skip;  // I×O, present iff variant == stc
    std::size_t k = 1;
    bool pre_relu = true;

    LayerKind kind() const { return variant; }
    InputSource input_source() const { return variant == LayerKind::sae ? InputSource::post_mlp : InputSource::pre_mlp; }
    std::size_t input_dim() const { return skip ? skip->rows() : E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return D.cols(); }

    void validate() const {
        if (variant != LayerKind::sae && variant != LayerKind::tc && variant != LayerKind::stc)
            throw DomainError("SparseMlp variant must be sae, tc or stc");
        detail::require_dims("SparseMlp.D", D, E.cols(), D.cols());
        require_same("SparseMlp.b_enc", b_enc.size(), E.cols());
        require_same("SparseMlp.b_dec", b_dec.size(), D.cols());
        if (skip.has_value() != (variant == LayerKind::stc))
            throw DomainError("SparseMlp: skip matrix present iff variant is stc");
        if (skip) detail::require_dims("SparseMlp.skip", *skip, E.rows(), D.cols());
        if (variant == LayerKind::sae) require_same("SAE encoder input is the output space", E.rows(), D.cols());
        if (k == 0 || k > E.cols()) throw DomainError("SparseMlp: k must be in [1, H]");
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
        if (s.skip) detail::visit_matrix(f, "S", *s.skip);
    }
};

// ---------------------------------------------------------------------------
// Mixture of Decoders
// ---------------------------------------------------------------------------

template <class T>
struct Mxd {
    Matrix<T> G;  // I×N gate
    Matrix<T> E;  // I×H encoder
    Matrix<T> C;  // N×O expert modulation
    Matrix<T> D;  // H×O shared decoder
    Vector<T> b_gate;
    Vector<T> b_enc;
    Vector<T> b_dec;
    std::size_t k = 1;
    Activation enc_act = Activation::gelu;
    std::optional<Matrix<T>> E_glu;  // I×H, present for the GLU variant
    Activation glu_act = Activation::swish;
    bool gate_relu = true;

    LayerKind kind() const { return E_glu ? LayerKind::mxd_glu : LayerKind::mxd; }
    std::size_t input_dim() const { return E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return D.cols(); }
    std::size_t experts() const { return G.cols(); }

    void validate() const {
        detail::require_dims("Mxd.G", G, E.rows(), G.cols());
        detail::require_dims("Mxd.C", C, G.cols(), D.cols());
        detail::require_dims("Mxd.D", D, E.cols(), D.cols());
        if (E_glu) detail::require_dims("Mxd.E_glu", *E_glu, E.rows(), E.cols());
        require_same("Mxd.b_gate", b_gate.size(), G.cols());
        require_same("Mxd.b_enc", b_enc.size(), E.cols());
        require_same("Mxd.b_dec", b_dec.size(), D.cols());
        if (k == 0 || k > G.cols()) throw DomainError("Mxd: k must be in [1, N]");
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "G", s.G);
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "C", s.C);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_vector(f, "b_gate", s.b_gate);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
        if (s.E_glu) detail::visit_matrix(f, "E_glu", *s.E_glu);
    }
};

/// CP-factorized linear MoE: y = W ((C a) ⊙ (D z)) + b_dec with C: R×N,
/// D: R×H, W: O×R.
template <class T>
struct MuMoe {
    Matrix<T> G;  // I×N
    Matrix<T> E;  // I×H
    Matrix<T> C;  // R×N
    Matrix<T> D;  // R×H
    Matrix<T> W;  // O×R
    Vector<T> b_gate;
    Vector<T> b_enc;
    Vector<T> b_dec;
    std::size_t k = 1;
    Activation enc_act = Activation::gelu;
    bool gate_relu = true;

    static constexpr LayerKind kind() { return LayerKind::mumoe; }
    std::size_t input_dim() const { return E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return W.rows(); }
    std::size_t experts() const { return G.cols(); }
    std::size_t rank() const { return W.cols(); }

    void validate() const {
        if (W.cols() == 0) throw DomainError("MuMoe: rank must be >= 1");
        detail::require_dims("MuMoe.G", G, E.rows(), G.cols());
        detail::require_dims("MuMoe.C", C, W.cols(), G.cols());
        detail::require_dims("MuMoe.D", D, W.cols(), E.cols());
        require_same("MuMoe.b_gate", b_gate.size(), G.cols());
        require_same("MuMoe.b_enc", b_enc.size(), E.cols());
        require_same("MuMoe.b_dec", b_dec.size(), W.rows());
        if (k == 0 || k > G.cols()) throw DomainError("MuMoe: k must be in [1, N]");
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "G", s.G);
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "C", s.C);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_matrix(f, "W", s.W);
        detail::visit_vector(f, "b_gate", s.b_gate);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
    }
};

/// Mixture of vectors: experts diag(c_n)·D modulate the hidden dimension,
/// y = Dᵀ((Cᵀa) ⊙ z) + b_dec with C: N×H.
template <class T>
struct Mov {
    Matrix<T> G;  // I×N
    Matrix<T> E;  // I×H
    Matrix<T> C;  // N×H
    Matrix<T> D;  // H×O
    Vector<T> b_gate;
    Vector<T> b_enc;
    Vector<T> b_dec;
    std::size_t k = 1;
    Activation enc_act = Activation::gelu;
    bool gate_relu = true;

    static constexpr LayerKind kind() { return LayerKind::mov; }
    std::size_t input_dim() const { return E.rows(); }
    std::size_t hidden_dim() const { return E.cols(); }
    std::size_t output_dim() const { return D.cols(); }
    std::size_t experts() const { return G.cols(); }

    void validate() const {
        detail::require_dims("Mov.G", G, E.rows(), G.cols());
        detail::require_dims("Mov.C", C, G.cols(), E.cols());
        detail::require_dims("Mov.D", D, E.cols(), D.cols());
        require_same("Mov.b_gate", b_gate.size(), G.cols());
        require_same("Mov.b_enc", b_enc.size(), E.cols());
        require_same("Mov.b_dec", b_dec.size(), D.cols());
        if (k == 0 || k > G.cols()) throw DomainError("Mov: k must be in [1, N]");
    }

    template <class F> void visit_params(F&& f) { visit_impl(*this, f); }
    template <class F> void visit_params(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        detail::visit_matrix(f, "G", s.G);
        detail::visit_matrix(f, "E", s.E);
        detail::visit_matrix(f, "C", s.C);
        detail::visit_matrix(f, "D", s.D);
        detail::visit_vector(f, "b_gate", s.b_gate);
        detail::visit_vector(f, "b_enc", s.b_enc);
        detail::visit_vector(f, "b_dec", s.b_dec);
    }
};

template <class T>
using Layer = std::variant<TeacherMlp<T>, TeacherGlu<T>, SparseMlp<T>, Mxd<T>, MuMoe<T>, Mov<T>>;

template <class T>
LayerKind kind_of(const Layer<T>& l) {
    return std::visit([](const auto& x) { return x.kind(); }, l);
}

template <class T>
std::size_t input_dim(const Layer<T>& l) {
    return std::visit([](const auto& x) { return x.input_dim(); }, l);
}

template <class T>
std::size_t output_dim(const Layer<T>& l) {
    return std::visit([](const auto& x) { return x.output_dim(); }, l);
}

/// Active-unit budget K, or 0 for dense teachers.
template <class T>
std::size_t active_k(const Layer<T>& l) {
    return std::visit(
        [](const auto& x) -> std::size_t {
            if constexpr (requires { x.k; }) return x.k;
            else return 0;
        },
        l);
}

/// Stored parameter count of a concrete layer object.
template <class L>
std::size_t stored_param_count(const L& layer) {
    std::size_t n = 0;
    layer.visit_params([&](std::string_view, std::size_t r, std::size_t c, auto) { n += r * c; });
    return n;
}

template <class L>
void zero_params(L& layer) {
    layer.visit_params([](std::string_view, std::size_t, std::size_t, auto data) {
        std::fill(data.begin(), data.end(), 0);
    });
}

/// Same-shaped layer with every parameter zeroed; used as a gradient buffer.
template <class L>
L zeros_like(const L& layer) {
    L out = layer;
    zero_params(out);
    return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Intermediate values of an MoE-style forward (MxD, μMoE, MoV) kept for the
/// backward pass.
template <class T>
struct MoeTrace {
    Vector<T> gate_pre;   // Gᵀx + b_gate
    SparseCoeffs<T> a;    // TopK coefficients
    Vector<T> hid_pre;    // Eᵀx + b_enc
    Vector<T> glu_pre;    // E_gluᵀx (GLU variant only)
    Vector<T> z;          // hidden units
    Vector<T> left;       // kind-specific intermediates
    Vector<T> right;
};

template <class T>
struct SparseTrace {
    Vector<T> pre;       // Eᵀu + b_enc
    SparseCoeffs<T> z;   // TopK hidden units
};

namespace detail {

template <class T, class L>
void gate_and_encode(const L& l, std::span<const T> x, std::size_t k, MoeTrace<T>& t) {
    require_same("input length", x.size(), l.input_dim());
    t.gate_pre.resize(l.G.cols());
    gemv_t<T>(l.G, x, t.gate_pre);
    add_in_place<T>(t.gate_pre, l.b_gate);
    t.a = topk<T>(std::span<const T>(t.gate_pre), k, l.gate_relu);

    t.hid_pre.resize(l.E.cols());
    gemv_t<T>(l.E, x, t.hid_pre);
    add_in_place<T>(t.hid_pre, l.b_enc);
    t.z.resize(l.E.cols());
    if constexpr (requires { l.E_glu; }) {
        if (l.E_glu) {
            t.glu_pre.resize(l.E.cols());
            gemv_t<T>(*l.E_glu, x, t.glu_pre);
            for (std::size_t h = 0; h < t.z.size(); ++h) t.z[h] = activate(l.glu_act, t.glu_pre[h]) * t.hid_pre[h];
            return;
        }
    }
    for (std::size_t h = 0; h < t.z.size(); ++h) t.z[h] = activate(l.enc_act, t.hid_pre[h]);
}

} // namespace detail

template <class T>
Vector<T> teacher_forward(const TeacherMlp<T>& t, std::span<const T> x) {
    require_same("teacher input length", x.size(), t.input_dim());
    Vector<T> pre = gemv_t<T>(t.E, x);
    for (std::size_t h = 0; h < pre.size(); ++h) pre[h] = activate(t.act, pre[h] + t.b_enc[h]);
    Vector<T> y = gemv_t<T>(t.D, std::span<const T>(pre));
    detail::add_in_place<T>(y, t.b_dec);
    return y;
}

template <class T>
Vector<T> glu_hidden(const TeacherGlu<T>& t, std::span<const T> x) {
    require_same("teacher input length", x.size(), t.input_dim());
    Vector<T> gate = gemv_t<T>(t.E_glu, x);
    Vector<T> lin = gemv_t<T>(t.E, x);
    for (std::size_t h = 0; h < lin.size(); ++h) lin[h] = activate(t.gate_act, gate[h]) * (lin[h] + t.b_enc[h]);
    return lin;
}

template <class T>
Vector<T> teacher_forward(const TeacherGlu<T>& t, std::span<const T> x) {
    const Vector<T> z = glu_hidden(t, x);
    Vector<T> y = gemv_t<T>(t.D, std::span<const T>(z));
    detail::add_in_place<T>(y, t.b_dec);
    return y;
}

/// Sparse MLP forward. `y_true` is the encoder input for SAEs and ignored
/// otherwise. `k` of 0 means the layer's own k.
template <class T>
Vector<T> sparse_mlp_forward(const SparseMlp<T>& l, std::span<const T> x, std::span<const T> y_true = {},
                             std::size_t k = 0, SparseTrace<T>* trace = nullptr) {
    std::span<const T> u = x;
    if (l.input_source() == InputSource::post_mlp) {
        if (y_true.empty()) throw DomainError("SAE forward needs the MLP output as input");
        u = y_true;
    } else {
        require_same("sparse MLP input length", x.size(), l.E.rows());
    }
    require_same("sparse MLP encoder input", u.size(), l.E.rows());
    SparseTrace<T> local;
    SparseTrace<T>& t = trace ? *trace : local;
    t.pre.resize(l.E.cols());
    gemv_t<T>(l.E, u, t.pre);
    detail::add_in_place<T>(t.pre, l.b_enc);
    t.z = topk<T>(std::span<const T>(t.pre), k ? k : l.k, l.pre_relu);

    Vector<T> y = l.b_dec;
    for (std::size_t j = 0; j < t.z.k(); ++j) axpy<T>(t.z.values[j], l.D.row(t.z.indices[j]), y);
    if (l.skip) {
        Vector<T> s = gemv_t<T>(*l.skip, x);
        detail::add_in_place<T>(y, s);
    }
    return y;
}

/// Factorized MxD forward: (Cᵀa) ⊙ (Dᵀz) + b_dec.
template <class T>
Vector<T> mxd_forward(const Mxd<T>& l, std::span<const T> x, std::size_t k = 0, MoeTrace<T>* trace = nullptr) {
    MoeTrace<T> local;
    MoeTrace<T>& t = trace ? *trace : local;
    detail::gate_and_encode(l, x, k ? k : l.k, t);
    const std::size_t O = l.output_dim();
    t.left.assign(O, T(0));  // Cᵀa
    for (std::size_t j = 0; j < t.a.k(); ++j) axpy<T>(t.a.values[j], l.C.row(t.a.indices[j]), t.left);
    t.right.resize(O);  // Dᵀz
    gemv_t<T>(l.D, std::span<const T>(t.z), t.right);
    Vector<T> y(O);
    for (std::size_t o = 0; o < O; ++o) y[o] = t.left[o] * t.right[o] + l.b_dec[o];
    return y;
}

/// Default cap on N·H·O for the materialized-tensor forward.
inline constexpr std::size_t kNaiveElementBudget = 10'000'000;

/// Materializes W(n, h, o) = C(n, o)·D(h, o) entrywise and evaluates
/// Σ_n a_n W_nᵀ z + b_dec. Test oracle for the factorized path.
template <class T>
Vector<T> mxd_forward_naive(const Mxd<T>& l, std::span<const T> x, std::size_t element_budget = kNaiveElementBudget) {
    const std::size_t N = l.experts(), H = l.hidden_dim(), O = l.output_dim();
    if (N * H * O > element_budget)
        throw DomainError("mxd_forward_naive: N*H*O = " + std::to_string(N * H * O) + " exceeds budget " +
                          std::to_string(element_budget));
    MoeTrace<T> t;
    detail::gate_and_encode(l, x, l.k, t);
    std::vector<T> W(N * H * O);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t o = 0; o < O; ++o) W[(n * H + h) * O + o] = l.C(n, o) * l.D(h, o);

    const Vector<T> a = t.a.densify();
    Vector<T> y(O, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        if (a[n] == T(0)) continue;
        for (std::size_t o = 0; o < O; ++o) {
            T acc = T(0);
            for (std::size_t h = 0; h < H; ++h) acc += W[(n * H + h) * O + o] * t.z[h];
            y[o] += a[n] * acc;
        }
    }
    for (std::size_t o = 0; o < O; ++o) y[o] += l.b_dec[o];
    return y;
}

/// Expert n's implicit decoder, D·diag(c_n) (H×O).
template <class T>
Matrix<T> materialize_expert(const Mxd<T>& l, std::size_t n) {
    if (n >= l.experts()) throw DomainError("materialize_expert: index " + std::to_string(n) + " out of range");
    Matrix<T> w(l.hidden_dim(), l.output_dim());
    for (std::size_t h = 0; h < w.rows(); ++h)
        for (std::size_t o = 0; o < w.cols(); ++o) w(h, o) = l.D(h, o) * l.C(n, o);
    return w;
}

/// Hidden units z for an MoE-style layer (used by steering).
template <class T, class L>
Vector<T> moe_hidden(const L& l, std::span<const T> x) {
    MoeTrace<T> t;
    detail::gate_and_encode(l, x, l.k, t);
    return t.z;
}

template <class T>
Vector<T> mumoe_forward(const MuMoe<T>& l, std::span<const T> x, std::size_t k = 0, MoeTrace<T>* trace = nullptr) {
    MoeTrace<T> local;
    MoeTrace<T>& t = trace ? *trace : local;
    detail::gate_and_encode(l, x, k ? k : l.k, t);
    const std::size_t R = l.rank();
    t.left.assign(R, T(0));  // C a
    for (std::size_t j = 0; j < t.a.k(); ++j) {
        const std::size_t n = t.a.indices[j];
        for (std::size_t r = 0; r < R; ++r) t.left[r] += l.C(r, n) * t.a.values[j];
    }
    t.right.resize(R);  // D z
    gemv<T>(l.D, std::span<const T>(t.z), t.right);
    Vector<T> h(R);
    for (std::size_t r = 0; r < R; ++r) h[r] = t.left[r] * t.right[r];
    Vector<T> y = gemv<T>(l.W, std::span<const T>(h));
    detail::add_in_place<T>(y, l.b_dec);
    return y;
}

template <class T>
Vector<T> mov_forward(const Mov<T>& l, std::span<const T> x, std::size_t k = 0, MoeTrace<T>* trace = nullptr) {
    MoeTrace<T> local;
    MoeTrace<T>& t = trace ? *trace : local;
    detail::gate_and_encode(l, x, k ? k : l.k, t);
    const std::size_t H = l.hidden_dim();
    t.left.assign(H, T(0));  // Cᵀa
    for (std::size_t j = 0; j < t.a.k(); ++j) axpy<T>(t.a.values[j], l.C.row(t.a.indices[j]), t.left);
    t.right.resize(H);  // (Cᵀa) ⊙ z
    for (std::size_t h = 0; h < H; ++h) t.right[h] = t.left[h] * t.z[h];
    Vector<T> y = gemv_t<T>(l.D, std::span<const T>(t.right));
    detail::add_in_place<T>(y, l.b_dec);
    return y;
}

/// Unified forward over any layer. `y_true` feeds SAEs; `k` of 0 keeps the
/// layer's own K.
template <class T>
Vector<T> forward(const Layer<T>& layer, std::type_identity_t<std::span<const T>> x,
                  std::type_identity_t<std::span<const T>> y_true = {}, std::size_t k = 0) {
    return std::visit(
        [&](const auto& l) -> Vector<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, TeacherMlp<T>> || std::is_same_v<L, TeacherGlu<T>>) return teacher_forward(l, x);
            else if constexpr (std::is_same_v<L, SparseMlp<T>>) return sparse_mlp_forward(l, x, y_true, k);
            else if constexpr (std::is_same_v<L, Mxd<T>>) return mxd_forward(l, x, k);
            else if constexpr (std::is_same_v<L, MuMoe<T>>) return mumoe_forward(l, x, k);
            else return mov_forward(l, x, k);
        },
        layer);
}

/// Row-wise forward over a token matrix. `Y` is required for SAEs.
template <class T>
Matrix<T> forward_batch(const Layer<T>& layer, const Matrix<T>& X, const Matrix<T>* Y = nullptr) {
    Matrix<T> out(X.rows(), output_dim(layer));
    for (std::size_t r = 0; r < X.rows(); ++r) {
        const auto y = forward(layer, X.row(r), Y ? Y->row(r) : std::span<const T>{});
        std::copy(y.begin(), y.end(), out.row(r).begin());
    }
    return out;
}

// ---------------------------------------------------------------------------
// GLU as a rank-1 MoE
// ---------------------------------------------------------------------------

/// Expert n of the GLU-as-MoE view: E·diag(I_n), i.e. E with every column
/// but n zeroed.
template <class T>
Matrix<T> glu_expert_matrix(const Matrix<T>& E, std::size_t n) {
    if (n >= E.cols()) throw DomainError("glu_expert_matrix: index out of range");
    Matrix<T> m(E.rows(), E.cols());
    for (std::size_t i = 0; i < E.rows(); ++i) m(i, n) = E(i, n);
    return m;
}

/// Returns (ψ(E_gluᵀx) ⊙ (Eᵀx), Σ_n a_n (E·diag(I_n))ᵀx) with a = ψ(E_gluᵀx).
/// The two agree for every input; the second form materializes each expert.
template <class T>
std::pair<Vector<T>, Vector<T>> glu_as_rank1_moe(const Matrix<T>& E_glu, const Matrix<T>& E, std::span<const T> x,
                                                 Activation psi) {
    detail::require_dims("glu_as_rank1_moe E_glu", E_glu, E.rows(), E.cols());
    require_same("glu_as_rank1_moe input", x.size(), E.rows());
    const Vector<T> a = activation<T>(psi, gemv_t<T>(E_glu, x));
    const Vector<T> glu = hadamard<T>(a, gemv_t<T>(E, x));

    Vector<T> moe(E.cols(), T(0));
    for (std::size_t n = 0; n < E.cols(); ++n) {
        const Matrix<T> expert = glu_expert_matrix(E, n);
        const Vector<T> contrib = gemv_t<T>(expert, x);
        axpy<T>(a[n], contrib, moe);
    }
    return {glu, moe};
}

} // namespace mxd
