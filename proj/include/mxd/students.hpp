#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "mxd/accounting.hpp"
#include "mxd/layers.hpp"
#include "mxd/linalg.hpp"
#include "mxd/rng.hpp"

namespace mxd {

struct StudentOptions {
    Activation enc_act = Activation::gelu;
    Activation glu_act = Activation::swish;
    /// Zero-initialize the decoder of MoE kinds (D for MxD/MoV, W for μMoE).
    bool zero_decoder = true;
};

/// Builds a freshly initialized student. Weights are kaiming-uniform, biases
/// zero, except b_dec which takes the column means of `targets` when given.
/// MoE decoders start at zero when `opts.zero_decoder` is set.
template <class T>
Layer<T> make_student(const LayerSpec& spec, Rng& rng, const StudentOptions& opts = {},
                      const Matrix<T>* targets = nullptr) {
    const std::size_t I = spec.input, H = spec.hidden, O = spec.output, N = spec.experts;
    if (I == 0 || H == 0 || O == 0) throw DomainError("make_student: dims must be >= 1");
    auto kaiming = [&](std::size_t r, std::size_t c) { return init_matrix<T>(rng, r, c, InitScheme::kaiming_uniform); };
    auto decoder_init = [&](std::size_t r, std::size_t c) {
        return opts.zero_decoder ? Matrix<T>(r, c) : kaiming(r, c);
    };
    Vector<T> b_dec(O, T(0));
    if (targets) {
        require_same("make_student target width", targets->cols(), O);
        b_dec = column_means(*targets);
    }

    switch (spec.kind) {
        case LayerKind::sae:
        case LayerKind::tc:
        case LayerKind::stc: {
            SparseMlp<T> l;
            l.variant = spec.kind;
            const std::size_t U = spec.kind == LayerKind::sae ? O : I;
            l.E = kaiming(U, H);
            l.D = kaiming(H, O);
            l.b_enc.assign(H, T(0));
            l.b_dec = b_dec;
            if (spec.kind == LayerKind::stc) l.skip = Matrix<T>(I, O);
            l.k = spec.k;
            l.validate();
            return l;
        }
        case LayerKind::mxd:
        case LayerKind::mxd_glu: {
            Mxd<T> l;
            l.G = kaiming(I, N);
            l.E = kaiming(I, H);
            l.C = kaiming(N, O);
            l.D = decoder_init(H, O);
            l.b_gate.assign(N, T(0));
            l.b_enc.assign(H, T(0));
            l.b_dec = b_dec;
            l.k = spec.k;
            l.enc_act = opts.enc_act;
            if (spec.kind == LayerKind::mxd_glu) {
                l.E_glu = kaiming(I, H);
                l.glu_act = opts.glu_act;
            }
            l.validate();
            return l;
        }
        case LayerKind::mumoe: {
            const std::size_t R = spec.rank;
            if (R == 0) throw DomainError("make_student: mumoe rank must be >= 1");
            MuMoe<T> l;
            l.G = kaiming(I, N);
            l.E = kaiming(I, H);
            l.C = kaiming(R, N);
            l.D = kaiming(R, H);
            l.W = decoder_init(O, R);
            l.b_gate.assign(N, T(0));
            l.b_enc.assign(H, T(0));
            l.b_dec = b_dec;
            l.k = spec.k;
            l.enc_act = opts.enc_act;
            l.validate();
            return l;
        }
        case LayerKind::mov: {
            Mov<T> l;
            l.G = kaiming(I, N);
            l.E = kaiming(I, H);
            l.C = kaiming(N, H);
            l.D = decoder_init(H, O);
            l.b_gate.assign(N, T(0));
            l.b_enc.assign(H, T(0));
            l.b_dec = b_dec;
            l.k = spec.k;
            l.enc_act = opts.enc_act;
            l.validate();
            return l;
        }
        case LayerKind::teacher_mlp: {
            TeacherMlp<T> l{kaiming(I, H), kaiming(H, O), Vector<T>(H, T(0)), b_dec, opts.enc_act};
            return l;
        }
        case LayerKind::teacher_glu: {
            TeacherGlu<T> l{kaiming(I, H), kaiming(I, H), kaiming(H, O), Vector<T>(H, T(0)), b_dec, opts.glu_act};
            return l;
        }
        case LayerKind::toy_lm: break;
    }
    throw UnsupportedError("make_student: cannot build " + std::string(to_string(spec.kind)));
}

} // namespace mxd
