#pragma once

// Byte-level two-block transformer used as a host for MLP splicing.
//
// Pre-LN blocks: x += Attn(LN1(x)); x += MLP(LN2(x)). The unembedding is tied
// to the token embedding. The final LayerNorm gain starts at zero so an
// untrained model emits uniform next-byte distributions.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxd/checkpoint.hpp"
#include "mxd/distill.hpp"
#include "mxd/error.hpp"
#include "mxd/layers.hpp"
#include "mxd/linalg.hpp"
#include "mxd/rng.hpp"
#include "mxd/tensor.hpp"
#include "mxd/train.hpp"

namespace mxd {

struct ToyLmConfig {
    std::size_t vocab = 256;
    std::size_t d = 64;
    std::size_t blocks = 2;
    std::size_t heads = 2;
    std::size_t ctx = 64;
    std::size_t mlp_hidden = 256;

    void validate() const {
        if (vocab == 0 || vocab > 256) throw DomainError("toy LM vocab must be in [1, 256]");
        if (d == 0 || blocks == 0 || heads == 0 || ctx == 0 || mlp_hidden == 0)
            throw DomainError("toy LM dims must be >= 1");
        if (d % heads != 0) throw DomainError("toy LM width " + std::to_string(d) + " not divisible by heads");
    }

    bool operator==(const ToyLmConfig&) const = default;
};

template <class T>
struct ToyBlock {
    Vector<T> ln1_g, ln1_b;
    Matrix<T> Wq, Wk, Wv, Wo;  // d×d, applied as Wᵀh
    Vector<T> ln2_g, ln2_b;
    TeacherMlp<T> mlp;
};

enum class HookMode { replace, add_steer };

/// Replaces (or adds a steering term to) the MLP output of one block.
/// In add_steer mode the host MLP output is kept and λ times the
/// contribution of `unit` of `layer` is added.
template <class T>
struct SpliceHook {
    std::size_t block = 0;
    Layer<T> layer;
    HookMode mode = HookMode::replace;
    std::size_t unit = 0;
    double lambda = 0;
};

template <class T>
struct ToyLm {
    ToyLmConfig cfg;
    Matrix<T> tok_emb;  // vocab×d
    Matrix<T> pos_emb;  // ctx×d
    std::vector<ToyBlock<T>> blocks;
    Vector<T> lnf_g, lnf_b;
    std::optional<SpliceHook<T>> hook;

    template <class F>
    void visit_params(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit_params(F&& f) const {
        visit_impl(*this, f);
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        auto mat = [&](const std::string& name, auto& m) { f(name, m.rows(), m.cols(), m.flat()); };
        auto vec = [&](const std::string& name, auto& v) { f(name, std::size_t{1}, v.size(), std::span(v)); };
        mat("tok_emb", s.tok_emb);
        mat("pos_emb", s.pos_emb);
        for (std::size_t b = 0; b < s.blocks.size(); ++b) {
            auto& blk = s.blocks[b];
            const std::string p = "blocks." + std::to_string(b) + ".";
            vec(p + "ln1_g", blk.ln1_g);
            vec(p + "ln1_b", blk.ln1_b);
            mat(p + "Wq", blk.Wq);
            mat(p + "Wk", blk.Wk);
            mat(p + "Wv", blk.Wv);
            mat(p + "Wo", blk.Wo);
            vec(p + "ln2_g", blk.ln2_g);
            vec(p + "ln2_b", blk.ln2_b);
            mat(p + "mlp.E", blk.mlp.E);
            mat(p + "mlp.D", blk.mlp.D);
            vec(p + "mlp.b_enc", blk.mlp.b_enc);
            vec(p + "mlp.b_dec", blk.mlp.b_dec);
        }
        vec("lnf_g", s.lnf_g);
        vec("lnf_b", s.lnf_b);
    }
};

template <class T>
ToyLm<T> make_toy_lm(const ToyLmConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d, H = cfg.mlp_hidden;
    auto gauss = [&](std::size_t r, std::size_t c, double sd) {
        Matrix<T> m(r, c);
        for (T& v : m.flat()) v = static_cast<T>(sd * rng.normal());
        return m;
    };
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.blocks));
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
    ToyLm<T> lm;
    lm.cfg = cfg;
    lm.tok_emb = gauss(cfg.vocab, d, sd_d);
    lm.pos_emb = gauss(cfg.ctx, d, 0.1 * sd_d);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        ToyBlock<T> blk;
        blk.ln1_g.assign(d, T(1));
        blk.ln1_b.assign(d, T(0));
        blk.Wq = gauss(d, d, sd_d);
        blk.Wk = gauss(d, d, sd_d);
        blk.Wv = gauss(d, d, sd_d);
        blk.Wo = gauss(d, d, sd_d * resid);
        blk.ln2_g.assign(d, T(1));
        blk.ln2_b.assign(d, T(0));
        blk.mlp.E = gauss(d, H, sd_d);
        blk.mlp.D = gauss(H, d, resid / std::sqrt(static_cast<double>(H)));
        blk.mlp.b_enc.assign(H, T(0));
        blk.mlp.b_dec.assign(d, T(0));
        blk.mlp.act = Activation::gelu;
        lm.blocks.push_back(std::move(blk));
    }
    lm.lnf_g.assign(d, T(0));
    lm.lnf_b.assign(d, T(0));
    return lm;
}

template <class T>
ToyLm<T> zeros_like(const ToyLm<T>& lm) {
    ToyLm<T> out = lm;
    out.hook.reset();
    zero_params(out);
    return out;
}

// ---------------------------------------------------------------------------
// Hooks
// ---------------------------------------------------------------------------

template <class T>
void install_hook(ToyLm<T>& lm, SpliceHook<T> hook) {
    if (lm.hook) throw DomainError("install_hook: a hook is already installed");
    if (hook.block >= lm.blocks.size())
        throw DomainError("install_hook: block " + std::to_string(hook.block) + " out of range");
    require_same("hook input width", input_dim(hook.layer), lm.cfg.d);
    require_same("hook output width", output_dim(hook.layer), lm.cfg.d);
    if (hook.mode == HookMode::add_steer) {
        const auto k = kind_of(hook.layer);
        if (k == LayerKind::teacher_mlp || k == LayerKind::teacher_glu)
            throw UnsupportedError("steering needs a sparse layer");
        const std::size_t units = std::visit(
            [](const auto& l) -> std::size_t {
                if constexpr (requires { l.experts(); }) return l.experts();
                else return l.hidden_dim();
            },
            hook.layer);
        if (hook.unit >= units)
            throw DomainError("install_hook: unit " + std::to_string(hook.unit) + " out of range (" +
                              std::to_string(units) + " units)");
    }
    lm.hook = std::move(hook);
}

template <class T>
void remove_hook(ToyLm<T>& lm) {
    lm.hook.reset();
}

/// Output contribution of one unit for input h: d_n for sparse MLPs,
/// c_n ⊙ (Dᵀz) for MxD, W((C e_n) ⊙ (D z)) for μMoE, Dᵀ(c_n ⊙ z) for MoV.
template <class T>
Vector<T> unit_contribution(const Layer<T>& layer, std::size_t unit, std::type_identity_t<std::span<const T>> h) {
    return std::visit(
        [&](const auto& l) -> Vector<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, SparseMlp<T>>) {
                const auto row = l.D.row(unit);
                return Vector<T>(row.begin(), row.end());
            } else if constexpr (std::is_same_v<L, Mxd<T>>) {
                const Vector<T> z = moe_hidden<T>(l, h);
                Vector<T> out = gemv_t<T>(l.D, std::span<const T>(z));
                for (std::size_t o = 0; o < out.size(); ++o) out[o] *= l.C(unit, o);
                return out;
            } else if constexpr (std::is_same_v<L, MuMoe<T>>) {
                const Vector<T> z = moe_hidden<T>(l, h);
                Vector<T> r = gemv<T>(l.D, std::span<const T>(z));
                for (std::size_t i = 0; i < r.size(); ++i) r[i] *= l.C(i, unit);
                return gemv<T>(l.W, std::span<const T>(r));
            } else if constexpr (std::is_same_v<L, Mov<T>>) {
                Vector<T> z = moe_hidden<T>(l, h);
                for (std::size_t i = 0; i < z.size(); ++i) z[i] *= l.C(unit, i);
                return gemv_t<T>(l.D, std::span<const T>(z));
            } else {
                throw UnsupportedError("unit_contribution: dense layers have no units");
            }
        },
        layer);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
struct LnCache {
    Vector<T> xhat;
    T rstd = T(0);
};

template <class T>
void layer_norm(std::span<const T> x, std::span<const T> g, std::span<const T> b, Vector<T>& out, LnCache<T>* c) {
    const std::size_t n = x.size();
    T mean = T(0);
    for (T v : x) mean += v;
    mean /= static_cast<T>(n);
    T var = T(0);
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<T>(n);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    out.resize(n);
    if (c) {
        c->xhat.resize(n);
        c->rstd = rstd;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const T xh = (x[i] - mean) * rstd;
        if (c) c->xhat[i] = xh;
        out[i] = g[i] * xh + b[i];
    }
}

/// dx for y = g ⊙ xhat + b; accumulates dg, db.
template <class T>
void layer_norm_backward(const LnCache<T>& c, std::span<const T> g, std::span<const T> dy, std::span<T> dg,
                         std::span<T> db, std::span<T> dx_accum) {
    const std::size_t n = dy.size();
    Vector<T> dxh(n);
    T m1 = T(0), m2 = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        dg[i] += dy[i] * c.xhat[i];
        db[i] += dy[i];
        dxh[i] = dy[i] * g[i];
        m1 += dxh[i];
        m2 += dxh[i] * c.xhat[i];
    }
    m1 /= static_cast<T>(n);
    m2 /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) dx_accum[i] += c.rstd * (dxh[i] - m1 - c.xhat[i] * m2);
}

/// Per-block state for one position, kept for the backward pass.
template <class T>
struct BlockCache {
    LnCache<T> ln1, ln2;
    Vector<T> h1, q, attn_p, attn_o, h2, mlp_pre, mlp_act;
};

template <class T>
struct PositionCache {
    std::vector<BlockCache<T>> blocks;
    LnCache<T> lnf;
    Vector<T> hf;
};

} // namespace detail

/// Keys and values seen so far, per block; supports incremental decoding.
template <class T>
struct KvState {
    std::vector<Matrix<T>> keys, values;
    std::size_t length = 0;

    explicit KvState(const ToyLmConfig& cfg) {
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            keys.emplace_back(cfg.ctx, cfg.d);
            values.emplace_back(cfg.ctx, cfg.d);
        }
    }
};

/// MLP output of block `b` for input h, honouring an installed hook.
template <class T>
Vector<T> block_mlp(const ToyLm<T>& lm, std::size_t b, std::span<const T> h) {
    Vector<T> y = teacher_forward(lm.blocks[b].mlp, h);
    if (!lm.hook || lm.hook->block != b) return y;
    const auto& hk = *lm.hook;
    if (hk.mode == HookMode::replace) return forward(hk.layer, h, std::span<const T>(y));
    const Vector<T> v = unit_contribution(hk.layer, hk.unit, h);
    const T lam = static_cast<T>(hk.lambda);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += lam * v[o];
    return y;
}

/// Consumes one token at the next position and returns the next-token logits.
template <class T>
Vector<T> lm_step(const ToyLm<T>& lm, KvState<T>& kv, std::uint8_t token, detail::PositionCache<T>* cache = nullptr) {
    const auto& cfg = lm.cfg;
    const std::size_t t = kv.length;
    if (t >= cfg.ctx) throw DomainError("lm_step: context length " + std::to_string(cfg.ctx) + " exceeded");
    if (token >= cfg.vocab) throw DomainError("lm_step: token " + std::to_string(token) + " outside vocab");
    const std::size_t d = cfg.d, dh = d / cfg.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    if (cache) cache->blocks.resize(cfg.blocks);

    Vector<T> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = lm.tok_emb(token, i) + lm.pos_emb(t, i);
    detail::BlockCache<T> scratch;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const auto& blk = lm.blocks[b];
        auto& c = cache ? cache->blocks[b] : scratch;
        detail::layer_norm<T>(x, blk.ln1_g, blk.ln1_b, c.h1, cache ? &c.ln1 : nullptr);
        c.q.resize(d);
        gemv_t<T>(blk.Wq, std::span<const T>(c.h1), c.q);
        gemv_t<T>(blk.Wk, std::span<const T>(c.h1), kv.keys[b].row(t));
        gemv_t<T>(blk.Wv, std::span<const T>(c.h1), kv.values[b].row(t));
        c.attn_p.assign(cfg.heads * (t + 1), T(0));
        c.attn_o.assign(d, T(0));
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
            const std::size_t off = hd * dh;
            T* p = c.attn_p.data() + hd * (t + 1);
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                const auto k = kv.keys[b].row(s);
                T acc = T(0);
                for (std::size_t i = 0; i < dh; ++i) acc += c.q[off + i] * k[off + i];
                p[s] = acc * scale;
                mx = std::max(mx, p[s]);
            }
            T z = T(0);
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] = std::exp(p[s] - mx);
                z += p[s];
            }
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] /= z;
                const auto v = kv.values[b].row(s);
                for (std::size_t i = 0; i < dh; ++i) c.attn_o[off + i] += p[s] * v[off + i];
            }
        }
        const Vector<T> proj = gemv_t<T>(blk.Wo, std::span<const T>(c.attn_o));
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        detail::layer_norm<T>(x, blk.ln2_g, blk.ln2_b, c.h2, cache ? &c.ln2 : nullptr);
        if (cache) {
            if (lm.hook) throw DomainError("lm_step: cannot record a backward cache with a hook installed");
            c.mlp_pre = gemv_t<T>(blk.mlp.E, std::span<const T>(c.h2));
            c.mlp_act.resize(c.mlp_pre.size());
            for (std::size_t h = 0; h < c.mlp_pre.size(); ++h) {
                c.mlp_pre[h] += blk.mlp.b_enc[h];
                c.mlp_act[h] = activate(blk.mlp.act, c.mlp_pre[h]);
            }
            const Vector<T> m = gemv_t<T>(blk.mlp.D, std::span<const T>(c.mlp_act));
            for (std::size_t i = 0; i < d; ++i) x[i] += m[i] + blk.mlp.b_dec[i];
        } else {
            const Vector<T> m = block_mlp(lm, b, std::span<const T>(c.h2));
            for (std::size_t i = 0; i < d; ++i) x[i] += m[i];
        }
    }
    Vector<T> hf_local;
    Vector<T>& hf = cache ? cache->hf : hf_local;
    detail::layer_norm<T>(x, lm.lnf_g, lm.lnf_b, hf, cache ? &cache->lnf : nullptr);
    ++kv.length;
    return gemv<T>(lm.tok_emb, std::span<const T>(hf));
}

/// Logits for every position of `tokens` (rows = positions).
template <class T>
Matrix<T> lm_forward(const ToyLm<T>& lm, std::span<const std::uint8_t> tokens) {
    if (tokens.empty()) throw DomainError("lm_forward: empty sequence");
    KvState<T> kv(lm.cfg);
    Matrix<T> out(tokens.size(), lm.cfg.vocab);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const Vector<T> l = lm_step(lm, kv, tokens[t]);
        std::copy(l.begin(), l.end(), out.row(t).begin());
    }
    return out;
}

namespace detail {

template <class T>
double log_softmax_at(std::span<const T> logits, std::size_t target) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
    return static_cast<double>(logits[target]) - mx - std::log(z);
}

template <class T>
std::vector<double> softmax(std::span<const T> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
    for (double& v : p) v /= z;
    return p;
}

} // namespace detail

/// Mean next-byte cross-entropy (nats) of predicting tokens[1..] from the
/// prefix, over one window.
template <class T>
double lm_window_ce(const ToyLm<T>& lm, std::span<const std::uint8_t> window) {
    if (window.size() < 2) throw DomainError("lm_window_ce: window needs at least two tokens");
    const Matrix<T> logits = lm_forward(lm, window.first(window.size() - 1));
    double acc = 0;
    for (std::size_t t = 0; t + 1 < window.size(); ++t) acc -= detail::log_softmax_at<T>(logits.row(t), window[t + 1]);
    return acc / static_cast<double>(window.size() - 1);
}

/// Mean CE over consecutive non-overlapping windows of length ctx + 1 drawn
/// from `text`, using at most `max_windows` of them.
template <class T>
double lm_corpus_ce(const ToyLm<T>& lm, std::span<const std::uint8_t> text, std::size_t max_windows = 64) {
    const std::size_t w = lm.cfg.ctx + 1;
    if (text.size() < w) throw DomainError("lm_corpus_ce: text shorter than one window");
    const std::size_t n = std::min(max_windows, text.size() / w);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += lm_window_ce(lm, text.subspan(i * w, w));
    return acc / static_cast<double>(n);
}

/// Greedy continuation of `prompt` by `steps` bytes.
template <class T>
std::vector<std::uint8_t> lm_generate(const ToyLm<T>& lm, std::span<const std::uint8_t> prompt, std::size_t steps) {
    if (prompt.empty()) throw DomainError("lm_generate: empty prompt");
    if (prompt.size() + steps > lm.cfg.ctx + 1)
        throw DomainError("lm_generate: prompt + continuation exceeds context");
    KvState<T> kv(lm.cfg);
    Vector<T> logits;
    for (auto tok : prompt) logits = lm_step(lm, kv, tok);
    std::vector<std::uint8_t> out;
    for (std::size_t s = 0; s < steps; ++s) {
        const auto best = static_cast<std::uint8_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        out.push_back(best);
        if (s + 1 < steps) logits = lm_step(lm, kv, best);
    }
    return out;
}

/// Next-token logits after consuming `prompt`.
template <class T>
Vector<T> lm_next_logits(const ToyLm<T>& lm, std::span<const std::uint8_t> prompt) {
    if (prompt.empty()) throw DomainError("lm_next_logits: empty prompt");
    KvState<T> kv(lm.cfg);
    Vector<T> logits;
    for (auto tok : prompt) logits = lm_step(lm, kv, tok);
    return logits;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Accumulates scale·∂CE/∂θ into `g` for one window (inputs window[0..n-2],
/// targets window[1..n-1]); returns the window's mean CE.
template <class T>
double lm_backward(const ToyLm<T>& lm, ToyLm<T>& g, std::span<const std::uint8_t> window, T scale = T(1)) {
    if (lm.hook) throw DomainError("lm_backward: remove the hook before training");
    if (window.size() < 2) throw DomainError("lm_backward: window needs at least two tokens");
    const auto& cfg = lm.cfg;
    const std::size_t n = window.size() - 1, d = cfg.d, dh = d / cfg.heads, B = cfg.blocks;
    const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));

    KvState<T> kv(cfg);
    std::vector<detail::PositionCache<T>> cache(n);
    Matrix<T> dlogits(n, cfg.vocab);
    double ce = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const Vector<T> logits = lm_step(lm, kv, window[t], &cache[t]);
        const auto p = detail::softmax<T>(logits);
        ce -= std::log(std::max(p[window[t + 1]], std::numeric_limits<double>::min()));
        const T s = scale / static_cast<T>(n);
        for (std::size_t v = 0; v < cfg.vocab; ++v)
            dlogits(t, v) = s * static_cast<T>(p[v] - (v == window[t + 1] ? 1.0 : 0.0));
    }

    // Residual-stream gradient per position.
    Matrix<T> dx(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        const auto dl = dlogits.row(t);
        add_outer<T>(g.tok_emb, dl, std::span<const T>(cache[t].hf));
        const Vector<T> dhf = gemv_t<T>(lm.tok_emb, dl);
        detail::layer_norm_backward<T>(cache[t].lnf, lm.lnf_g, dhf, g.lnf_g, g.lnf_b, dx.row(t));
    }

    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    Vector<T> dres(d);
    for (std::size_t bi = B; bi-- > 0;) {
        const auto& blk = lm.blocks[bi];
        auto& gb = g.blocks[bi];
        // MLP sublayer.
        for (std::size_t t = 0; t < n; ++t) {
            const auto& c = cache[t].blocks[bi];
            const auto dy = dx.row(t);
            detail::add_in_place<T>(gb.mlp.b_dec, std::span<const T>(dy));
            add_outer<T>(gb.mlp.D, std::span<const T>(c.mlp_act), std::span<const T>(dy));
            Vector<T> dpre = gemv<T>(blk.mlp.D, std::span<const T>(dy));
            for (std::size_t h = 0; h < dpre.size(); ++h) dpre[h] *= activate_grad(blk.mlp.act, c.mlp_pre[h]);
            detail::add_in_place<T>(gb.mlp.b_enc, std::span<const T>(dpre));
            add_outer<T>(gb.mlp.E, std::span<const T>(c.h2), std::span<const T>(dpre));
            const Vector<T> dh2 = gemv<T>(blk.mlp.E, std::span<const T>(dpre));
            detail::layer_norm_backward<T>(c.ln2, blk.ln2_g, dh2, gb.ln2_g, gb.ln2_b, dx.row(t));
        }
        // Attention sublayer.
        dq.fill(T(0));
        dk.fill(T(0));
        dv.fill(T(0));
        for (std::size_t t = 0; t < n; ++t) {
            const auto& c = cache[t].blocks[bi];
            const auto dy = dx.row(t);
            add_outer<T>(gb.Wo, std::span<const T>(c.attn_o), std::span<const T>(dy));
            const Vector<T> dout = gemv<T>(blk.Wo, std::span<const T>(dy));
            for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
                const std::size_t off = hd * dh;
                const T* p = c.attn_p.data() + hd * (t + 1);
                Vector<T> dp(t + 1);
                T dot_pdp = T(0);
                for (std::size_t s = 0; s <= t; ++s) {
                    const auto v = kv.values[bi].row(s);
                    T acc = T(0);
                    for (std::size_t i = 0; i < dh; ++i) {
                        acc += dout[off + i] * v[off + i];
                        dv(s, off + i) += p[s] * dout[off + i];
                    }
                    dp[s] = acc;
                    dot_pdp += p[s] * acc;
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const T ds = p[s] * (dp[s] - dot_pdp) * attn_scale;
                    if (ds == T(0)) continue;
                    const auto k = kv.keys[bi].row(s);
                    for (std::size_t i = 0; i < dh; ++i) {
                        dq(t, off + i) += ds * k[off + i];
                        dk(s, off + i) += ds * c.q[off + i];
                    }
                }
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            const auto& c = cache[t].blocks[bi];
            add_outer<T>(gb.Wq, std::span<const T>(c.h1), std::span<const T>(dq.row(t)));
            add_outer<T>(gb.Wk, std::span<const T>(c.h1), std::span<const T>(dk.row(t)));
            add_outer<T>(gb.Wv, std::span<const T>(c.h1), std::span<const T>(dv.row(t)));
            Vector<T> dh1 = gemv<T>(blk.Wq, std::span<const T>(dq.row(t)));
            const Vector<T> a = gemv<T>(blk.Wk, std::span<const T>(dk.row(t)));
            const Vector<T> b = gemv<T>(blk.Wv, std::span<const T>(dv.row(t)));
            for (std::size_t i = 0; i < d; ++i) dh1[i] += a[i] + b[i];
            detail::layer_norm_backward<T>(c.ln1, blk.ln1_g, dh1, gb.ln1_g, gb.ln1_b, dx.row(t));
        }
    }
    for (std::size_t t = 0; t < n; ++t) {
        axpy<T>(T(1), std::span<const T>(dx.row(t)), g.tok_emb.row(window[t]));
        axpy<T>(T(1), std::span<const T>(dx.row(t)), g.pos_emb.row(t));
    }
    return ce / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMinCorpusBytes = 100000;

struct LmTrainConfig {
    ToyLmConfig model;
    std::size_t steps = 2000;
    std::size_t batch = 8;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    double holdout = 0.1;         // trailing fraction of the corpus held out
    std::size_t eval_every = 250; // 0 disables
    std::size_t eval_windows = 32;
    std::size_t min_corpus = kMinCorpusBytes;
};

struct LmMetrics {
    std::size_t step = 0;
    double train_ce = 0;
    double heldout_ce = 0;
    double wall_ms = 0;
};

template <class T>
struct LmTrainResult {
    ToyLm<T> lm;
    std::vector<LmMetrics> history;
};

/// Splits a corpus into (train, held-out) at the holdout fraction.
inline std::pair<std::span<const std::uint8_t>, std::span<const std::uint8_t>>
split_corpus(std::span<const std::uint8_t> corpus, double holdout) {
    if (!(holdout > 0 && holdout < 1)) throw DomainError("holdout fraction must be in (0, 1)");
    const auto cut = static_cast<std::size_t>(static_cast<double>(corpus.size()) * (1.0 - holdout));
    return {corpus.first(cut), corpus.subspan(cut)};
}

template <class T>
LmTrainResult<T> train_toy_lm(std::span<const std::uint8_t> corpus, const LmTrainConfig& cfg,
                              const std::function<void(const LmMetrics&)>& sink = {}) {
    cfg.model.validate();
    if (corpus.size() < cfg.min_corpus)
        throw DomainError("corpus too small: " + std::to_string(corpus.size()) + " bytes, need at least " +
                          std::to_string(cfg.min_corpus));
    for (auto b : corpus)
        if (b >= cfg.model.vocab) throw DomainError("corpus byte " + std::to_string(b) + " outside vocab");
    if (cfg.batch == 0) throw DomainError("batch must be >= 1");
    const auto [train, held] = split_corpus(corpus, cfg.holdout);
    const std::size_t w = cfg.model.ctx + 1;
    if (train.size() < w || held.size() < w) throw DomainError("corpus split too small for one context window");

    Rng root(cfg.seed);
    Rng init = root.fork(1);
    Rng sampler = root.fork(2);
    LmTrainResult<T> res{make_toy_lm<T>(cfg.model, init), {}};
    ToyLm<T> grads = zeros_like(res.lm);
    Adam<T> opt({cfg.lr});
    const auto t0 = std::chrono::steady_clock::now();
    double running = 0;
    std::size_t since = 0;
    auto record = [&](std::size_t step) {
        LmMetrics m;
        m.step = step;
        m.train_ce = since ? running / static_cast<double>(since) : lm_corpus_ce(res.lm, train, cfg.eval_windows);
        m.heldout_ce = lm_corpus_ce(res.lm, held, cfg.eval_windows);
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(m);
        if (sink) sink(m);
        running = 0;
        since = 0;
    };
    if (cfg.eval_every) record(0);
    const T scale = T(1) / static_cast<T>(cfg.batch);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        zero_params(grads);
        double ce = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::size_t start = sampler.index(train.size() - w + 1);
            ce += lm_backward(res.lm, grads, train.subspan(start, w), scale);
        }
        ce /= static_cast<double>(cfg.batch);
        if (!std::isfinite(ce)) throw std::runtime_error("train_toy_lm: non-finite loss at step " + std::to_string(step));
        running += ce;
        ++since;
        opt.update(res.lm, grads);
        if (cfg.eval_every && (step % cfg.eval_every == 0 || step == cfg.steps)) record(step);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Activation capture
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void capture_chunk(const ToyLm<T>& lm, std::size_t block, std::span<const std::uint8_t> chunk,
                   ActivationDataset<T>& out, std::size_t& row) {
    KvState<T> kv(lm.cfg);
    PositionCache<T> c;
    for (auto tok : chunk) {
        lm_step(lm, kv, tok, &c);
        const auto& h2 = c.blocks[block].h2;
        const Vector<T> y = teacher_forward(lm.blocks[block].mlp, std::span<const T>(h2));
        std::copy(h2.begin(), h2.end(), out.X.row(row).begin());
        std::copy(y.begin(), y.end(), out.Y.row(row).begin());
        ++row;
    }
}

template <class T>
void check_capture(const ToyLm<T>& lm, std::size_t block) {
    if (block >= lm.blocks.size())
        throw DomainError("collect_activations: layer index " + std::to_string(block) + " out of range");
    if (lm.hook) throw DomainError("collect_activations: remove the hook first");
}

} // namespace detail

/// MLP input/output rows of `block` for every token of `tokens`. The text is
/// processed in independent chunks of at most ctx tokens.
template <class T>
ActivationDataset<T> collect_activations(const ToyLm<T>& lm, std::size_t block, std::span<const std::uint8_t> tokens) {
    detail::check_capture(lm, block);
    ActivationDataset<T> out{Matrix<T>(tokens.size(), lm.cfg.d), Matrix<T>(tokens.size(), lm.cfg.d),
                             "toy_lm:block" + std::to_string(block)};
    std::size_t row = 0;
    for (std::size_t start = 0; start < tokens.size(); start += lm.cfg.ctx)
        detail::capture_chunk(lm, block, tokens.subspan(start, std::min(lm.cfg.ctx, tokens.size() - start)), out, row);
    return out;
}

/// Captures MLP rows from `windows` random windows of length ctx drawn from
/// `text`.
template <class T>
ActivationDataset<T> sample_lm_activations(const ToyLm<T>& lm, std::size_t block, std::span<const std::uint8_t> text,
                                           std::size_t windows, Rng& rng) {
    detail::check_capture(lm, block);
    const std::size_t w = lm.cfg.ctx;
    if (text.size() < w) throw DomainError("sample_lm_activations: text shorter than the context");
    ActivationDataset<T> out{Matrix<T>(windows * w, lm.cfg.d), Matrix<T>(windows * w, lm.cfg.d),
                             "toy_lm:block" + std::to_string(block)};
    std::size_t row = 0;
    for (std::size_t i = 0; i < windows; ++i)
        detail::capture_chunk(lm, block, text.subspan(rng.index(text.size() - w + 1), w), out, row);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

template <class T>
Checkpoint<T> to_checkpoint(const ToyLm<T>& lm) {
    Checkpoint<T> c;
    c.kind = LayerKind::toy_lm;
    lm.visit_params([&](std::string_view name, std::size_t r, std::size_t cols, std::span<const T> d) {
        c.add(std::string(name), {r, cols}, std::vector<T>(d.begin(), d.end()));
    });
    c.add_meta("vocab", static_cast<double>(lm.cfg.vocab));
    c.add_meta("d", static_cast<double>(lm.cfg.d));
    c.add_meta("blocks", static_cast<double>(lm.cfg.blocks));
    c.add_meta("heads", static_cast<double>(lm.cfg.heads));
    c.add_meta("ctx", static_cast<double>(lm.cfg.ctx));
    c.add_meta("mlp_hidden", static_cast<double>(lm.cfg.mlp_hidden));
    return c;
}

template <class T>
ToyLm<T> toy_lm_from_checkpoint(const Checkpoint<T>& c) {
    if (c.kind != LayerKind::toy_lm)
        throw FormatError("layer kind mismatch: file holds " + std::string(to_string(c.kind)) + ", expected toy_lm");
    ToyLmConfig cfg;
    cfg.vocab = detail::meta_count(c.meta("vocab"));
    cfg.d = detail::meta_count(c.meta("d"));
    cfg.blocks = detail::meta_count(c.meta("blocks"));
    cfg.heads = detail::meta_count(c.meta("heads"));
    cfg.ctx = detail::meta_count(c.meta("ctx"));
    cfg.mlp_hidden = detail::meta_count(c.meta("mlp_hidden"));
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("inconsistent toy LM in checkpoint: ") + e.what());
    }
    Rng unused(0);
    ToyLm<T> lm = make_toy_lm<T>(cfg, unused);
    lm.visit_params([&](std::string_view name, std::size_t r, std::size_t cols, std::span<T> d) {
        detail::load_into(c, name, r, cols, d);
    });
    return lm;
}

template <class T>
void save_toy_lm(const ToyLm<T>& lm, const std::filesystem::path& path) {
    write_file_bytes(path, serialize(to_checkpoint(lm)));
}

template <class T>
ToyLm<T> load_toy_lm(const std::filesystem::path& path) {
    return toy_lm_from_checkpoint(deserialize<T>(read_file_bytes(path)));
}

} // namespace mxd
