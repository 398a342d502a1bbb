#pragma once

// Faithfulness and interpretability measurements on trained layers and on
// toy-LM hosts with spliced replacements.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mxd/distill.hpp"
#include "mxd/error.hpp"
#include "mxd/layers.hpp"
#include "mxd/linalg.hpp"
#include "mxd/parallel.hpp"
#include "mxd/rng.hpp"
#include "mxd/toy_lm.hpp"

namespace mxd {

namespace detail {

/// Installs a hook for the lifetime of the guard.
template <class T>
class HookGuard {
public:
    HookGuard(ToyLm<T>& lm, SpliceHook<T> hook) : lm_(lm) { install_hook(lm_, std::move(hook)); }
    ~HookGuard() { remove_hook(lm_); }
    HookGuard(const HookGuard&) = delete;
    HookGuard& operator=(const HookGuard&) = delete;

private:
    ToyLm<T>& lm_;
};

template <class T>
void require_trained(const ToyLm<T>& lm) {
    if (std::all_of(lm.lnf_g.begin(), lm.lnf_g.end(), [](T v) { return v == T(0); }))
        throw DomainError("host is untrained (output layer still zero)");
}

template <class T>
double corpus_ce_parallel(const ToyLm<T>& lm, std::span<const std::uint8_t> text, std::size_t max_windows) {
    const std::size_t w = lm.cfg.ctx + 1;
    if (text.size() < w) throw DomainError("corpus shorter than one window");
    const std::size_t n = std::min(max_windows, text.size() / w);
    std::vector<double> ce(n);
    parallel_for(n, [&](std::size_t i) { ce[i] = lm_window_ce(lm, text.subspan(i * w, w)); });
    return std::accumulate(ce.begin(), ce.end(), 0.0) / static_cast<double>(n);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Spliced cross-entropy
// ---------------------------------------------------------------------------

struct CeDelta {
    double base = 0;
    double spliced = 0;
    double delta() const { return spliced - base; }
};

/// Next-byte CE on `text` with and without `hook`. The host is left unhooked.
template <class T>
CeDelta eval_ce_delta(ToyLm<T>& host, const SpliceHook<T>& hook, std::span<const std::uint8_t> text,
                      std::size_t max_windows = 64) {
    detail::require_trained(host);
    if (host.hook) throw DomainError("eval_ce_delta: host already has a hook");
    CeDelta r;
    r.base = detail::corpus_ce_parallel(host, text, max_windows);
    detail::HookGuard<T> guard(host, hook);
    r.spliced = detail::corpus_ce_parallel(host, text, max_windows);
    return r;
}

// ---------------------------------------------------------------------------
// Output faithfulness
// ---------------------------------------------------------------------------

/// `count` prompts of `length` bytes starting at random offsets of `text`.
inline std::vector<std::vector<std::uint8_t>> sample_prompts(std::span<const std::uint8_t> text, std::size_t count,
                                                             std::size_t length, Rng& rng) {
    if (length == 0 || text.size() < length) throw DomainError("sample_prompts: text shorter than prompt length");
    std::vector<std::vector<std::uint8_t>> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t start = rng.index(text.size() - length + 1);
        out.emplace_back(text.begin() + static_cast<std::ptrdiff_t>(start),
                         text.begin() + static_cast<std::ptrdiff_t>(start + length));
    }
    return out;
}

/// fractions[n-1] is the share of prompts whose first n greedy tokens under
/// the hook equal the unhooked host's.
template <class T>
std::vector<double> eval_ngram_faithfulness(ToyLm<T>& host, const SpliceHook<T>& hook,
                                            const std::vector<std::vector<std::uint8_t>>& prompts, std::size_t horizon) {
    if (prompts.empty()) throw DomainError("eval_ngram_faithfulness: empty prompts");
    if (horizon == 0) throw DomainError("eval_ngram_faithfulness: horizon must be >= 1");
    if (host.hook) throw DomainError("eval_ngram_faithfulness: host already has a hook");
    const std::size_t P = prompts.size();
    std::vector<std::vector<std::uint8_t>> base(P);
    parallel_for(P, [&](std::size_t i) { base[i] = lm_generate(host, prompts[i], horizon); });
    std::vector<std::size_t> matched(P);
    {
        detail::HookGuard<T> guard(host, hook);
        parallel_for(P, [&](std::size_t i) {
            const auto gen = lm_generate(host, prompts[i], horizon);
            std::size_t m = 0;
            while (m < horizon && gen[m] == base[i][m]) ++m;
            matched[i] = m;
        });
    }
    std::vector<double> fractions(horizon);
    for (std::size_t n = 1; n <= horizon; ++n) {
        const auto hits = std::count_if(matched.begin(), matched.end(), [&](std::size_t m) { return m >= n; });
        fractions[n - 1] = static_cast<double>(hits) / static_cast<double>(P);
    }
    return fractions;
}

inline void write_faithfulness_csv(std::ostream& os, const std::vector<double>& fractions, LayerKind kind,
                                   std::size_t k, bool header = true) {
    if (header) os << "n,fraction,layer_kind,K\n";
    for (std::size_t n = 1; n <= fractions.size(); ++n)
        os << n << ',' << fractions[n - 1] << ',' << to_string(kind) << ',' << k << '\n';
}

// ---------------------------------------------------------------------------
// Expert rank
// ---------------------------------------------------------------------------

struct RankReport {
    double mean = 0;
    std::vector<std::size_t> experts;
    std::vector<double> ratios;  // numerical_rank(W_n) / min(H, O)
};

/// Mean normalized rank over `sample` experts drawn without replacement
/// (all experts, in order, when sample equals N).
template <class T>
RankReport eval_normalized_rank(const Mxd<T>& l, std::size_t sample, Rng& rng) {
    const std::size_t N = l.experts();
    if (sample == 0 || sample > N)
        throw DomainError("eval_normalized_rank: sample " + std::to_string(sample) + " not in [1, " +
                          std::to_string(N) + "]");
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (sample < N) {
        for (std::size_t i = 0; i < sample; ++i) std::swap(idx[i], idx[i + rng.index(N - i)]);
        idx.resize(sample);
    }
    RankReport r;
    r.experts = idx;
    r.ratios.resize(sample);
    const double denom = static_cast<double>(std::min(l.hidden_dim(), l.output_dim()));
    parallel_for(sample, [&](std::size_t i) {
        r.ratios[i] = static_cast<double>(numerical_rank(materialize_expert(l, idx[i]))) / denom;
    });
    r.mean = std::accumulate(r.ratios.begin(), r.ratios.end(), 0.0) / static_cast<double>(sample);
    return r;
}

template <class T>
RankReport eval_normalized_rank(const Layer<T>& layer, std::size_t sample, Rng& rng) {
    if (const auto* m = std::get_if<Mxd<T>>(&layer)) return eval_normalized_rank(*m, sample, rng);
    throw UnsupportedError("rank suite is only defined for mxd layers, got " + std::string(to_string(kind_of(layer))));
}

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

/// Greedy generation with λ times the contribution of `unit` added to the
/// MLP output of `block`.
template <class T>
std::vector<std::uint8_t> steer(ToyLm<T>& host, const Layer<T>& layer, std::size_t block, std::size_t unit,
                                double lambda, std::span<const std::uint8_t> prompt, std::size_t steps) {
    detail::HookGuard<T> guard(host, SpliceHook<T>{block, layer, HookMode::add_steer, unit, lambda});
    return lm_generate(host, prompt, steps);
}

/// KL(p_steered ‖ p_base) of the next-token distributions after `prompt`.
template <class T>
double steering_kl(ToyLm<T>& host, const Layer<T>& layer, std::size_t block, std::size_t unit, double lambda,
                   std::span<const std::uint8_t> prompt) {
    if (host.hook) throw DomainError("steering_kl: host already has a hook");
    const auto base = detail::softmax<T>(lm_next_logits(host, prompt));
    std::vector<double> steered;
    {
        detail::HookGuard<T> guard(host, SpliceHook<T>{block, layer, HookMode::add_steer, unit, lambda});
        steered = detail::softmax<T>(lm_next_logits(host, prompt));
    }
    double kl = 0;
    for (std::size_t v = 0; v < base.size(); ++v)
        if (steered[v] > 0) kl += steered[v] * (std::log(steered[v]) - std::log(std::max(base[v], 1e-300)));
    return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------
// Sparse probing
// ---------------------------------------------------------------------------

struct ProbeTask {
    Matrix<double> activations;      // examples × units
    std::vector<int> labels;         // 0/1 per example
    std::vector<std::size_t> groups; // sample id per row, used when pooling
    std::size_t selection = 100;
};

struct ProbeConfig {
    std::uint64_t seed = 42;
    double train_fraction = 0.8;
    std::size_t iterations = 300;
    double lr = 0.5;
    bool pool = false;  // mean-pool rows sharing a group id before probing
};

struct ProbeResult {
    std::vector<std::size_t> ranking;  // selected units, largest mean difference first
    std::vector<double> f1;            // held-out F1 per selected unit
    double best_f1 = 0;
    std::size_t best_unit = 0;
    double prior_f1 = 0;               // F1 of always predicting the positive class
};

/// Binary F1 of the positive class.
inline double f1_score(std::span<const int> truth, std::span<const int> pred) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (pred[i] && truth[i]) ++tp;
        else if (pred[i]) ++fp;
        else if (truth[i]) ++fn;
    }
    if (tp == 0) return 0.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

namespace detail {

inline ProbeTask pool_by_group(const ProbeTask& t) {
    if (t.groups.size() != t.labels.size()) throw DomainError("probe pooling needs a group id per row");
    std::vector<std::size_t> order;
    std::vector<std::size_t> slot(*std::max_element(t.groups.begin(), t.groups.end()) + 1, SIZE_MAX);
    for (std::size_t r = 0; r < t.groups.size(); ++r)
        if (slot[t.groups[r]] == SIZE_MAX) {
            slot[t.groups[r]] = order.size();
            order.push_back(t.groups[r]);
        }
    ProbeTask out;
    out.selection = t.selection;
    out.activations = Matrix<double>(order.size(), t.activations.cols());
    out.labels.assign(order.size(), 0);
    std::vector<double> count(order.size(), 0);
    for (std::size_t r = 0; r < t.groups.size(); ++r) {
        const std::size_t s = slot[t.groups[r]];
        axpy<double>(1.0, t.activations.row(r), out.activations.row(s));
        count[s] += 1;
        out.labels[s] = t.labels[r];
    }
    for (std::size_t s = 0; s < order.size(); ++s)
        for (double& v : out.activations.row(s)) v /= count[s];
    return out;
}

/// Balanced-weight logistic regression on one standardized feature.
inline std::pair<double, double> fit_logistic_1d(std::span<const double> x, std::span<const int> y,
                                                 std::size_t iterations, double lr) {
    const double n = static_cast<double>(x.size());
    const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
    const double w_pos = n / (2.0 * pos), w_neg = n / (2.0 * (n - pos));
    double w = 0, b = 0;
    for (std::size_t it = 0; it < iterations; ++it) {
        double gw = 0, gb = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-(w * x[i] + b)));
            const double c = (y[i] ? w_pos : w_neg) * (p - y[i]);
            gw += c * x[i];
            gb += c;
        }
        w -= lr * gw / n;
        b -= lr * gb / n;
    }
    return {w, b};
}

} // namespace detail

/// Ranks units by |mean(pos) − mean(neg)| on the training split and fits a
/// single-feature probe for each of the top `selection` units.
inline ProbeResult probe_select_and_fit(const ProbeTask& input, const ProbeConfig& cfg = {}) {
    const ProbeTask task = cfg.pool ? detail::pool_by_group(input) : input;
    const std::size_t n = task.labels.size(), units = task.activations.cols();
    require_same("probe rows vs labels", task.activations.rows(), n);
    const auto pos_total = static_cast<std::size_t>(std::count(task.labels.begin(), task.labels.end(), 1));
    if (pos_total < 10 || n - pos_total < 10) throw DomainError("probe task needs at least 10 examples per class");
    if (units == 0) throw DomainError("probe task has no units");

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(cfg.seed);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    const auto n_train = static_cast<std::size_t>(std::round(cfg.train_fraction * static_cast<double>(n)));
    const std::span<const std::size_t> train(perm.data(), n_train), test(perm.data() + n_train, n - n_train);
    auto classes = [&](std::span<const std::size_t> rows) {
        std::size_t p = 0;
        for (auto r : rows) p += task.labels[r] == 1;
        return std::pair{p, rows.size() - p};
    };
    const auto [tp, tn] = classes(train);
    const auto [sp, sn] = classes(test);
    if (tp == 0 || tn == 0 || sp == 0 || sn == 0) throw DomainError("probe split is degenerate (single class)");

    std::vector<double> diff(units, 0.0);
    for (std::size_t u = 0; u < units; ++u) {
        double mp = 0, mn = 0;
        for (auto r : train) (task.labels[r] ? mp : mn) += task.activations(r, u);
        diff[u] = std::abs(mp / static_cast<double>(tp) - mn / static_cast<double>(tn));
    }
    ProbeResult res;
    res.ranking.resize(units);
    std::iota(res.ranking.begin(), res.ranking.end(), std::size_t{0});
    std::stable_sort(res.ranking.begin(), res.ranking.end(), [&](auto a, auto b) { return diff[a] > diff[b]; });
    res.ranking.resize(std::min(task.selection, units));

    std::vector<int> y_train, y_test;
    for (auto r : train) y_train.push_back(task.labels[r]);
    for (auto r : test) y_test.push_back(task.labels[r]);
    res.prior_f1 = 2.0 * static_cast<double>(sp) / static_cast<double>(2 * sp + sn);
    res.f1.resize(res.ranking.size());
    parallel_for(res.ranking.size(), [&](std::size_t j) {
        const std::size_t u = res.ranking[j];
        std::vector<double> xs;
        for (auto r : train) xs.push_back(task.activations(r, u));
        const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
        double var = 0;
        for (double v : xs) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(xs.size()));
        const double inv = sd > 0 ? 1.0 / sd : 0.0;
        for (double& v : xs) v = (v - mean) * inv;
        const auto [w, b] = detail::fit_logistic_1d(xs, y_train, cfg.iterations, cfg.lr);
        std::vector<int> pred;
        for (auto r : test) pred.push_back(w * (task.activations(r, u) - mean) * inv + b > 0 ? 1 : 0);
        res.f1[j] = f1_score(y_test, pred);
    });
    for (std::size_t j = 0; j < res.f1.size(); ++j)
        if (res.f1[j] > res.best_f1) {
            res.best_f1 = res.f1[j];
            res.best_unit = res.ranking[j];
        }
    return res;
}

/// Pre-activation values of every unit for each row of X (hidden
/// pre-activations for sparse MLPs, gate pre-activations for MoE kinds).
template <class T>
Matrix<double> unit_preactivations(const Layer<T>& layer, const Matrix<T>& X, const Matrix<T>* Y = nullptr) {
    return std::visit(
        [&](const auto& l) -> Matrix<double> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, SparseMlp<T>>) {
                Matrix<double> out(X.rows(), l.hidden_dim());
                for (std::size_t r = 0; r < X.rows(); ++r) {
                    SparseTrace<T> t;
                    sparse_mlp_forward(l, X.row(r), Y ? Y->row(r) : std::span<const T>{}, 0, &t);
                    for (std::size_t h = 0; h < t.pre.size(); ++h) out(r, h) = static_cast<double>(t.pre[h]);
                }
                return out;
            } else if constexpr (requires { l.experts(); }) {
                Matrix<double> out(X.rows(), l.experts());
                for (std::size_t r = 0; r < X.rows(); ++r) {
                    MoeTrace<T> t;
                    detail::gate_and_encode(l, X.row(r), l.k, t);
                    for (std::size_t n = 0; n < t.gate_pre.size(); ++n) out(r, n) = static_cast<double>(t.gate_pre[n]);
                }
                return out;
            } else {
                throw UnsupportedError("dense teachers have no sparse units");
            }
        },
        layer);
}

} // namespace mxd
