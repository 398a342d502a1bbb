#pragma once

// Synthetic teachers, activation datasets, the distillation loop and
// feature-frequency logging.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mxd/accounting.hpp"
#include "mxd/error.hpp"
#include "mxd/layers.hpp"
#include "mxd/linalg.hpp"
#include "mxd/parallel.hpp"
#include "mxd/rng.hpp"
#include "mxd/students.hpp"
#include "mxd/train.hpp"

namespace mxd {

// ---------------------------------------------------------------------------
// Synthetic teachers
// ---------------------------------------------------------------------------

enum class TeacherKind { mlp_gelu, glu_swish };

inline TeacherKind parse_teacher_kind(std::string_view s) {
    if (s == "mlp_gelu") return TeacherKind::mlp_gelu;
    if (s == "glu_swish") return TeacherKind::glu_swish;
    throw DomainError("unknown teacher kind '" + std::string(s) + "'");
}

namespace detail {

/// Columns of a Gaussian rows×cols matrix orthonormalized by modified
/// Gram-Schmidt (cols ≤ rows).
inline Matrix<double> random_orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix<double> q(rows, cols);
    for (double& v : q.flat()) v = rng.normal();
    for (std::size_t j = 0; j < cols; ++j) {
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t p = 0; p < j; ++p) {
                double d = 0;
                for (std::size_t i = 0; i < rows; ++i) d += q(i, j) * q(i, p);
                for (std::size_t i = 0; i < rows; ++i) q(i, j) -= d * q(i, p);
            }
        double n = 0;
        for (std::size_t i = 0; i < rows; ++i) n += q(i, j) * q(i, j);
        n = std::sqrt(n);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) /= n;
    }
    return q;
}

template <class T>
Matrix<T> gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix<T> m(rows, cols);
    for (T& v : m.flat()) v = static_cast<T>(stddev * rng.normal());
    return m;
}

template <class T>
Vector<T> gaussian_vector(Rng& rng, std::size_t n, double stddev) {
    Vector<T> v(n);
    for (T& x : v) x = static_cast<T>(stddev * rng.normal());
    return v;
}

} // namespace detail

/// Frozen random teacher. Encoders have N(0, 1/I) entries so pre-activations
/// are O(1) for standard-normal inputs; the decoder has N(0, 1/H*) entries, or
/// when `spectrum` (length min(H*, O)) is given, D* = U·diag(spectrum)·Vᵀ with
/// random orthonormal U, V.
template <class T>
Layer<T> make_synthetic_teacher(Rng& rng, std::size_t I, std::size_t H, std::size_t O, TeacherKind kind,
                                const std::optional<std::vector<double>>& spectrum = std::nullopt) {
    if (I == 0 || H == 0 || O == 0) throw DomainError("make_synthetic_teacher: dims must be >= 1");
    const double enc_sd = 1.0 / std::sqrt(static_cast<double>(I));
    Matrix<T> E = detail::gaussian_matrix<T>(rng, I, H, enc_sd);
    Matrix<T> E_glu = kind == TeacherKind::glu_swish ? detail::gaussian_matrix<T>(rng, I, H, enc_sd) : Matrix<T>();
    Matrix<T> D;
    if (spectrum) {
        const std::size_t m = std::min(H, O);
        if (spectrum->size() != m)
            throw DomainError("make_synthetic_teacher: spectrum length " + std::to_string(spectrum->size()) +
                              " != min(H, O) = " + std::to_string(m));
        const auto U = detail::random_orthonormal_columns(rng, H, m);
        const auto V = detail::random_orthonormal_columns(rng, O, m);
        D = Matrix<T>(H, O);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t o = 0; o < O; ++o) {
                double acc = 0;
                for (std::size_t j = 0; j < m; ++j) acc += U(h, j) * (*spectrum)[j] * V(o, j);
                D(h, o) = static_cast<T>(acc);
            }
    } else {
        D = detail::gaussian_matrix<T>(rng, H, O, 1.0 / std::sqrt(static_cast<double>(H)));
    }
    Vector<T> b_enc = detail::gaussian_vector<T>(rng, H, 0.5);
    Vector<T> b_dec = detail::gaussian_vector<T>(rng, O, 0.1);
    if (kind == TeacherKind::glu_swish)
        return TeacherGlu<T>{std::move(E_glu), std::move(E), std::move(D), std::move(b_enc), std::move(b_dec), Activation::swish};
    return TeacherMlp<T>{std::move(E), std::move(D), std::move(b_enc), std::move(b_dec), Activation::gelu};
}

// ---------------------------------------------------------------------------
// Activation datasets
// ---------------------------------------------------------------------------

/// Paired rows: X(r) is an MLP input, Y(r) the MLP output for it.
template <class T>
struct ActivationDataset {
    Matrix<T> X;
    Matrix<T> Y;
    std::string source;

    std::size_t size() const { return X.rows(); }

    void validate() const { require_same("dataset row counts", X.rows(), Y.rows()); }
};

template <class T>
Matrix<T> gaussian_inputs(Rng& rng, std::size_t count, std::size_t dim) {
    return detail::gaussian_matrix<T>(rng, count, dim, 1.0);
}

/// Runs a dense teacher over `inputs`. The synthetic host exposes one MLP, so
/// `layer_index` must be 0.
template <class T>
ActivationDataset<T> collect_activations(const Layer<T>& teacher, std::size_t layer_index, const Matrix<T>& inputs) {
    const auto kind = kind_of(teacher);
    if (kind != LayerKind::teacher_mlp && kind != LayerKind::teacher_glu)
        throw DomainError("collect_activations: host must be a teacher MLP/GLU");
    if (layer_index != 0) throw DomainError("collect_activations: layer index " + std::to_string(layer_index) + " out of range");
    ActivationDataset<T> d{inputs, forward_batch(teacher, inputs), std::string("synthetic:") + std::string(to_string(kind))};
    return d;
}

// ---------------------------------------------------------------------------
// Feature frequency
// ---------------------------------------------------------------------------

struct FeatureFrequencyLog {
    std::size_t window = 0;            // tokens observed
    std::vector<std::uint64_t> counts; // per unit
    double bin_width = 0.5;            // in log10 units
    double min_exponent = 0;           // lower edge of the first bin (−log10 window)
    std::vector<std::uint64_t> histogram;

    std::size_t units() const { return counts.size(); }
    double frequency(std::size_t u) const { return static_cast<double>(counts[u]) / static_cast<double>(window); }

    std::size_t dead() const {
        return static_cast<std::size_t>(std::count(counts.begin(), counts.end(), std::uint64_t{0}));
    }
    double dead_fraction() const { return units() ? static_cast<double>(dead()) / static_cast<double>(units()) : 0.0; }

    /// Units active on more than `threshold` of all tokens.
    std::vector<std::size_t> shared(double threshold = 0.99) const {
        std::vector<std::size_t> out;
        for (std::size_t u = 0; u < units(); ++u)
            if (frequency(u) > threshold) out.push_back(u);
        return out;
    }
};

namespace detail {

/// Indices of the units a layer activates for one input (hidden neurons for
/// sparse MLPs, experts for MoE kinds). Zero-valued selections do not count.
template <class T>
void active_units(const Layer<T>& layer, std::span<const T> x, std::span<const T> y, std::vector<std::size_t>& out) {
    out.clear();
    std::visit(
        [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, SparseMlp<T>>) {
                SparseTrace<T> t;
                sparse_mlp_forward(l, x, y, 0, &t);
                for (std::size_t j = 0; j < t.z.k(); ++j)
                    if (t.z.values[j] != T(0)) out.push_back(t.z.indices[j]);
            } else if constexpr (std::is_same_v<L, Mxd<T>> || std::is_same_v<L, MuMoe<T>> || std::is_same_v<L, Mov<T>>) {
                MoeTrace<T> t;
                detail::gate_and_encode(l, x, l.k, t);
                for (std::size_t j = 0; j < t.a.k(); ++j)
                    if (t.a.values[j] != T(0)) out.push_back(t.a.indices[j]);
            } else {
                throw UnsupportedError("feature frequency is undefined for dense teachers");
            }
        },
        layer);
}

template <class T>
std::size_t unit_count(const Layer<T>& layer) {
    return std::visit(
        [](const auto& l) -> std::size_t {
            if constexpr (requires { l.experts(); }) return l.experts();
            else return l.hidden_dim();
        },
        layer);
}

} // namespace detail

/// Counts how often each unit fires over the rows of `data` (capped at
/// `max_window` rows).
template <class T>
FeatureFrequencyLog log_feature_frequency(const Layer<T>& layer, const ActivationDataset<T>& data,
                                          std::size_t max_window = std::numeric_limits<std::size_t>::max()) {
    const std::size_t window = std::min(max_window, data.size());
    if (window == 0) throw DomainError("log_feature_frequency: empty window");
    FeatureFrequencyLog log;
    log.window = window;
    log.counts.assign(detail::unit_count(layer), 0);
    std::vector<std::size_t> active;
    for (std::size_t r = 0; r < window; ++r) {
        detail::active_units(layer, data.X.row(r), data.Y.row(r), active);
        for (std::size_t u : active) ++log.counts[u];
    }
    log.min_exponent = -std::ceil(std::log10(static_cast<double>(window)));
    const auto bins = static_cast<std::size_t>(std::ceil(-log.min_exponent / log.bin_width));
    log.histogram.assign(std::max<std::size_t>(bins, 1), 0);
    for (std::size_t u = 0; u < log.units(); ++u) {
        if (log.counts[u] == 0) continue;
        const double e = std::log10(log.frequency(u));
        auto b = static_cast<std::size_t>(std::floor((e - log.min_exponent) / log.bin_width));
        log.histogram[std::min(b, log.histogram.size() - 1)] += 1;
    }
    return log;
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

/// Mean normalized reconstruction error ‖y − f(x)‖² / ‖y‖ over the dataset.
template <class T>
double eval_nmse(const Layer<T>& layer, const ActivationDataset<T>& data, std::size_t max_rows = std::numeric_limits<std::size_t>::max()) {
    const std::size_t rows = std::min(max_rows, data.size());
    if (rows == 0) throw DomainError("eval_nmse: empty dataset");
    require_same("eval_nmse input width", data.X.cols(), input_dim(layer));
    require_same("eval_nmse output width", data.Y.cols(), output_dim(layer));
    std::vector<double> per_row(rows);
    parallel_for(rows, [&](std::size_t r) {
        const auto y_hat = forward(layer, data.X.row(r), data.Y.row(r));
        per_row[r] = static_cast<double>(loss_normalized_recon<T>(y_hat, data.Y.row(r)));
    });
    double acc = 0;
    for (double v : per_row) acc += v;
    return acc / static_cast<double>(rows);
}

struct DistillConfig {
    LayerSpec student;
    StudentOptions options;
    KMode k_mode = KMode::fixed;
    std::size_t k_divisor = 2;
    std::size_t steps = 1000;
    std::size_t batch = 32;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    std::size_t eval_every = 1000;    // 0 disables periodic evaluation
    std::size_t eval_rows = 4096;     // cap on rows used for each evaluation
    std::size_t frequency_window = 100000;

    void validate() const {
        if (steps == 0 && eval_every == 0) return;
        if (batch == 0) throw DomainError("DistillConfig: batch must be >= 1");
        if (student.k == 0) throw DomainError("DistillConfig: k must be >= 1");
        if (eval_rows == 0) throw DomainError("DistillConfig: eval_rows must be >= 1");
    }
};

struct MetricsRecord {
    std::size_t step = 0;
    double nmse = 0;
    std::size_t k = 0;
    double dead_frac = 0;
    double wall_ms = 0;
};

template <class T>
struct DistillResult {
    Layer<T> layer;
    std::vector<MetricsRecord> history;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Trains a fresh student on `train`. b_dec starts at the column means of the
/// training targets; MoE decoders start at zero. A metrics record is emitted at
/// step 0, every `eval_every` steps, and after the last step, measured on
/// `eval` (or `train` when `eval` is null).
template <class T>
DistillResult<T> distill(const ActivationDataset<T>& train, const DistillConfig& cfg,
                         const std::type_identity_t<ActivationDataset<T>>* eval = nullptr, const MetricsSink& sink = {}) {
    train.validate();
    cfg.validate();
    if (train.size() == 0) throw DomainError("distill: empty training set");
    const std::size_t in_dim = cfg.student.kind == LayerKind::sae ? cfg.student.output : cfg.student.input;
    require_same("distill student input vs dataset", in_dim, cfg.student.kind == LayerKind::sae ? train.Y.cols() : train.X.cols());
    require_same("distill student output vs dataset", cfg.student.output, train.Y.cols());
    const ActivationDataset<T>& eval_data = eval ? *eval : train;

    Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    Rng batch_rng = root.fork(2);
    KSchedule schedule(cfg.student.k, cfg.k_mode, cfg.k_divisor, root.fork(3).next_u64());

    DistillResult<T> result{make_student<T>(cfg.student, init_rng, cfg.options, &train.Y), {}};
    const auto t0 = std::chrono::steady_clock::now();

    auto record = [&](std::size_t step, std::size_t k) {
        MetricsRecord m;
        m.step = step;
        m.k = k;
        m.nmse = eval_nmse(result.layer, eval_data, cfg.eval_rows);
        m.dead_frac = log_feature_frequency(result.layer, eval_data, cfg.frequency_window).dead_fraction();
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(m);
        if (sink) sink(m);
    };

    std::visit(
        [&](auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (requires { l.k; }) {
                const std::size_t units = detail::unit_count<T>(Layer<T>(l));
                Adam<T> opt({cfg.lr});
                L grads = zeros_like(l);
                std::vector<std::size_t> batch(cfg.batch);
                if (cfg.eval_every) record(0, cfg.student.k);
                for (std::size_t step = 1; step <= cfg.steps; ++step) {
                    for (auto& r : batch) r = batch_rng.index(train.size());
                    const std::size_t k = std::min(schedule.sample(), units);
                    const T loss = backward_batch(l, grads, train.X, train.Y, batch, k);
                    if (!std::isfinite(static_cast<double>(loss))) {
                        std::ostringstream msg;
                        msg << "distill: non-finite loss " << loss << " at step " << step << " (kind "
                            << to_string(cfg.student.kind) << ", k " << k << ", lr " << cfg.lr << ")";
                        throw std::runtime_error(msg.str());
                    }
                    opt.update(l, grads);
                    if (cfg.eval_every && (step % cfg.eval_every == 0 || step == cfg.steps)) record(step, k);
                }
            } else {
                throw UnsupportedError("distill: teachers are not trainable students");
            }
        },
        result.layer);
    return result;
}

} // namespace mxd
