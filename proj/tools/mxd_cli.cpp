// mxd: command-line front end for training hosts, distilling sparse layers,
// evaluating them and inspecting checkpoints.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mxd/accounting.hpp"
#include "mxd/checkpoint.hpp"
#include "mxd/config.hpp"
#include "mxd/corpus.hpp"
#include "mxd/distill.hpp"
#include "mxd/eval.hpp"
#include "mxd/parallel.hpp"
#include "mxd/toy_lm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mxd;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::optional<std::string> dtype;
};

Config resolve_config(const GlobalFlags& g) {
    Config cfg = g.config.empty() ? Config() : Config::load(g.config);
    if (g.seed) cfg.set("run.seed", std::to_string(*g.seed));
    if (g.out) cfg.set("run.out", *g.out);
    if (g.threads) cfg.set("run.threads", std::to_string(*g.threads));
    if (g.dtype) cfg.set("run.dtype", *g.dtype);
    const auto& dt = cfg.str("run.dtype");
    if (dt != "f32" && dt != "f64") throw ConfigError("key 'run.dtype' must be f32 or f64, got '" + dt + "'");
    set_threads(cfg.count("run.threads"));
    return cfg;
}

template <class Fn>
auto parse_or_config_error(const std::string& key, Fn&& fn) {
    try {
        return fn();
    } catch (const DomainError& e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

std::vector<std::uint8_t> load_corpus(const Config& cfg, const fs::path& out) {
    const auto& path = cfg.str("corpus.path");
    if (path.empty()) {
        const std::size_t bytes = cfg.count("corpus.synthetic_bytes");
        if (bytes == 0) throw ConfigError("missing required key 'corpus.path' (or set corpus.synthetic_bytes)");
        auto corpus = synthetic_corpus(bytes, cfg.u64("run.seed"));
        write_file_bytes(out / "corpus.txt", corpus);
        return corpus;
    }
    if (!fs::exists(path)) throw ConfigError("key 'corpus.path': file '" + path + "' does not exist");
    return read_file_bytes(path);
}

ToyLmConfig lm_config(const Config& cfg) {
    ToyLmConfig m;
    m.d = cfg.count("lm.d");
    m.blocks = cfg.count("lm.blocks");
    m.heads = cfg.count("lm.heads");
    m.ctx = cfg.count("lm.ctx");
    m.mlp_hidden = cfg.count("lm.mlp_hidden");
    parse_or_config_error("lm", [&] { m.validate(); return 0; });
    return m;
}

void write_jsonl(std::ostream& os, const MetricsRecord& m) {
    os << json{{"step", m.step}, {"nmse", m.nmse}, {"k", m.k}, {"dead_frac", m.dead_frac}, {"wall_ms", m.wall_ms}}.dump()
       << '\n';
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------

template <class T>
int cmd_train_lm(const Config& cfg) {
    const fs::path out = cfg.str("run.out");
    fs::create_directories(out);
    LmTrainConfig tc;
    tc.model = lm_config(cfg);
    tc.steps = cfg.count("lm.steps");
    tc.batch = cfg.count("lm.batch");
    tc.lr = cfg.real("lm.lr");
    tc.holdout = cfg.real("lm.holdout");
    tc.eval_every = cfg.count("lm.eval_every");
    tc.eval_windows = cfg.count("lm.eval_windows");
    tc.seed = cfg.u64("run.seed");
    const auto corpus = load_corpus(cfg, out);
    cfg.write_resolved(out);

    std::ofstream metrics(out / "metrics.jsonl");
    const auto res = train_toy_lm<T>(corpus, tc, [&](const LmMetrics& m) {
        metrics << json{{"step", m.step}, {"train_ce", m.train_ce}, {"heldout_ce", m.heldout_ce}, {"wall_ms", m.wall_ms}}.dump()
                << '\n';
        std::cout << "step " << m.step << " train_ce " << fmt(m.train_ce) << " heldout_ce " << fmt(m.heldout_ce) << '\n';
    });
    save_toy_lm(res.lm, out / "lm.ckpt");
    std::cout << "wrote " << (out / "lm.ckpt").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// Teacher data
// ---------------------------------------------------------------------------

template <class T>
struct TeacherData {
    ActivationDataset<T> train, eval;
    std::optional<ToyLm<T>> lm;
    std::vector<std::uint8_t> heldout;
    std::size_t layer = 0;
};

template <class T>
TeacherData<T> build_teacher(const Config& cfg, const fs::path& out) {
    TeacherData<T> d;
    const auto seed = cfg.u64("run.seed");
    const auto source = cfg.str("teacher.source");
    const std::size_t pairs = cfg.count("teacher.pairs"), eval_pairs = cfg.count("teacher.eval_pairs");
    if (pairs == 0 || eval_pairs == 0) throw ConfigError("key 'teacher.pairs' and 'teacher.eval_pairs' must be >= 1");
    if (source == "synthetic") {
        const auto kind = parse_or_config_error("teacher.kind", [&] { return parse_teacher_kind(cfg.str("teacher.kind")); });
        Rng rng(seed);
        Rng teacher_rng = rng.fork(10), data_rng = rng.fork(11), eval_rng = rng.fork(12);
        const std::size_t I = cfg.count("teacher.input"), H = cfg.count("teacher.hidden"), O = cfg.count("teacher.output");
        const auto teacher = parse_or_config_error("teacher", [&] {
            return make_synthetic_teacher<T>(teacher_rng, I, H, O, kind);
        });
        d.train = collect_activations(teacher, 0, gaussian_inputs<T>(data_rng, pairs, I));
        d.eval = collect_activations(teacher, 0, gaussian_inputs<T>(eval_rng, eval_pairs, I));
        return d;
    }
    if (source != "lm") throw ConfigError("key 'teacher.source' must be synthetic or lm, got '" + source + "'");
    const auto& ckpt = cfg.required("teacher.lm_checkpoint");
    if (!fs::exists(ckpt)) throw ConfigError("key 'teacher.lm_checkpoint': file '" + ckpt + "' does not exist");
    d.lm = load_toy_lm<T>(ckpt);
    d.layer = cfg.count("teacher.layer");
    if (d.layer >= d.lm->blocks.size()) throw ConfigError("key 'teacher.layer': block index out of range");
    const auto corpus = load_corpus(cfg, out);
    const auto [train, held] = split_corpus(corpus, cfg.real("lm.holdout"));
    d.heldout.assign(held.begin(), held.end());
    Rng rng(seed);
    Rng a = rng.fork(11), b = rng.fork(12);
    const std::size_t ctx = d.lm->cfg.ctx;
    d.train = sample_lm_activations(*d.lm, d.layer, train, (pairs + ctx - 1) / ctx, a);
    d.eval = sample_lm_activations(*d.lm, d.layer, held, (eval_pairs + ctx - 1) / ctx, b);
    return d;
}

LayerSpec student_spec(const Config& cfg, LayerKind kind, std::size_t I, std::size_t H_star, std::size_t O, std::size_t k) {
    const std::size_t e = cfg.count("student.expansion");
    const bool biases = cfg.flag("student.biases");
    if (e == 0) throw ConfigError("key 'student.expansion' must be >= 1");
    const LayerSpec tc{LayerKind::tc, I, e * I, O, 0, 0, k, biases};
    const std::uint64_t budget = param_count(tc);
    switch (kind) {
        case LayerKind::tc:
        case LayerKind::stc: return LayerSpec{kind, I, e * I, O, 0, 0, k, biases};
        case LayerKind::sae: return LayerSpec{kind, O, e * O, O, 0, 0, k, biases};
        case LayerKind::mxd:
        case LayerKind::mxd_glu:
        case LayerKind::mov: {
            LayerSpec s{kind, I, H_star, O, 0, 0, k, biases};
            s.experts = parse_or_config_error("student.expansion", [&] { return match_experts(s, budget); });
            return s;
        }
        case LayerKind::mumoe: {
            const std::size_t R = cfg.count("student.rank") ? cfg.count("student.rank") : O;
            LayerSpec s{kind, I, H_star, O, 0, R, k, biases};
            s.experts = parse_or_config_error("student.rank", [&] { return match_experts(s, budget); });
            return s;
        }
        default: throw ConfigError("key 'student.kinds': '" + std::string(to_string(kind)) + "' is not a student kind");
    }
}

// ---------------------------------------------------------------------------
// distill / sweep
// ---------------------------------------------------------------------------

struct FrontierRow {
    std::string kind;
    std::size_t k = 0;
    std::uint64_t params = 0;
    double nmse = 0;
    std::optional<double> ce_delta;
};

struct Point {
    LayerKind kind;
    std::size_t k;
    std::uint64_t seed;
    fs::path dir;
};

template <class T>
FrontierRow run_point(const Config& cfg, const TeacherData<T>& data, const Point& p, std::size_t H_star) {
    DistillConfig dc;
    dc.student = student_spec(cfg, p.kind, data.train.X.cols(), H_star, data.train.Y.cols(), p.k);
    dc.options.enc_act = parse_or_config_error("student.enc_act", [&] { return parse_activation(cfg.str("student.enc_act")); });
    const auto& mode = cfg.str("student.k_mode");
    if (mode != "fixed" && mode != "random") throw ConfigError("key 'student.k_mode' must be fixed or random");
    dc.k_mode = mode == "fixed" ? KMode::fixed : KMode::random_uniform;
    dc.k_divisor = cfg.count("student.k_divisor");
    dc.steps = cfg.count("train.steps");
    dc.batch = cfg.count("train.batch");
    dc.lr = cfg.real("train.lr");
    dc.eval_every = cfg.count("train.eval_every");
    dc.eval_rows = cfg.count("train.eval_rows");
    dc.frequency_window = cfg.count("train.frequency_window");
    dc.seed = p.seed;
    const std::string stem = std::string(to_string(p.kind)) + "_k" + std::to_string(p.k);
    std::ofstream metrics(p.dir / ("metrics_" + stem + ".jsonl"));
    auto res = parse_or_config_error("train", [&] {
        return distill(data.train, dc, &data.eval, [&](const MetricsRecord& m) { write_jsonl(metrics, m); });
    });
    save_checkpoint(res.layer, p.dir / (stem + ".ckpt"));
    FrontierRow row{std::string(to_string(p.kind)), p.k, param_count(dc.student), eval_nmse(res.layer, data.eval), {}};
    if (data.lm) {
        auto host = *data.lm;
        row.ce_delta = eval_ce_delta(host, SpliceHook<T>{data.layer, res.layer}, data.heldout).delta();
    }
    return row;
}

void write_frontier(const fs::path& path, const std::vector<FrontierRow>& rows, const std::vector<std::uint64_t>* seeds = nullptr) {
    std::ofstream os(path);
    os << (seeds ? "seed," : "") << "kind,K,params,final_nmse,ce_delta\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (seeds) os << (*seeds)[i] << ',';
        os << r.kind << ',' << r.k << ',' << r.params << ',' << fmt(r.nmse) << ',' << (r.ce_delta ? fmt(*r.ce_delta) : "")
           << '\n';
    }
    if (!os) throw std::runtime_error("cannot write " + path.string());
}

template <class T>
std::vector<FrontierRow> run_points(const Config& cfg, const TeacherData<T>& data, const std::vector<Point>& points) {
    const std::size_t H_star = data.lm ? data.lm->cfg.mlp_hidden : cfg.count("teacher.hidden");
    std::vector<FrontierRow> rows(points.size());
    std::mutex log;
    parallel_for(points.size(), [&](std::size_t i) {
        rows[i] = run_point(cfg, data, points[i], H_star);
        std::lock_guard lock(log);
        std::cout << rows[i].kind << " K=" << rows[i].k << " seed=" << points[i].seed << " params=" << rows[i].params
                  << " nmse=" << fmt(rows[i].nmse) << '\n';
    });
    return rows;
}

std::vector<LayerKind> student_kinds(const Config& cfg) {
    std::vector<LayerKind> kinds;
    for (const auto& s : cfg.list("student.kinds"))
        kinds.push_back(parse_or_config_error("student.kinds", [&] { return parse_layer_kind(s); }));
    if (kinds.empty()) throw ConfigError("key 'student.kinds' is empty");
    return kinds;
}

std::vector<std::uint64_t> k_list(const Config& cfg) {
    auto ks = cfg.u64_list("student.k");
    if (ks.empty()) throw ConfigError("key 'student.k' is empty");
    for (auto k : ks)
        if (k == 0) throw ConfigError("key 'student.k' entries must be >= 1");
    return ks;
}

template <class T>
int cmd_distill(const Config& cfg) {
    const fs::path out = cfg.str("run.out");
    fs::create_directories(out);
    const auto kinds = student_kinds(cfg);
    const auto ks = k_list(cfg);
    const auto data = build_teacher<T>(cfg, out);
    cfg.write_resolved(out);
    std::vector<Point> points;
    for (auto kind : kinds)
        for (auto k : ks) points.push_back({kind, k, cfg.u64("run.seed"), out});
    write_frontier(out / "frontier.csv", run_points(cfg, data, points));
    std::cout << "wrote " << (out / "frontier.csv").string() << '\n';
    return 0;
}

template <class T>
int cmd_sweep(const Config& cfg) {
    const fs::path out = cfg.str("run.out");
    fs::create_directories(out);
    const auto kinds = student_kinds(cfg);
    const auto ks = k_list(cfg);
    const auto seeds = cfg.u64_list("sweep.seeds");
    if (seeds.empty()) throw ConfigError("key 'sweep.seeds' is empty");
    const auto data = build_teacher<T>(cfg, out);
    cfg.write_resolved(out);
    std::vector<Point> points;
    std::vector<std::uint64_t> seed_col;
    for (auto seed : seeds) {
        const fs::path dir = out / ("seed_" + std::to_string(seed));
        fs::create_directories(dir);
        for (auto kind : kinds)
            for (auto k : ks) {
                points.push_back({kind, k, seed, dir});
                seed_col.push_back(seed);
            }
    }
    const auto rows = run_points(cfg, data, points);
    write_frontier(out / "sweep.csv", rows, &seed_col);
    std::cout << "wrote " << (out / "sweep.csv").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void check_generation_fits(const Config& cfg, std::size_t ctx) {
    if (cfg.count("eval.prompt_length") + cfg.count("eval.horizon") > ctx + 1)
        throw ConfigError("eval.prompt_length + eval.horizon must not exceed lm.ctx + 1 (" + std::to_string(ctx + 1) + ")");
}

template <class T>
int cmd_eval(const Config& cfg) {
    const fs::path out = cfg.str("run.out");
    fs::create_directories(out);
    const auto& ckpt = cfg.required("eval.checkpoint");
    if (!fs::exists(ckpt)) throw ConfigError("key 'eval.checkpoint': file '" + ckpt + "' does not exist");
    const Layer<T> layer = load_checkpoint<T>(ckpt);
    const auto suites = cfg.list("eval.suites");
    if (suites.empty()) throw ConfigError("key 'eval.suites' is empty");
    static const std::vector<std::string> known{"nmse", "rank", "ce", "ngram", "steer", "probe"};
    for (const auto& s : suites)
        if (std::find(known.begin(), known.end(), s) == known.end())
            throw ConfigError("key 'eval.suites': unknown suite '" + s + "'");
    for (const auto& s : suites)
        if (s == "rank" && kind_of(layer) != LayerKind::mxd)
            throw UnsupportedError("suite 'rank' is unsupported for layer kind " + std::string(to_string(kind_of(layer))));
    cfg.write_resolved(out);

    const bool needs_data = std::any_of(suites.begin(), suites.end(), [](const auto& s) { return s != "rank"; });
    std::optional<TeacherData<T>> data;
    if (needs_data) data = build_teacher<T>(cfg, out);
    auto need_lm = [&](const std::string& suite) -> ToyLm<T>& {
        if (!data || !data->lm) throw ConfigError("suite '" + suite + "' needs teacher.source = lm");
        return *data->lm;
    };
    const std::uint64_t seed = cfg.u64("run.seed");
    std::ofstream report(out / "report.jsonl");
    auto emit = [&](json j) {
        report << j.dump() << '\n';
        std::cout << j.dump() << '\n';
    };
    const std::size_t K = active_k(layer);
    for (const auto& suite : suites) {
        if (suite == "nmse") {
            emit({{"suite", "nmse"}, {"nmse", eval_nmse(layer, data->eval)}});
        } else if (suite == "rank") {
            Rng rng(seed);
            const auto& m = std::get<Mxd<T>>(layer);
            const auto r = eval_normalized_rank(m, std::min(cfg.count("eval.rank_sample"), m.experts()), rng);
            emit({{"suite", "rank"}, {"normalized_rank", r.mean}, {"experts", r.experts.size()}});
        } else if (suite == "ce") {
            auto& lm = need_lm(suite);
            const auto r = eval_ce_delta(lm, SpliceHook<T>{data->layer, layer}, data->heldout);
            emit({{"suite", "ce"}, {"ce_base", r.base}, {"ce_spliced", r.spliced}, {"ce_delta", r.delta()}});
        } else if (suite == "ngram") {
            auto& lm = need_lm(suite);
            check_generation_fits(cfg, lm.cfg.ctx);
            Rng rng(seed);
            const auto prompts = sample_prompts(data->heldout, cfg.count("eval.prompts"), cfg.count("eval.prompt_length"), rng);
            const auto fr = eval_ngram_faithfulness(lm, SpliceHook<T>{data->layer, layer}, prompts, cfg.count("eval.horizon"));
            std::ofstream csv(out / "faithfulness.csv");
            write_faithfulness_csv(csv, fr, kind_of(layer), K);
            emit({{"suite", "ngram"}, {"fractions", fr}});
        } else if (suite == "steer") {
            auto& lm = need_lm(suite);
            check_generation_fits(cfg, lm.cfg.ctx);
            Rng rng(seed);
            const auto prompt = sample_prompts(data->heldout, 1, cfg.count("eval.prompt_length"), rng).front();
            const double lambda = cfg.real("eval.lambda");
            const std::size_t unit = cfg.count("eval.unit");
            const double kl = steering_kl(lm, layer, data->layer, unit, lambda, prompt);
            const auto gen = steer(lm, layer, data->layer, unit, lambda, prompt, cfg.count("eval.horizon"));
            emit({{"suite", "steer"}, {"unit", unit}, {"lambda", lambda}, {"kl", kl},
                  {"prompt", std::string(prompt.begin(), prompt.end())}, {"generated", std::string(gen.begin(), gen.end())}});
        } else if (suite == "probe") {
            // Planted concept: the sign of the first input coordinate.
            const std::size_t n = std::min(cfg.count("eval.probe_examples"), data->eval.size());
            Matrix<T> X(n, data->eval.X.cols()), Y(n, data->eval.Y.cols());
            ProbeTask task;
            for (std::size_t r = 0; r < n; ++r) {
                std::copy(data->eval.X.row(r).begin(), data->eval.X.row(r).end(), X.row(r).begin());
                std::copy(data->eval.Y.row(r).begin(), data->eval.Y.row(r).end(), Y.row(r).begin());
                task.labels.push_back(data->eval.X(r, 0) > T(0) ? 1 : 0);
            }
            task.activations = unit_preactivations(layer, X, &Y);
            const auto res = probe_select_and_fit(task);
            emit({{"suite", "probe"}, {"best_f1", res.best_f1}, {"best_unit", res.best_unit}, {"prior_f1", res.prior_f1}});
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

template <class T>
void print_layer(const Checkpoint<T>& c) {
    if (c.kind == LayerKind::toy_lm) {
        const auto lm = toy_lm_from_checkpoint(c);
        std::size_t n = 0;
        lm.visit_params([&](std::string_view, std::size_t r, std::size_t cols, auto) { n += r * cols; });
        std::cout << "dims: vocab=" << lm.cfg.vocab << " d=" << lm.cfg.d << " blocks=" << lm.cfg.blocks
                  << " heads=" << lm.cfg.heads << " ctx=" << lm.cfg.ctx << " mlp_hidden=" << lm.cfg.mlp_hidden << '\n'
                  << "param_count: " << n << '\n';
        return;
    }
    const auto layer = from_checkpoint(c);
    const auto s = spec_of(layer);
    std::cout << "dims: input=" << s.input << " hidden=" << s.hidden << " output=" << s.output;
    if (s.experts) std::cout << " experts=" << s.experts;
    if (s.rank) std::cout << " rank=" << s.rank;
    std::cout << '\n' << "param_count: " << param_count(s) << '\n' << "K: " << active_k(layer) << '\n';
}

std::string millions(std::uint64_t n) {
    std::ostringstream os;
    // Truncated, not rounded, to one decimal of millions.
    os << n / 1000000 << '.' << (n / 100000) % 10 << "M";
    return os.str();
}

int inspect_spec(const Config& cfg) {
    LayerSpec s;
    s.kind = parse_or_config_error("spec.kind", [&] { return parse_layer_kind(cfg.required("spec.kind")); });
    s.input = cfg.count("spec.input");
    s.hidden = cfg.count("spec.hidden");
    s.output = cfg.count("spec.output");
    s.rank = cfg.count("spec.rank");
    s.k = cfg.count("spec.k");
    s.biases = cfg.flag("spec.biases");
    s.experts = cfg.count("spec.experts");
    if (const std::size_t tc_h = cfg.count("spec.match_tc_hidden")) {
        const auto budget = param_count(LayerSpec{LayerKind::tc, s.input, tc_h, s.output, 0, 0, 0, s.biases});
        s.experts = parse_or_config_error("spec.match_tc_hidden", [&] { return match_experts(s, budget); });
    }
    std::cout << "kind: " << to_string(s.kind) << '\n'
              << "dims: input=" << s.input << " hidden=" << s.hidden << " output=" << s.output;
    if (s.experts) std::cout << " experts=" << s.experts;
    if (s.rank) std::cout << " rank=" << s.rank;
    const auto n = parse_or_config_error("spec", [&] { return param_count(s); });
    std::cout << '\n' << "param_count: " << n << " (" << millions(n) << ")\n" << "K: " << s.k << '\n';
    return 0;
}

int cmd_inspect(const std::string& path, const Config& cfg) {
    if (path.empty()) return inspect_spec(cfg);
    if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
    const auto bytes = read_file_bytes(path);
    const auto h = read_header(bytes);  // validates magic, CRC and version
    std::cout << "file: " << path << '\n'
              << "kind: " << to_string(h.kind) << '\n'
              << "dtype: " << (h.dtype == DType::f32 ? "f32" : "f64") << '\n'
              << "tensors: " << h.tensor_count << '\n'
              << "crc: ok\n";
    if (h.dtype == DType::f32) print_layer(deserialize<float>(bytes));
    else print_layer(deserialize<double>(bytes));
    return 0;
}

template <class Fn>
int dispatch_dtype(const Config& cfg, Fn&& fn) {
    return cfg.str("run.dtype") == "f64" ? fn(double{}) : fn(float{});
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-Decoders sparse layer toolkit"};
    app.require_subcommand(1);
    GlobalFlags g;
    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--config", g.config, "sectioned key = value config file");
        sub->add_option("--seed", g.seed, "overrides run.seed");
        sub->add_option("--out", g.out, "overrides run.out");
        sub->add_option("--threads", g.threads, "overrides run.threads (0 = all cores)");
        sub->add_option("--dtype", g.dtype, "overrides run.dtype")->check(CLI::IsMember({"f32", "f64"}));
    };
    auto* train_lm = app.add_subcommand("train-lm", "train the toy byte-level LM host");
    auto* distill_cmd = app.add_subcommand("distill", "distill sparse students for every (kind, K)");
    auto* eval_cmd = app.add_subcommand("eval", "run evaluation suites on a student checkpoint");
    auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint or a [spec] section");
    auto* sweep = app.add_subcommand("sweep", "distill across seeds in parallel");
    std::string inspect_path;
    inspect->add_option("checkpoint", inspect_path, "checkpoint file");
    for (auto* s : {train_lm, distill_cmd, eval_cmd, inspect, sweep}) add_globals(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        const Config cfg = resolve_config(g);
        if (*inspect) return cmd_inspect(inspect_path, cfg);
        return dispatch_dtype(cfg, [&](auto tag) {
            using T = decltype(tag);
            if (*train_lm) return cmd_train_lm<T>(cfg);
            if (*distill_cmd) return cmd_distill<T>(cfg);
            if (*eval_cmd) return cmd_eval<T>(cfg);
            return cmd_sweep<T>(cfg);
        });
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const UnsupportedError& e) {
        std::cerr << "unsupported: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
