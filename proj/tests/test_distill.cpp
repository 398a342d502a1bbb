#include <catch2/catch_amalgamated.hpp>

#include "mxd/checkpoint.hpp"
#include "mxd/distill.hpp"
#include "test_util.hpp"

using namespace mxd;

namespace {

ActivationDataset<double> small_dataset(std::uint64_t seed, std::size_t rows, TeacherKind kind = TeacherKind::mlp_gelu) {
    Rng rng(seed);
    const auto teacher = make_synthetic_teacher<double>(rng, 8, 16, 6, kind);
    return collect_activations(teacher, 0, gaussian_inputs<double>(rng, rows, 8));
}

} // namespace

TEST_CASE("synthetic teacher shapes and spectrum") {
    Rng rng(1);
    auto t = make_synthetic_teacher<double>(rng, 8, 12, 5, TeacherKind::mlp_gelu);
    CHECK(kind_of(t) == LayerKind::teacher_mlp);
    CHECK(input_dim(t) == 8);
    CHECK(output_dim(t) == 5);

    auto g = make_synthetic_teacher<double>(rng, 8, 12, 5, TeacherKind::glu_swish);
    CHECK(kind_of(g) == LayerKind::teacher_glu);

    const std::vector<double> spec{5, 4, 3, 2, 1};
    auto s = make_synthetic_teacher<double>(rng, 8, 12, 5, TeacherKind::mlp_gelu, spec);
    const auto sv = singular_values(std::get<TeacherMlp<double>>(s).D);
    for (std::size_t i = 0; i < spec.size(); ++i) CHECK(sv[i] == Catch::Approx(spec[i]).epsilon(1e-10));

    CHECK_THROWS_AS(make_synthetic_teacher<double>(rng, 8, 12, 5, TeacherKind::mlp_gelu, std::vector<double>{1, 2}),
                    DomainError);
    CHECK_THROWS_AS(parse_teacher_kind("conv"), DomainError);
}

TEST_CASE("collect_activations matches the teacher forward") {
    Rng rng(2);
    const auto teacher = make_synthetic_teacher<double>(rng, 4, 8, 3, TeacherKind::mlp_gelu);
    const auto X = gaussian_inputs<double>(rng, 20, 4);
    const auto d = collect_activations(teacher, 0, X);
    REQUIRE(d.size() == 20);
    for (std::size_t r = 0; r < 20; ++r) CHECK(forward(teacher, X.row(r)) == std::vector<double>(d.Y.row(r).begin(), d.Y.row(r).end()));
    CHECK_THROWS_AS(collect_activations(teacher, 1, X), DomainError);
    LayerSpec spec{LayerKind::tc, 4, 8, 3, 0, 0, 2};
    auto student = make_student<double>(spec, rng);
    CHECK_THROWS_AS(collect_activations(student, 0, X), DomainError);
}

TEST_CASE("distillation reduces NMSE for every student kind") {
    const auto data = small_dataset(3, 2000);
    const std::pair<LayerKind, std::size_t> kinds[] = {{LayerKind::tc, 0},    {LayerKind::stc, 0}, {LayerKind::mxd, 0},
                                                       {LayerKind::mxd_glu, 0}, {LayerKind::mumoe, 4}, {LayerKind::mov, 0}};
    for (auto [kind, rank] : kinds) {
        CAPTURE(to_string(kind));
        DistillConfig cfg;
        cfg.student = LayerSpec{kind, 8, 16, 6, 12, rank, 4};
        cfg.steps = 400;
        cfg.batch = 16;
        cfg.lr = 3e-3;
        cfg.eval_every = 400;
        cfg.eval_rows = 500;
        const auto res = distill(data, cfg);
        REQUIRE(res.history.size() == 2);
        CHECK(res.history.back().nmse < 0.7 * res.history.front().nmse);
        CHECK(res.history.back().step == 400);
    }
}

TEST_CASE("distillation is deterministic for a fixed seed") {
    const auto data = small_dataset(4, 500);
    DistillConfig cfg;
    cfg.student = LayerSpec{LayerKind::mxd, 8, 16, 6, 10, 0, 3};
    cfg.steps = 50;
    cfg.lr = 1e-3;
    cfg.eval_every = 25;
    cfg.seed = 9;
    cfg.k_mode = KMode::random_uniform;
    const auto a = distill(data, cfg);
    const auto b = distill(data, cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].nmse == b.history[i].nmse);
    const auto& la = std::get<Mxd<double>>(a.layer);
    const auto& lb = std::get<Mxd<double>>(b.layer);
    CHECK(la.C == lb.C);
    CHECK(la.G == lb.G);
    cfg.seed = 10;
    const auto c = distill(data, cfg);
    CHECK_FALSE(std::get<Mxd<double>>(c.layer).G == la.G);
}

TEST_CASE("distillation initial state") {
    const auto data = small_dataset(5, 300);
    DistillConfig cfg;
    cfg.student = LayerSpec{LayerKind::mxd, 8, 16, 6, 10, 0, 3};
    cfg.steps = 0;
    cfg.eval_every = 1;
    const auto res = distill(data, cfg);
    const auto& l = std::get<Mxd<double>>(res.layer);
    const auto mean = column_means(data.Y);
    for (std::size_t o = 0; o < 6; ++o) CHECK(l.b_dec[o] == Catch::Approx(mean[o]));
    for (double v : l.D.flat()) CHECK(v == 0.0);
    // With a zero decoder the student predicts the mean target.
    const auto y = forward(res.layer, data.X.row(0));
    for (std::size_t o = 0; o < 6; ++o) CHECK(y[o] == Catch::Approx(mean[o]));
}

TEST_CASE("distillation errors") {
    const auto data = small_dataset(6, 100);
    DistillConfig cfg;
    cfg.student = LayerSpec{LayerKind::mxd, 9, 16, 6, 10, 0, 3};
    CHECK_THROWS_AS(distill(data, cfg), DimensionError);

    cfg.student.input = 8;
    cfg.steps = 200;
    cfg.eval_every = 0;
    auto poisoned = data;
    for (double& v : poisoned.X.flat()) v = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(distill(poisoned, cfg), Catch::Matchers::ContainsSubstring("non-finite"));

    cfg.student.k = 0;
    CHECK_THROWS_AS(distill(data, cfg), DomainError);
}

TEST_CASE("metrics sink sees each record") {
    const auto data = small_dataset(7, 200);
    DistillConfig cfg;
    cfg.student = LayerSpec{LayerKind::tc, 8, 16, 6, 0, 0, 4};
    cfg.steps = 30;
    cfg.eval_every = 10;
    std::vector<std::size_t> steps;
    distill(data, cfg, nullptr, [&](const MetricsRecord& m) { steps.push_back(m.step); });
    CHECK(steps == std::vector<std::size_t>{0, 10, 20, 30});
}

TEST_CASE("feature frequency log") {
    Rng rng(8);
    // Gate weights zero, gate bias picks expert 0 strongly: only expert 0 fires.
    LayerSpec spec{LayerKind::mxd, 4, 6, 3, 5, 0, 1};
    auto l = std::get<Mxd<double>>(make_student<double>(spec, rng));
    l.G.fill(0);
    l.b_gate = {3, 1, 0, 0, 0};
    ActivationDataset<double> d{gaussian_inputs<double>(rng, 50, 4), Matrix<double>(50, 3), "t"};
    const auto log = log_feature_frequency(Layer<double>(l), d);
    CHECK(log.window == 50);
    CHECK(log.counts == std::vector<std::uint64_t>{50, 0, 0, 0, 0});
    CHECK(log.dead() == 4);
    CHECK(log.dead_fraction() == Catch::Approx(0.8));
    CHECK(log.shared() == std::vector<std::size_t>{0});
    std::uint64_t binned = 0;
    for (auto c : log.histogram) binned += c;
    CHECK(binned == 1);

    // ReLU-ed zero gates never count as active.
    l.b_gate = {0, 0, 0, 0, 0};
    CHECK(log_feature_frequency(Layer<double>(l), d).dead() == 5);
    CHECK_THROWS_AS(log_feature_frequency(Layer<double>(l), d, 0), DomainError);
}

TEST_CASE("eval_nmse against a direct loop") {
    const auto data = small_dataset(9, 40);
    Rng rng(10);
    auto l = testing::random_mxd(rng, 8, 10, 16, 6, 3);
    double acc = 0;
    for (std::size_t r = 0; r < 40; ++r) {
        const auto y = mxd_forward(l, data.X.row(r));
        double num = 0, den = 0;
        for (std::size_t o = 0; o < 6; ++o) {
            num += (data.Y(r, o) - y[o]) * (data.Y(r, o) - y[o]);
            den += data.Y(r, o) * data.Y(r, o);
        }
        acc += num / std::sqrt(den);
    }
    CHECK(eval_nmse(Layer<double>(l), data) == Catch::Approx(acc / 40).epsilon(1e-12));
}

TEST_CASE("teacher determinism and planted decoder rank") {
    Rng a(11), b(11);
    const auto t1 = make_synthetic_teacher<double>(a, 6, 10, 6, TeacherKind::glu_swish);
    const auto t2 = make_synthetic_teacher<double>(b, 6, 10, 6, TeacherKind::glu_swish);
    CHECK(serialize(to_checkpoint(t1)) == serialize(to_checkpoint(t2)));

    Rng rng(12);
    const auto ones = make_synthetic_teacher<double>(rng, 6, 6, 6, TeacherKind::mlp_gelu, std::vector<double>(6, 1.0));
    CHECK(numerical_rank(std::get<TeacherMlp<double>>(ones).D) == 6);
    for (std::size_t r : {1u, 3u, 5u}) {
        std::vector<double> s(6, 0.0);
        for (std::size_t i = 0; i < r; ++i) s[i] = 2.0 - 0.3 * double(i);
        const auto t = make_synthetic_teacher<double>(rng, 6, 10, 6, TeacherKind::mlp_gelu, s);
        CHECK(numerical_rank(std::get<TeacherMlp<double>>(t).D) == r);
    }
}

TEST_CASE("k equal to the expert count fires every expert") {
    Rng rng(13);
    LayerSpec spec{LayerKind::mxd, 4, 6, 3, 5, 0, 5};
    auto l = std::get<Mxd<double>>(make_student<double>(spec, rng));
    l.G.fill(0);
    l.b_gate = {0.5, 1, 1.5, 2, 2.5};
    ActivationDataset<double> d{gaussian_inputs<double>(rng, 40, 4), Matrix<double>(40, 3), "t"};
    const auto log = log_feature_frequency(Layer<double>(l), d);
    for (std::size_t u = 0; u < 5; ++u) CHECK(log.frequency(u) == 1.0);
    CHECK(log.shared().size() == 5);
    CHECK(log.dead() == 0);
}

TEST_CASE("a realizable identity target is learned by a dense transcoder") {
    // y = x is exactly representable as relu(x) - relu(-x) with H = 2I.
    Rng rng(14);
    const auto X = gaussian_inputs<double>(rng, 4000, 8);
    ActivationDataset<double> d{X, X, "identity"};
    DistillConfig cfg;
    cfg.student = LayerSpec{LayerKind::tc, 8, 16, 8, 0, 0, 16};
    cfg.options.enc_act = Activation::relu;
    cfg.steps = 5000;
    cfg.lr = 1e-3;
    cfg.eval_every = 5000;
    cfg.seed = 3;
    const auto r = distill(d, cfg);
    CHECK(r.history.back().nmse < 1e-3);
}
