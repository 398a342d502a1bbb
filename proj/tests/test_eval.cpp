#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mxd/eval.hpp"
#include "test_util.hpp"

using namespace mxd;

namespace {

ToyLmConfig small_config() {
    ToyLmConfig c;
    c.vocab = 16;
    c.d = 8;
    c.heads = 2;
    c.ctx = 12;
    c.mlp_hidden = 16;
    return c;
}

ToyLm<double> random_lm(std::uint64_t seed) {
    Rng rng(seed);
    auto lm = make_toy_lm<double>(small_config(), rng);
    lm.visit_params([&](std::string_view name, std::size_t, std::size_t, std::span<double> d) {
        const bool gain = name.find("_g") != std::string_view::npos;
        for (double& v : d) v = gain ? 1.0 + 0.3 * rng.normal() : 0.5 * rng.normal();
    });
    return lm;
}

std::vector<std::uint8_t> random_text(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::uint8_t> t(n);
    for (auto& b : t) b = static_cast<std::uint8_t>(rng.index(vocab));
    return t;
}

Layer<double> random_tc(Rng& rng, std::size_t d, std::size_t H, std::size_t k) {
    auto tc = make_student<double>(LayerSpec{LayerKind::tc, d, H, d, 0, 0, k}, rng);
    std::visit([&](auto& l) { testing::randomize(l, rng); }, tc);
    return tc;
}

} // namespace

TEST_CASE("eval_nmse closed forms") {
    Rng rng(1);
    const auto teacher = make_synthetic_teacher<double>(rng, 6, 12, 5, TeacherKind::mlp_gelu);
    const auto data = collect_activations(teacher, 0, gaussian_inputs<double>(rng, 200, 6));
    CHECK(eval_nmse(teacher, data) == 0.0);

    LayerSpec spec{LayerKind::mxd, 6, 12, 5, 8, 0, 2};
    auto student = make_student<double>(spec, rng, {}, &data.Y);  // D = 0 so it predicts b_dec = mean
    const auto mean = column_means(data.Y);
    double expect = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
        double num = 0, den = 0;
        for (std::size_t o = 0; o < 5; ++o) {
            num += (data.Y(r, o) - mean[o]) * (data.Y(r, o) - mean[o]);
            den += data.Y(r, o) * data.Y(r, o);
        }
        expect += num / std::sqrt(den);
    }
    CHECK(eval_nmse(student, data) == Catch::Approx(expect / 200).epsilon(1e-12));
    ActivationDataset<double> empty{Matrix<double>(0, 6), Matrix<double>(0, 5), ""};
    CHECK_THROWS_AS(eval_nmse(student, empty), DomainError);
}

TEST_CASE("eval_nmse does not depend on the worker count") {
    Rng rng(2);
    const auto teacher = make_synthetic_teacher<double>(rng, 6, 12, 5, TeacherKind::mlp_gelu);
    const auto data = collect_activations(teacher, 0, gaussian_inputs<double>(rng, 300, 6));
    const Layer<double> l = testing::random_mxd(rng, 6, 8, 12, 5, 3);
    const double one = eval_nmse(l, data);
    set_threads(3);
    const double three = eval_nmse(l, data);
    set_threads(1);
    CHECK(one == three);
}

TEST_CASE("spliced cross-entropy") {
    auto lm = random_lm(3);
    Rng rng(4);
    const auto text = random_text(rng, 400, 16);
    SECTION("identity splice has zero delta") {
        const auto r = eval_ce_delta(lm, SpliceHook<double>{1, Layer<double>(lm.blocks[1].mlp)}, text);
        CHECK(r.delta() == 0.0);
        CHECK_FALSE(lm.hook.has_value());
    }
    SECTION("mean-only replacement hurts") {
        auto zero = make_student<double>(LayerSpec{LayerKind::tc, 8, 16, 8, 0, 0, 2}, rng);
        const auto r = eval_ce_delta(lm, SpliceHook<double>{0, zero}, text);
        CHECK(r.delta() > 0.0);
    }
    SECTION("untrained host is rejected") {
        auto fresh = make_toy_lm<double>(small_config(), rng);
        CHECK_THROWS_WITH(eval_ce_delta(fresh, SpliceHook<double>{0, Layer<double>(fresh.blocks[0].mlp)}, text),
                          Catch::Matchers::ContainsSubstring("untrained"));
    }
}

TEST_CASE("n-gram faithfulness") {
    auto lm = random_lm(5);
    Rng rng(6);
    const auto text = random_text(rng, 500, 16);
    const auto prompts = sample_prompts(text, 40, 4, rng);

    const auto ident = eval_ngram_faithfulness(lm, SpliceHook<double>{0, Layer<double>(lm.blocks[0].mlp)}, prompts, 8);
    REQUIRE(ident.size() == 8);
    for (double f : ident) CHECK(f == 1.0);

    const auto tc = random_tc(rng, 8, 32, 4);
    const auto fr = eval_ngram_faithfulness(lm, SpliceHook<double>{0, tc}, prompts, 8);
    for (std::size_t n = 0; n < fr.size(); ++n) {
        CHECK(fr[n] >= 0.0);
        CHECK(fr[n] <= 1.0);
        if (n) CHECK(fr[n] <= fr[n - 1]);
    }
    CHECK(fr.back() < 1.0);

    // Oracle: count prefix matches prompt by prompt.
    std::vector<std::vector<std::uint8_t>> base;
    for (const auto& p : prompts) base.push_back(lm_generate(lm, p, 8));
    install_hook(lm, SpliceHook<double>{0, tc});
    std::size_t full = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) full += lm_generate(lm, prompts[i], 8) == base[i];
    remove_hook(lm);
    CHECK(fr.back() == Catch::Approx(static_cast<double>(full) / 40.0));

    CHECK_THROWS_AS(eval_ngram_faithfulness(lm, SpliceHook<double>{0, tc}, {}, 8), DomainError);
    CHECK_THROWS_AS(eval_ngram_faithfulness(lm, SpliceHook<double>{0, tc}, prompts, 0), DomainError);

    std::ostringstream csv;
    write_faithfulness_csv(csv, std::vector<double>(16, 0.5), LayerKind::mxd, 32);
    std::size_t lines = 0;
    for (char c : csv.str()) lines += c == '\n';
    CHECK(lines == 17);
    CHECK(csv.str().rfind("n,fraction,layer_kind,K\n1,0.5,mxd,32\n", 0) == 0);
}

TEST_CASE("normalized expert rank") {
    Rng rng(7);
    SECTION("random dense layer is full rank") {
        const auto l = testing::random_mxd(rng, 6, 20, 10, 7, 3);
        const auto r = eval_normalized_rank(l, 20, rng);
        CHECK(r.mean == 1.0);
        CHECK(r.experts.size() == 20);
    }
    SECTION("rank-deficient decoder") {
        auto l = testing::random_mxd(rng, 6, 20, 10, 7, 3);
        l.D = testing::random_rank_matrix(rng, 10, 7, 3);
        const auto r = eval_normalized_rank(l, 12, rng);
        REQUIRE(r.ratios.size() == 12);
        for (double v : r.ratios) CHECK(v == Catch::Approx(3.0 / 7.0));
        auto sorted = r.experts;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    }
    SECTION("errors") {
        const auto l = testing::random_mxd(rng, 6, 20, 10, 7, 3);
        CHECK_THROWS_AS(eval_normalized_rank(l, 21, rng), DomainError);
        CHECK_THROWS_AS(eval_normalized_rank(random_tc(rng, 6, 10, 2), 5, rng), UnsupportedError);
    }
}

TEST_CASE("steering") {
    auto lm = random_lm(8);
    Rng rng(9);
    const std::vector<std::uint8_t> prompt{3, 1, 4, 1};
    const Layer<double> m = testing::random_mxd(rng, 8, 10, 16, 8, 3);
    const auto tc = random_tc(rng, 8, 24, 3);

    CHECK(steer(lm, m, 1, 2, 0.0, prompt, 6) == lm_generate(lm, prompt, 6));
    CHECK(steer(lm, tc, 0, 5, 0.0, prompt, 6) == lm_generate(lm, prompt, 6));
    CHECK_FALSE(lm.hook.has_value());
    CHECK(steering_kl(lm, m, 1, 2, 0.0, prompt) == 0.0);
    CHECK_THROWS_AS(steer(lm, tc, 0, 24, 1.0, prompt, 6), DomainError);
    CHECK_FALSE(lm.hook.has_value());

    // Oracle: TC steering adds λ·d_n to the MLP output, same as shifting b_dec.
    auto shifted = lm;
    const auto& d5 = std::get<SparseMlp<double>>(tc).D;
    for (std::size_t o = 0; o < 8; ++o) shifted.blocks[0].mlp.b_dec[o] += 10.0 * d5(5, o);
    const auto expect = detail::softmax<double>(lm_next_logits(shifted, prompt));
    const auto base = detail::softmax<double>(lm_next_logits(lm, prompt));
    double kl = 0;
    for (std::size_t v = 0; v < expect.size(); ++v) kl += expect[v] * std::log(expect[v] / base[v]);
    CHECK(steering_kl(lm, tc, 0, 5, 10.0, prompt) == Catch::Approx(kl).epsilon(1e-9));
}

TEST_CASE("f1 score") {
    const std::vector<int> truth{1, 1, 0, 0, 1};
    CHECK(f1_score(truth, std::vector<int>{1, 0, 1, 0, 1}) == Catch::Approx(2.0 * 2 / (2 * 2 + 1 + 1)));
    CHECK(f1_score(truth, std::vector<int>{0, 0, 0, 0, 0}) == 0.0);
    CHECK(f1_score(truth, truth) == 1.0);
}

TEST_CASE("probing finds a planted unit") {
    Rng rng(10);
    ProbeTask task;
    const std::size_t n = 600, units = 150;
    task.activations = Matrix<double>(n, units);
    for (std::size_t r = 0; r < n; ++r) {
        task.labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
        for (std::size_t u = 0; u < units; ++u) task.activations(r, u) = rng.normal();
        task.activations(r, 7) = task.labels[r] + 0.1 * rng.normal();
    }
    const auto res = probe_select_and_fit(task);
    REQUIRE(res.ranking.size() == 100);
    CHECK(res.ranking[0] == 7);
    CHECK(res.f1[0] > 0.95);
    CHECK(res.best_unit == 7);

    task.selection = 1000;
    CHECK(probe_select_and_fit(task).ranking.size() == units);
}

TEST_CASE("probing on shuffled labels stays near the prior") {
    Rng rng(11);
    ProbeTask task;
    const std::size_t n = 600, units = 100;
    task.activations = Matrix<double>(n, units);
    for (std::size_t r = 0; r < n; ++r) {
        task.labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
        for (std::size_t u = 0; u < units; ++u) task.activations(r, u) = rng.normal();
    }
    const auto res = probe_select_and_fit(task);
    CHECK(std::abs(res.best_f1 - res.prior_f1) <= 0.1);
}

TEST_CASE("probing errors and pooling") {
    ProbeTask task;
    task.activations = Matrix<double>(30, 3);
    task.labels.assign(30, 0);
    for (std::size_t i = 0; i < 5; ++i) task.labels[i] = 1;
    CHECK_THROWS_AS(probe_select_and_fit(task), DomainError);

    // Pooling: two rows per sample; the mean of each pair carries the label.
    Rng rng(12);
    ProbeTask pooled;
    pooled.activations = Matrix<double>(200, 4);
    for (std::size_t s = 0; s < 100; ++s) {
        const int label = s % 2;
        const double noise = rng.normal();
        for (std::size_t j = 0; j < 2; ++j) {
            const std::size_t r = 2 * s + j;
            pooled.labels.push_back(label);
            pooled.groups.push_back(s);
            for (std::size_t u = 0; u < 4; ++u) pooled.activations(r, u) = rng.normal();
            pooled.activations(r, 2) = j == 0 ? label + noise : label - noise;
        }
    }
    ProbeConfig cfg;
    cfg.pool = true;
    const auto res = probe_select_and_fit(pooled, cfg);
    CHECK(res.ranking[0] == 2);
    CHECK(res.f1[0] == 1.0);
}
