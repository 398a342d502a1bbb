#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mxd/linalg.hpp"
#include "test_util.hpp"

using namespace mxd;
using mxd::testing::random_matrix;
using mxd::testing::random_rank_matrix;
using mxd::testing::random_vector;

TEST_CASE("hadamard basics", "[linalg]") {
    const Vector<double> a{1, 2, 3}, b{4, 5, 6};
    CHECK(hadamard(a, b) == Vector<double>{4, 10, 18});
    CHECK(hadamard(a, Vector<double>(3, 1.0)) == a);

    try {
        hadamard(a, Vector<double>{1, 2});
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(e.lhs() == 3);
        CHECK(e.rhs() == 2);
    }
}

TEST_CASE("hadamard matches loop oracle and algebraic laws", "[linalg][property]") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.index(40);
        const auto a = random_vector(rng, n), b = random_vector(rng, n), c = random_vector(rng, n);
        const auto ab = hadamard(a, b);
        for (std::size_t i = 0; i < n; ++i) REQUIRE(ab[i] == a[i] * b[i]);
        REQUIRE(hadamard(b, a) == ab);

        Vector<double> bc(n);
        for (std::size_t i = 0; i < n; ++i) bc[i] = b[i] + c[i];
        const auto lhs = hadamard(a, bc);
        const auto ac = hadamard(a, c);
        for (std::size_t i = 0; i < n; ++i) {
            const double rhs = ab[i] + ac[i];
            REQUIRE(std::abs(lhs[i] - rhs) <= 1e-12 * std::max({std::abs(rhs), std::abs(ab[i]) + std::abs(ac[i]), 1e-300}));
        }
    }
}

TEST_CASE("topk examples", "[linalg][topk]") {
    const Vector<double> v{3, -1, 5, 5, 0};
    const auto s = topk(v, 2);
    CHECK(s.indices == std::vector<std::size_t>{2, 3});
    CHECK(s.values == std::vector<double>{5, 5});
    CHECK(s.k() == 2);
    CHECK(s.dim == 5);

    const auto all = topk(v, v.size(), false);
    CHECK(all.densify() == v);

    // Ties at zero after ReLU go to the lowest indices.
    const auto r = topk(Vector<double>{-2, -1, 4, -3}, 2, true);
    CHECK(r.indices == std::vector<std::size_t>{0, 2});
    CHECK(r.values == std::vector<double>{0, 4});

    CHECK_THROWS_AS(topk(v, 0), DomainError);
    CHECK_THROWS_AS(topk(v, 6), DomainError);
}

TEST_CASE("topk matches full-sort oracle", "[linalg][topk][property]") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.index(64);
        const std::size_t k = 1 + rng.index(n);
        const bool relu = trial % 2 == 0;
        Vector<double> v = random_vector(rng, n);
        // Inject duplicates so the tie rule is exercised.
        if (n > 3) v[n - 1] = v[0];

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        auto val = [&](std::size_t i) { return relu ? std::max(v[i], 0.0) : v[i]; };
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return val(a) > val(b); });
        Vector<double> expected(n, 0.0);
        for (std::size_t j = 0; j < k; ++j) expected[order[j]] = val(order[j]);

        const auto s = topk(v, k, relu);
        REQUIRE(s.k() == k);
        REQUIRE(std::is_sorted(s.indices.begin(), s.indices.end()));
        REQUIRE(std::adjacent_find(s.indices.begin(), s.indices.end()) == s.indices.end());
        const auto dense = s.densify();
        REQUIRE(dense == expected);
        REQUIRE(static_cast<std::size_t>(std::count_if(dense.begin(), dense.end(), [](double x) { return x != 0; })) <= k);
    }
}

namespace {

// Φ(x) by composite Simpson quadrature of the standard normal density.
long double normal_cdf_quadrature(long double x) {
    const int steps = 20000;
    const long double h = x / steps;
    auto pdf = [](long double t) { return std::exp(-0.5L * t * t) / std::sqrt(2.0L * 3.14159265358979323846L); };
    long double acc = pdf(0) + pdf(x);
    for (int i = 1; i < steps; ++i) acc += (i % 2 ? 4.0L : 2.0L) * pdf(i * h);
    return 0.5L + acc * h / 3.0L;
}

} // namespace

TEST_CASE("activations", "[linalg][activation]") {
    CHECK(activation(Activation::relu, Vector<double>{-1, 0, 2}) == Vector<double>{0, 0, 2});
    CHECK(activate(Activation::gelu, 0.0) == 0.0);
    CHECK(activate(Activation::swish, 0.0) == 0.0);
    CHECK(activate(Activation::identity, -3.5) == -3.5);

    const double oracle = static_cast<double>(normal_cdf_quadrature(1.0L));
    CHECK(activate(Activation::gelu, 1.0) == Catch::Approx(oracle).epsilon(1e-13));
    CHECK(activate(Activation::gelu, 1.0) == Catch::Approx(0.8413447460685429).epsilon(1e-14));
    CHECK(activate(Activation::gelu_tanh, 1.0) == Catch::Approx(oracle).epsilon(1e-3));

    CHECK_THROWS_AS(parse_activation("softplus"), DomainError);
    CHECK(parse_activation("swish") == Activation::swish);
}

TEST_CASE("activation derivatives match central differences", "[linalg][activation]") {
    for (auto kind : {Activation::relu, Activation::gelu, Activation::gelu_tanh, Activation::swish, Activation::identity}) {
        for (double x : {-2.3, -0.7, 0.4, 1.9}) {
            const double h = 1e-6;
            const double fd = (activate(kind, x + h) - activate(kind, x - h)) / (2 * h);
            CHECK(activate_grad(kind, x) == Catch::Approx(fd).epsilon(1e-6).margin(1e-9));
        }
    }
}

TEST_CASE("numerical rank examples", "[linalg][rank]") {
    CHECK(numerical_rank(Matrix<double>::identity(5)) == 5);

    Rng rng(3);
    const auto u = random_vector(rng, 7), v = random_vector(rng, 4);
    Matrix<double> outer(7, 4);
    add_outer<double>(outer, u, v);
    CHECK(numerical_rank(outer) == 1);
    CHECK(numerical_rank(Matrix<double>(3, 3)) == 0);

    Matrix<double> bad = Matrix<double>::identity(3);
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(numerical_rank(bad), DomainError);
}

TEST_CASE("singular values agree with an Eigen SVD", "[linalg][rank]") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t r = 1 + rng.index(40), c = 1 + rng.index(40);
        const auto m = random_matrix(rng, r, c);
        Eigen::MatrixXd e(r, c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) e(i, j) = m(i, j);
        const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
        const auto sv = singular_values(m);
        REQUIRE(sv.size() == static_cast<std::size_t>(ref.size()));
        for (std::size_t i = 0; i < sv.size(); ++i) REQUIRE(sv[i] == Catch::Approx(ref(i)).epsilon(1e-10).margin(1e-12));
    }
}

TEST_CASE("rank preserved under nonzero column scaling", "[linalg][rank][property]") {
    Rng rng(17);
    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{8, 5}, {20, 12}, {64, 64}};
    for (const auto& [r, c] : shapes) {
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t target = 1 + rng.index(std::min(r, c));
            const auto D = trial % 3 == 0 ? random_matrix(rng, r, c) : random_rank_matrix(rng, r, c, target);
            Matrix<double> scaled = D;
            for (std::size_t j = 0; j < c; ++j) {
                double s = rng.uniform(1e-3, 2.0) * (rng.uniform() < 0.5 ? -1 : 1);
                for (std::size_t i = 0; i < r; ++i) scaled(i, j) *= s;
            }
            REQUIRE(numerical_rank(scaled) == numerical_rank(D));
        }
    }
}

TEST_CASE("khatri_rao examples", "[linalg][khatri_rao]") {
    const Matrix<double> c(2, 1, std::vector<double>{1, 2});
    const Matrix<double> d(2, 1, std::vector<double>{3, 4});
    const auto kr = khatri_rao(c, d);
    CHECK(kr == Matrix<double>(4, 1, std::vector<double>{3, 4, 6, 8}));

    Rng rng(2);
    const auto D = random_matrix(rng, 3, 4);
    const auto stacked = khatri_rao(Matrix<double>(5, 4, 1.0), D);
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t h = 0; h < 3; ++h)
            for (std::size_t o = 0; o < 4; ++o) CHECK(stacked(n * 3 + h, o) == D(h, o));

    CHECK_THROWS_AS(khatri_rao(Matrix<double>(2, 3), Matrix<double>(2, 2)), DimensionError);
}

TEST_CASE("init_matrix", "[linalg][init]") {
    Rng rng(1);
    CHECK(init_matrix<double>(rng, 3, 4, InitScheme::zeros) == Matrix<double>(3, 4));

    Rng a(99), b(99);
    CHECK(init_matrix<float>(a, 6, 5, InitScheme::kaiming_uniform) == init_matrix<float>(b, 6, 5, InitScheme::kaiming_uniform));

    const std::size_t fan_in = 16;
    Rng big(4);
    const auto m = init_matrix<double>(big, fan_in, 100000 / fan_in + 1, InitScheme::kaiming_uniform);
    const double bound = 1.0 / std::sqrt(double(fan_in));
    const auto [lo, hi] = std::minmax_element(m.flat().begin(), m.flat().end());
    CHECK(*lo >= -bound);
    CHECK(*hi <= bound);
    CHECK(*lo < -0.999 * bound);  // the draws fill the interval
    CHECK(*hi > 0.999 * bound);

    const Matrix<double> data(2, 3, std::vector<double>{1, 2, 3, 3, 6, 9});
    const auto bias = init_matrix<double>(rng, 1, 3, InitScheme::empirical_mean_bias, &data);
    CHECK(bias == Matrix<double>(1, 3, std::vector<double>{2, 4, 6}));
    CHECK_THROWS_AS(init_matrix<double>(rng, 1, 3, InitScheme::empirical_mean_bias), DomainError);
    CHECK_THROWS_AS(parse_init_scheme("xavier"), DomainError);
    CHECK_THROWS_AS(init_matrix<double>(rng, 0, 3, InitScheme::zeros), DomainError);
}

TEST_CASE("rng determinism and ranges", "[linalg][rng]") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(1);
    for (int i = 0; i < 10000; ++i) {
        const auto v = c.uniform_int(-3, 5);
        REQUIRE(v >= -3);
        REQUIRE(v <= 5);
        const double u = c.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    CHECK(Rng(5).fork(1).next_u64() != Rng(5).fork(2).next_u64());
}
