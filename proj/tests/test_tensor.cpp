#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lexforge/ops.hpp"
#include "support/gradcheck.hpp"

using namespace lexforge;
using lexforge::testing::random_tensor;

TEST_CASE("every op passes float64 finite-difference checks", "[tensor][gradcheck]") {
    std::mt19937_64 rng(2024);
    lexforge::testing::check_catalog(rng, 20, 1e-3, [](const std::string& name, const std::string& label, const auto& r) {
        INFO(name << " " << label);
        REQUIRE(r.checked > 0);
        REQUIRE(r.max_rel_error < 1e-6);
    });
}

TEST_CASE("Ridders differentiation is accurate on smooth functions", "[tensor][gradcheck]") {
    using lexforge::testing::ridders_derivative;
    const long double x = 0.7L;
    CHECK(std::abs(ridders_derivative<long double>([&](long double h) { return std::sin(x + h); }, 1e-2L) - std::cos(x)) < 1e-14L);
    CHECK(std::abs(ridders_derivative<long double>([&](long double h) { return std::exp(3 * (x + h)); }, 1e-2L) -
                   3 * std::exp(3 * x)) < 1e-12L);
}

TEST_CASE("float32 matmul backward agrees with finite differences", "[tensor][gradcheck]") {
    std::mt19937_64 rng(7);
    lexforge::testing::GradCase<float> c;
    c.inputs = {random_tensor<float>(rng, {4, 5}), random_tensor<float>(rng, {5, 3})};
    c.fn = [](Tape<float>& t, std::vector<Tensor<float>>& in) { return ops::matmul(t, in[0], in[1]); };
    lexforge::testing::GradCase<double> ref;
    for (const auto& in : c.inputs)
        ref.inputs.emplace_back(in.shape(), std::vector<double>(in.data().begin(), in.data().end()), true);
    ref.fn = [](Tape<double>& t, std::vector<Tensor<double>>& in) { return ops::matmul(t, in[0], in[1]); };
    CHECK(lexforge::testing::gradcheck(c, ref, rng, 1e-2).max_rel_error < 1e-5);
}

TEST_CASE("matmul basics", "[tensor]") {
    Tape<double> tape;
    std::mt19937_64 rng(1);
    const auto x = random_tensor<double>(rng, {3, 4}, false);
    Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const auto y = ops::matmul(tape, eye, x);
    CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>(x.data().begin(), x.data().end()));

    auto a = random_tensor<double>(rng, {2, 3});
    auto b = random_tensor<double>(rng, {3, 4});
    auto loss = ops::sum(tape, ops::matmul(tape, a, b));
    tape.backward(loss);
    // d/dA sum(AB) = 1 B^T, d/dB = A^T 1
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double row = 0;
            for (std::size_t n = 0; n < 4; ++n) row += b.data()[j * 4 + n];
            CHECK(a.grad()[i * 3 + j] == Catch::Approx(row).epsilon(1e-12));
        }
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t n = 0; n < 4; ++n)
            CHECK(b.grad()[j * 4 + n] == Catch::Approx(a.data()[j] + a.data()[3 + j]).epsilon(1e-12));

    CHECK_THROWS_WITH(ops::matmul(tape, a, a), Catch::Matchers::ContainsSubstring("[2,3]"));
    CHECK_THROWS_AS(ops::matmul(tape, a, a), ShapeError);
}

TEST_CASE("layer_norm edge cases", "[tensor]") {
    Tape<double> tape(false);
    const auto ones = Tensor<double>::full({4}, 1.0);
    const auto zeros = Tensor<double>::zeros({4});

    const auto flat = ops::layer_norm(tape, Tensor<double>::full({1, 4}, 3.5), ones, zeros);
    for (const double v : flat.data()) CHECK(v == 0.0);

    Tensor<double> standard({1, 4}, {-1.0, -1.0, 1.0, 1.0}); // mean 0, variance 1
    const auto same = ops::layer_norm(tape, standard, ones, zeros);
    for (std::size_t i = 0; i < 4; ++i) CHECK(same.data()[i] == Catch::Approx(standard.data()[i]).margin(1e-5));

    std::mt19937_64 rng(3);
    const auto row = random_tensor<double>(rng, {1, 64}, false, 5.0);
    const auto y = ops::layer_norm(tape, row, Tensor<double>::full({64}, 1.0), Tensor<double>::zeros({64}));
    double mean = 0, var = 0;
    for (const double v : y.data()) mean += v / 64;
    for (const double v : y.data()) var += (v - mean) * (v - mean) / 64;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("softmax and gelu", "[tensor]") {
    Tape<float> tape(false);
    const auto u = ops::softmax(tape, Tensor<float>::zeros({2, 5}));
    for (const float v : u.data()) CHECK(v == Catch::Approx(0.2f));

    std::mt19937_64 rng(4);
    const auto x = random_tensor<float>(rng, {16, 33}, false, 10.0);
    const auto p = ops::softmax(tape, x);
    for (std::size_t r = 0; r < 16; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < 33; ++i) {
            CHECK(p.data()[r * 33 + i] >= 0.0f);
            s += p.data()[r * 33 + i];
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    const auto cs = ops::causal_softmax(tape, random_tensor<float>(rng, {3, 3}, false));
    CHECK(cs.data()[0] == 1.0f);
    CHECK(cs.data()[1] == 0.0f);
    CHECK(cs.data()[2] == 0.0f);
    CHECK(cs.data()[5] == 0.0f);

    const auto g = ops::gelu(tape, Tensor<float>({3}, {0.0f, 1.0f, -1.0f}));
    CHECK(g.data()[0] == 0.0f);
    CHECK(g.data()[1] == Catch::Approx(0.841192f).epsilon(1e-5));
    CHECK(g.data()[2] == Catch::Approx(-0.158808f).epsilon(1e-5));
}

TEST_CASE("cross_entropy values", "[tensor]") {
    Tape<double> tape(false);
    const std::size_t v = 11;
    const std::vector<std::int32_t> t3{0, 4, 10};
    CHECK(ops::cross_entropy(tape, Tensor<double>::zeros({3, v}), t3).item() == Catch::Approx(std::log(11.0)).epsilon(1e-14));

    Tape<float> ftape(false);
    std::vector<float> peaked(3 * 7, 0.0f);
    const std::vector<std::int32_t> t7{1, 2, 6};
    for (std::size_t r = 0; r < 3; ++r) peaked[r * 7 + static_cast<std::size_t>(t7[r])] = 30.0f;
    CHECK(std::abs(ops::cross_entropy(ftape, Tensor<float>({3, 7}, peaked), t7).item()) < 1e-9);

    // B=2, T=3, V=7 against a float64 log-sum-exp written out directly.
    std::mt19937_64 rng(9);
    const auto logits = random_tensor<float>(rng, {2, 3, 7}, false, 3.0);
    const std::vector<std::int32_t> targets{3, -1, 0, 6, 2, 5};
    double expected = 0;
    int count = 0;
    for (std::size_t r = 0; r < 6; ++r) {
        if (targets[r] < 0) continue;
        double z = 0;
        for (std::size_t i = 0; i < 7; ++i) z += std::exp(static_cast<double>(logits.data()[r * 7 + i]));
        expected += std::log(z) - logits.data()[r * 7 + static_cast<std::size_t>(targets[r])];
        ++count;
    }
    expected /= count;
    CHECK(std::abs(ops::cross_entropy(ftape, logits, targets).item() - expected) < 1e-6);

    const std::vector<std::int32_t> too_big{0, 7, 1, 1, 1, 1};
    CHECK_THROWS_AS(ops::cross_entropy(ftape, logits, too_big), InputError);
    const std::vector<std::int32_t> ignored(6, -1);
    CHECK_THROWS_AS(ops::cross_entropy(ftape, logits, ignored), InputError);
}

TEST_CASE("embedding rejects out-of-range ids", "[tensor]") {
    Tape<float> tape(false);
    const auto table = Tensor<float>::zeros({4, 2});
    const std::vector<std::int32_t> ids{0, 4};
    CHECK_THROWS_AS(ops::embedding(tape, table, ids, Shape{2}), InputError);
}

TEST_CASE("rotary properties", "[tensor]") {
    Tape<double> tape(false);
    std::mt19937_64 rng(12);
    const auto x = random_tensor<double>(rng, {1, 5, 2, 8}, false);

    const auto first = ops::rotary(tape, x, 8);
    for (std::size_t i = 0; i < 16; ++i) CHECK(first.data()[i] == x.data()[i]); // position 0
    const auto none = ops::rotary(tape, x, 0, 10000.0, 17);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(none.data()[i] == x.data()[i]);

    const auto y = ops::rotary(tape, x, 6, 10000.0, 3);
    for (std::size_t row = 0; row < 10; ++row) {
        for (std::size_t p = 0; p < 3; ++p) {
            const double a = x.data()[row * 8 + 2 * p], b = x.data()[row * 8 + 2 * p + 1];
            const double c = y.data()[row * 8 + 2 * p], d = y.data()[row * 8 + 2 * p + 1];
            CHECK(std::abs(std::hypot(a, b) - std::hypot(c, d)) < 1e-5);
        }
        for (std::size_t j = 6; j < 8; ++j) CHECK(y.data()[row * 8 + j] == x.data()[row * 8 + j]);
    }
    CHECK_THROWS_AS(ops::rotary(tape, x, 3), ConfigError);
    CHECK_THROWS_AS(ops::rotary(tape, x, 10), ConfigError);
}

TEST_CASE("fan-out accumulates gradients", "[tensor]") {
    std::mt19937_64 rng(13);
    auto x = random_tensor<double>(rng, {3, 2});
    Tape<double> tape;
    auto loss = ops::sum(tape, ops::add(tape, ops::mul(tape, x, x), ops::scale(tape, x, 3.0)));
    tape.backward(loss);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == Catch::Approx(2 * x.data()[i] + 3.0).epsilon(1e-14));
}

TEST_CASE("non-finite values raise diagnostics", "[tensor]") {
    Tape<float> tape(false);
    const auto x = Tensor<float>::full({2}, 1.0f);
    CHECK_THROWS_AS(ops::scale(tape, x, std::numeric_limits<float>::infinity()), NumericError);
}

TEST_CASE("replay is bit-identical", "[tensor]") {
    auto run = [] {
        std::mt19937_64 rng(99);
        auto a = random_tensor<float>(rng, {2, 6, 8});
        auto w = random_tensor<float>(rng, {8, 8});
        Tape<float> tape;
        auto h = ops::gelu(tape, ops::matmul(tape, a, w));
        auto loss = ops::sum(tape, ops::softmax(tape, h));
        tape.backward(loss);
        return std::vector<float>(w.grad().begin(), w.grad().end());
    };
    CHECK(run() == run());
}
