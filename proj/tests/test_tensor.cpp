#include "support.hpp"

#include <sstream>

#include "tsrep/errors.hpp"
#include "tsrep/tensor.hpp"
#include "tsrep/tensor_io.hpp"

using namespace tsrep;
using tsrep::test::random_vector;

namespace {

Tensor randt(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Weighted sum keeps the scalar near unit scale so float round-off does not
// swamp the finite-difference slope.
TensorFn weighted(std::function<Tensor(const Tensor&)> op, Shape out_shape, std::uint64_t seed) {
    auto rng = make_rng(seed, 77);
    const Tensor w = Tensor::uniform(out_shape, rng, -1.0f, 1.0f);
    const float scale = 1.0f / static_cast<float>(shape_numel(out_shape));
    return [op, w, scale](const Tensor& x) { return ops::sum(op(x) * w) * scale; };
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("constructors and invariants") {
    auto t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_FALSE(t.has_grad());
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
    CHECK(Tensor::scalar(3.5f).item() == 3.5f);
    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK(shape_numel({}) == 1);
    CHECK(shape_numel({4, 0, 2}) == 0);
}

TEST_CASE("matmul with identity returns the operand") {
    auto rng = make_rng(1);
    auto a = randt({3, 3}, rng);
    auto eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto r = ops::matmul(eye, a);
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>(a.data().begin(), a.data().end()));
}

TEST_CASE("matmul shape errors") {
    CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
    CHECK_THROWS_AS(ops::matmul(Tensor::zeros({3}), Tensor::zeros({3, 1})), ShapeError);
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax rows sum to one") {
    auto rng = make_rng(2);
    auto x = randt({5, 7}, rng, -10.0f, 10.0f);
    auto s = ops::softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 7; ++c) sum += s.data()[r * 7 + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("layer norm of [1,2,3]") {
    auto y = ops::layer_norm(Tensor::from_data({1, 3}, {1, 2, 3}));
    double m = (y[0] + y[1] + y[2]) / 3.0;
    double v = 0.0;
    for (int i = 0; i < 3; ++i) v += (y[i] - m) * (y[i] - m);
    v /= 3.0;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-4);
}

TEST_CASE("domain errors") {
    CHECK_THROWS_AS(ops::log(Tensor::from_data({2}, {1.0f, -1.0f})), DomainError);
    CHECK_THROWS_AS(ops::log(Tensor::from_data({1}, {0.0f})), DomainError);
    CHECK_THROWS_AS(ops::sqrt(Tensor::from_data({1}, {-0.5f})), DomainError);
    CHECK_THROWS_AS(ops::div(Tensor::from_data({2}, {1, 2}), Tensor::from_data({2}, {1, 0})), DomainError);
    CHECK_NOTHROW(ops::sqrt(Tensor::from_data({1}, {0.0f})));
}

TEST_CASE("check_finite surfaces NaN") {
    auto t = Tensor::from_data({2}, {1.0f, std::nanf("")});
    CHECK_THROWS_AS(check_finite(t, "fixture"), NumericError);
    CHECK_FALSE(all_finite(t.data()));
}

TEST_CASE("backward of sum gives ones") {
    auto x = Tensor::from_data({4}, {1, -2, 3, 0.5f}, true);
    ops::sum(x).backward();
    CHECK(x.grad() == std::vector<float>{1, 1, 1, 1});
}

TEST_CASE("backward of sum of squares at [1,2]") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    ops::sum(x * x).backward();
    CHECK(x.grad() == std::vector<float>{2, 4});
}

TEST_CASE("repeated backward accumulates") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    ops::sum(x * x).backward();
    ops::sum(x * x).backward();
    CHECK(x.grad() == std::vector<float>{4, 8});
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward on a non-scalar is a contract error") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS((x * x).backward(), ContractError);
}

TEST_CASE("no-grad guard suppresses recording") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        auto y = x * x;
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK((x * x).requires_grad());
}

TEST_CASE("tape is topologically ordered") {
    auto a = Tensor::from_data({2}, {1, 2}, true);
    auto b = Tensor::from_data({2}, {3, 4}, true);
    auto loss = ops::sum(ops::exp(a * b) + a);
    auto tape = Tape::record(loss);
    const auto& nodes = tape.nodes();
    REQUIRE_FALSE(nodes.empty());
    CHECK(nodes.back() == loss.node().get());
    for (std::size_t i = 0; i < nodes.size(); ++i)
        for (const auto& in : nodes[i]->inputs) {
            auto it = std::find(nodes.begin(), nodes.end(), in.get());
            if (it != nodes.end()) CHECK(static_cast<std::size_t>(it - nodes.begin()) < i);
        }
    tape.backward();
    CHECK(a.has_grad());
    CHECK(b.has_grad());
}

TEST_CASE("grad_check examples") {
    auto rng = make_rng(3);
    // float32 output rounding alone reaches ~1e-4 once |f| exceeds 1.
    auto x = Tensor::uniform({8}, rng, -0.5f, 0.5f);
    auto sq = [](const Tensor& v) { return ops::sum(v * v); };
    CHECK(grad_check(sq, x, 1e-3f) < 1e-4);
    CHECK(grad_check(sq, Tensor::randn({8}, rng), 1e-3f) < 1e-3);
    CHECK(grad_check([](const Tensor&) { return Tensor::scalar(2.0f); }, x, 1e-3f) == 0.0);

    auto logits = Tensor::from_data({4, 5}, random_vector(20, rng));
    std::vector<float> onehot(20, 0.0f);
    for (std::size_t r = 0; r < 4; ++r) onehot[r * 5 + (r * 3) % 5] = 1.0f;
    auto target = Tensor::from_data({4, 5}, onehot);
    auto ce = [target](const Tensor& z) { return -ops::sum(ops::log_softmax(z) * target) * 0.25f; };
    CHECK(grad_check(ce, logits, 1e-3f) < 1e-3);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return v; }, x, 1e-3f), ContractError);
    CHECK_THROWS_AS(grad_check(ce, logits, 0.0f), ContractError);
}

TEST_CASE("every primitive matches central differences") {
    const float tol = 1e-3f;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto rng = make_rng(100 + seed);
        auto a = randt({3, 4}, rng);
        auto b = randt({3, 4}, rng);
        auto pos = randt({3, 4}, rng, 0.5f, 2.0f);
        auto m = randt({4, 5}, rng);
        auto away = Tensor::uniform({3, 4}, rng, 0.1f, 1.0f);
        for (std::size_t i = 0; i < away.numel(); ++i)
            if (i % 2) away.mutable_data()[i] = -away.data()[i];

        struct Case {
            const char* name;
            TensorFn f;
            Tensor x;
        };
        const Shape s34{3, 4};
        std::vector<Case> cases = {
            {"add", weighted([b](const Tensor& x) { return x + b; }, s34, seed), a},
            {"sub", weighted([b](const Tensor& x) { return b - x; }, s34, seed), a},
            {"mul", weighted([b](const Tensor& x) { return x * b; }, s34, seed), a},
            {"div", weighted([b](const Tensor& x) { return b / x; }, s34, seed), pos},
            {"div-num", weighted([pos](const Tensor& x) { return x / pos; }, s34, seed), a},
            {"exp", weighted([](const Tensor& x) { return ops::exp(x); }, s34, seed), a},
            {"log", weighted([](const Tensor& x) { return ops::log(x); }, s34, seed), pos},
            {"sqrt", weighted([](const Tensor& x) { return ops::sqrt(x); }, s34, seed), pos},
            {"tanh", weighted([](const Tensor& x) { return ops::tanh(x); }, s34, seed), a},
            {"gelu", weighted([](const Tensor& x) { return ops::gelu(x); }, s34, seed), a},
            {"relu", weighted([](const Tensor& x) { return ops::relu(x); }, s34, seed), away},
            {"cos", weighted([](const Tensor& x) { return ops::cos(x); }, s34, seed), a},
            {"sin", weighted([](const Tensor& x) { return ops::sin(x); }, s34, seed), a},
            {"square", weighted([](const Tensor& x) { return ops::square(x); }, s34, seed), a},
            {"matmul-lhs", weighted([m](const Tensor& x) { return ops::matmul(x, m); }, {3, 5}, seed), a},
            {"matmul-rhs", weighted([a](const Tensor& x) { return ops::matmul(a, x); }, {3, 5}, seed), m},
            {"transpose", weighted([](const Tensor& x) { return ops::transpose(x, 0, 1); }, {4, 3}, seed), a},
            {"reshape", weighted([](const Tensor& x) { return ops::reshape(x, {2, 6}); }, {2, 6}, seed), a},
            {"slice", weighted([](const Tensor& x) { return ops::slice(x, 1, 1, 3); }, {3, 2}, seed), a},
            {"concat", weighted([b](const Tensor& x) { return ops::concat({x, b, x}, 1); }, {3, 12}, seed), a},
            {"expand", weighted([](const Tensor& x) { return ops::expand(x, {2}); }, {2, 3, 4}, seed), a},
            {"sum-axis", weighted([](const Tensor& x) { return ops::sum(x, 0); }, {4}, seed), a},
            {"mean-axis", weighted([](const Tensor& x) { return ops::mean(x, 1, true); }, {3, 1}, seed), a},
            {"variance-axis", weighted([](const Tensor& x) { return ops::variance(x, 1); }, {3}, seed), a},
            {"variance", [](const Tensor& x) { return ops::variance(x); }, a},
            {"mean", [](const Tensor& x) { return ops::mean(ops::square(x)); }, a},
            {"softmax", weighted([](const Tensor& x) { return ops::softmax(x); }, s34, seed), a},
            {"log_softmax", weighted([](const Tensor& x) { return ops::log_softmax(x); }, s34, seed), a},
            {"layer_norm", weighted([](const Tensor& x) { return ops::layer_norm(x); }, s34, seed), a},
            {"broadcast-add", weighted([](const Tensor& x) { return ops::add(Tensor::zeros({2, 3, 4}), x); },
                                       {2, 3, 4}, seed),
             a},
            {"scalar-ops", weighted([](const Tensor& x) { return (x * 2.5f + 1.0f) * (-x); }, s34, seed), a},
        };
        const std::vector<std::size_t> rows = {2, 0, 2, 1};
        cases.push_back({"gather_rows",
                         weighted([rows](const Tensor& x) { return ops::gather_rows(x, rows); }, {4, 4}, seed), a});
        const std::vector<std::uint8_t> mask = {1, 0, 0, 1};
        cases.push_back(
            {"masked_fill", weighted([mask](const Tensor& x) { return ops::masked_fill(x, mask, 0.5f); }, s34, seed),
             a});

        for (const auto& c : cases) {
            CAPTURE(c.name);
            CAPTURE(seed);
            CHECK(grad_check(c.f, c.x, 1e-3f) < tol);
        }
    }
}

TEST_CASE("forward is bitwise deterministic") {
    auto rng = make_rng(4);
    auto a = randt({6, 8}, rng);
    auto b = randt({8, 8}, rng);
    auto f = [&] { return ops::softmax(ops::layer_norm(ops::gelu(ops::matmul(a, b)))); };
    auto y1 = f();
    auto y2 = f();
    CHECK(std::memcmp(y1.data().data(), y2.data().data(), y1.numel() * sizeof(float)) == 0);
}

TEST_CASE("reshape and transpose round trips are exact") {
    auto rng = make_rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = randt({2, 3, 4}, rng);
        auto r = ops::reshape(ops::reshape(a, {6, 4}), {2, 3, 4});
        auto t = ops::transpose(ops::transpose(a, 0, 2), 0, 2);
        CHECK(std::equal(a.data().begin(), a.data().end(), r.data().begin()));
        CHECK(std::equal(a.data().begin(), a.data().end(), t.data().begin()));
    }
}

TEST_CASE("dropout keeps expectation and respects p range") {
    auto rng = make_rng(6);
    auto x = Tensor::full({10000}, 1.0f);
    auto y = ops::dropout(x, 0.2f, rng);
    double s = 0.0;
    for (float v : y.data()) s += v;
    CHECK(s / 10000.0 == doctest::Approx(1.0).epsilon(0.05));
    CHECK_THROWS_AS(ops::dropout(x, 1.0f, rng), ContractError);
}

TEST_CASE("TSB1 round trip and header layout") {
    auto rng = make_rng(7);
    auto t = Tensor::from_data({2, 3}, random_vector(6, rng));
    const std::string bytes = tsb_bytes(t);
    REQUIRE(bytes.size() == 4 + 1 + 1 + 2 * 8 + 6 * 4);
    CHECK(bytes.substr(0, 4) == "TSB1");
    CHECK(bytes[4] == 0);
    CHECK(bytes[5] == 2);
    CHECK(static_cast<unsigned char>(bytes[6]) == 2);
    CHECK(static_cast<unsigned char>(bytes[14]) == 3);
    std::istringstream is(bytes);
    auto back = read_tsb(is);
    CHECK(back.shape() == t.shape());
    CHECK(std::equal(t.data().begin(), t.data().end(), back.data().begin()));

    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream bis(bad);
    CHECK_THROWS(read_tsb(bis));
    std::istringstream trunc(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS(read_tsb(trunc));
}

}  // TEST_SUITE
