#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "cka/rng.hpp"
#include "cka/tensor.hpp"

using namespace cka;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = scale * rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

// Weighted-sum wrapper so gradients of non-scalar ops are checked entry by
// entry rather than through a uniform sum.
Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
    return sum_all(mul(t, Tensor(t.shape(), w)));
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    return w;
}

}  // namespace

TEST_CASE("matmul forward and gradient structure") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor b({3, 2}, {1, 0, 0, 1, 1, 1}, true);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 2});
    CHECK(c.at(0, 0) == 4.0);
    CHECK(c.at(0, 1) == 5.0);
    CHECK(c.at(1, 0) == 10.0);
    CHECK(c.at(1, 1) == 11.0);

    sum_all(c).backward();
    // d sum(AB) / dA_ik = sum_j B_kj: every row of dA equals the row sums of B
    const std::vector<double> ga = a.grad();
    const std::vector<double> expect = {1, 1, 2, 1, 1, 2};
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i] == Catch::Approx(expect[i]));
}

TEST_CASE("row softmax of equal logits is uniform") {
    Tensor x({1, 2}, {0.0, 0.0});
    Tensor y = row_softmax(x);
    CHECK(y.values()[0] == 0.5);
    CHECK(y.values()[1] == 0.5);
}

TEST_CASE("relu subgradient at the kink sides") {
    Tensor x({2}, {-1.0, 1.0}, true);
    sum_all(relu(x)).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("grad_check on sum of squares") {
    auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
    Tensor p({3}, {1.0, 2.0, 3.0});
    CHECK(grad_check(f, p, 1e-5) <= 1e-6);

    // the analytic gradient itself
    Tensor x({3}, {1.0, 2.0, 3.0}, true);
    f(x).backward();
    CHECK(x.grad() == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("grad_check rejects bad epsilon") {
    auto f = [](const Tensor& t) { return sum_all(t); };
    CHECK_THROWS(grad_check(f, Tensor({2}, {1.0, 2.0}), 0.0));
    CHECK_THROWS(grad_check(f, Tensor({2}, {1.0, 2.0}), 1e-2));
}

TEST_CASE("every primitive passes finite-difference checks") {
    Rng rng(20240817);
    constexpr double kEps = 1e-5;
    constexpr double kTol = 1e-6;

    auto check = [&](const char* tag, const std::function<Tensor(const Tensor&)>& f, Shape shape) {
        for (int rep = 0; rep < 10; ++rep) {
            Tensor p = random_tensor(shape, rng);
            INFO(tag << " rep " << rep);
            CHECK(grad_check(f, p, kEps) <= kTol);
        }
    };

    Tensor other = random_tensor({3, 4}, rng);
    Tensor right = random_tensor({4, 2}, rng);
    std::vector<double> w34 = random_weights(12, rng);
    std::vector<double> w43 = random_weights(12, rng);
    std::vector<double> w32 = random_weights(6, rng);
    std::vector<double> w3 = random_weights(3, rng);
    std::vector<double> w4 = random_weights(4, rng);
    std::vector<double> w33 = random_weights(9, rng);
    std::vector<double> wcat = random_weights(24, rng);

    check("matmul-left", [&](const Tensor& t) {
        return weighted_sum(matmul(t, right), w32);
    }, {3, 4});
    check("matmul-right", [&](const Tensor& t) {
        return weighted_sum(matmul(other, t), w32);
    }, {4, 2});
    check("add", [&](const Tensor& t) { return weighted_sum(add(t, other), w34); }, {3, 4});
    check("sub", [&](const Tensor& t) { return weighted_sum(sub(other, t), w34); }, {3, 4});
    check("mul", [&](const Tensor& t) { return weighted_sum(mul(t, other), w34); }, {3, 4});
    check("scalar_mul", [&](const Tensor& t) { return weighted_sum(scalar_mul(t, -2.5), w34); }, {3, 4});
    check("add_scalar", [&](const Tensor& t) { return weighted_sum(add_scalar(t, 0.7), w34); }, {3, 4});
    check("add_row_bias-x", [&](const Tensor& t) {
        return weighted_sum(add_row_bias(t, Tensor({4}, w4)), w34);
    }, {3, 4});
    check("add_row_bias-b", [&](const Tensor& t) {
        return weighted_sum(add_row_bias(other, t), w34);
    }, {4});
    check("exp", [&](const Tensor& t) { return weighted_sum(cka::exp(t), w34); }, {3, 4});
    check("log", [&](const Tensor& t) {
        return weighted_sum(cka::log(add_scalar(mul(t, t), 0.5)), w34);
    }, {3, 4});
    check("relu", [&](const Tensor& t) {
        // keep probes away from the kink: |x| >= ~0.01 after scaling
        Tensor shifted = add_scalar(scalar_mul(t, 2.0), 0.513);
        return weighted_sum(relu(shifted), w34);
    }, {3, 4});
    check("row_softmax", [&](const Tensor& t) { return weighted_sum(row_softmax(t), w34); }, {3, 4});
    check("sum_all", [&](const Tensor& t) { return sum_all(t); }, {3, 4});
    check("mean_all", [&](const Tensor& t) { return mean_all(t); }, {3, 4});
    check("sum_axis0", [&](const Tensor& t) { return weighted_sum(sum_axis(t, 0), w4); }, {3, 4});
    check("sum_axis1", [&](const Tensor& t) { return weighted_sum(sum_axis(t, 1), w3); }, {3, 4});
    check("mean_axis0", [&](const Tensor& t) { return weighted_sum(mean_axis(t, 0), w4); }, {3, 4});
    check("row_l2norm", [&](const Tensor& t) { return weighted_sum(row_l2norm(t), w3); }, {3, 4});
    check("row_normalize", [&](const Tensor& t) { return weighted_sum(row_normalize(t), w34); }, {3, 4});
    check("transpose", [&](const Tensor& t) { return weighted_sum(transpose(t), w43); }, {3, 4});
    check("reshape", [&](const Tensor& t) { return weighted_sum(reshape(t, {4, 3}), w43); }, {3, 4});
    check("gather_rows", [&](const Tensor& t) {
        return weighted_sum(gather_rows(t, {2, 0, 2}), w34);
    }, {3, 4});
    check("concat0", [&](const Tensor& t) {
        return weighted_sum(concat({t, other}, 0), wcat);
    }, {3, 4});
    check("concat1", [&](const Tensor& t) {
        return weighted_sum(concat({t, other}, 1), wcat);
    }, {3, 4});
    check("pairwise_euclidean", [&](const Tensor& t) {
        return weighted_sum(pairwise_euclidean(t), w33);
    }, {3, 4});
}

TEST_CASE("constant-output function has zero gradients") {
    Tensor x({2, 2}, {1.0, -2.0, 3.0, 0.5}, true);
    Tensor out = sum_all(scalar_mul(x, 0.0));
    out.backward();
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("forward+backward is bitwise deterministic") {
    Rng rng(99);
    Tensor base = random_tensor({5, 6}, rng);
    auto run = [&]() {
        Tensor x(base.shape(), base.values(), true);
        Tensor y = mean_all(row_softmax(matmul(x, transpose(x))));
        y.backward();
        return std::make_pair(y.item(), x.grad());
    };
    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("shape mismatches name both shapes") {
    Tensor a({2, 3}, 0.0);
    Tensor b({3, 3}, 0.0);
    try {
        add(a, b);
        FAIL("expected throw");
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,3]") != std::string::npos);
    }
    CHECK_THROWS(matmul(a, Tensor({2, 2}, 0.0)));
    CHECK_THROWS(reshape(a, {5}));
}

TEST_CASE("log and softmax reject bad input") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(cka::log(Tensor({2}, {1.0, -1.0})));
    CHECK_THROWS(cka::log(Tensor({1}, {0.0})));
    CHECK_THROWS(cka::log(Tensor({1}, {nan})));
    CHECK_THROWS(row_softmax(Tensor({1, 2}, {nan, 0.0})));
}

TEST_CASE("backward requires scalar output") {
    Tensor x({2, 2}, 1.0, true);
    CHECK_THROWS(add(x, x).backward());
}

TEST_CASE("gradients accumulate across shared subgraphs") {
    Tensor x({2}, {3.0, 4.0}, true);
    Tensor y = add(x, x);  // dy/dx = 2
    sum_all(y).backward();
    CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}
