#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "gradcheck.hpp"
#include "vstain/tensor.hpp"
#include "vstain/util.hpp"

using namespace vstain;

namespace {

Tensor64 random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scl = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = scl * rng.normal();
    return Tensor64::from_values(std::move(shape), std::move(v), requires_grad);
}

// fixed random projection makes the scalar loss sensitive to every output
Tensor64 project(const Tensor64& x, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(x.size());
    for (auto& v : w) v = rng.normal();
    return sum_all(mul(x, Tensor64::from_values(x.shape(), std::move(w), false)));
}

}  // namespace

TEST_CASE("conv2d identity with 1x1 unit kernel") {
    Rng rng(1);
    auto x = random_tensor({2, 4, 4}, rng, false);
    auto k = Tensor64::from_values({2, 2, 1, 1}, {1, 0, 0, 1}, false);
    auto y = conv2d(x, k);
    REQUIRE(y.shape() == x.shape());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
}

TEST_CASE("conv2d uniform kernel preserves constants under reflect padding") {
    const double c = 3.25;
    auto x = Tensor64::from_values({1, 6, 5}, std::vector<double>(30, c), false);
    auto k = Tensor64::from_values({1, 1, 3, 3}, std::vector<double>(9, 1.0 / 9.0), false);
    auto y = conv2d(x, k, 1, Padding::SameReflect);
    REQUIRE(y.shape() == Shape{1, 6, 5});
    for (double v : y.values()) CHECK(v == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(7);
    auto x = random_tensor({1, 5, 5}, rng);
    auto k = random_tensor({1, 1, 3, 3}, rng);
    std::vector<Tensor64> leaves{x, k};
    auto rep = gradcheck::run(leaves, [&] { return project(conv2d(x, k), 99); });
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("conv2d stride-2 and valid-padding gradients vs finite differences") {
    Rng rng(8);
    SUBCASE("stride 2, reflect") {
        auto x = random_tensor({2, 6, 6}, rng);
        auto k = random_tensor({3, 2, 3, 3}, rng);
        std::vector<Tensor64> leaves{x, k};
        auto rep = gradcheck::run(leaves, [&] { return project(conv2d(x, k, 2), 5); });
        CHECK(rep.max_rel_error < 1e-4);
    }
    SUBCASE("valid") {
        auto x = random_tensor({1, 6, 6}, rng);
        auto k = random_tensor({2, 1, 3, 3}, rng);
        std::vector<Tensor64> leaves{x, k};
        auto rep = gradcheck::run(leaves, [&] { return project(conv2d(x, k, 1, Padding::Valid), 6); });
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_CASE("conv2d rejects bad shapes") {
    Rng rng(3);
    auto x = random_tensor({2, 4, 4}, rng, false);
    auto k_badcin = random_tensor({1, 3, 3, 3}, rng, false);
    CHECK_THROWS(conv2d(x, k_badcin));
    auto k_even = random_tensor({1, 2, 2, 2}, rng, false);
    CHECK_THROWS(conv2d(x, k_even));
}

TEST_CASE("non-finite values are rejected") {
    auto x = Tensor64::from_values({2}, {1.0, 0.0}, false);
    auto y = Tensor64::from_values({2}, {1.0, 0.0}, false);
    CHECK_THROWS(div(x, y));  // 0/0 -> NaN must be flagged
}

TEST_CASE("pool2 averages and maxima") {
    SUBCASE("avg preserves constants") {
        auto x = Tensor64::from_values({1, 4, 4}, std::vector<double>(16, 2.5), false);
        auto y = pool2(x, PoolKind::Avg);
        for (double v : y.values()) CHECK(v == doctest::Approx(2.5));
    }
    SUBCASE("max of [[1,2],[3,4]] is 4") {
        auto x = Tensor64::from_values({1, 2, 2}, {1, 2, 3, 4}, false);
        auto y = pool2(x, PoolKind::Max);
        REQUIRE(y.size() == 1);
        CHECK(y.values()[0] == 4.0);
    }
    SUBCASE("avg-pool gradient of sum is 0.25 everywhere") {
        Rng rng(4);
        auto x = random_tensor({2, 4, 4}, rng);
        auto loss = sum_all(pool2(x, PoolKind::Avg));
        backward(loss);
        for (double g : x.grad()) CHECK(g == doctest::Approx(0.25));
    }
    SUBCASE("max-pool gradient routes to argmax, first occurrence on ties") {
        auto x = Tensor64::from_values({1, 2, 2}, {7, 7, 7, 7}, true);
        auto loss = sum_all(pool2(x, PoolKind::Max));
        backward(loss);
        CHECK(x.grad()[0] == 1.0);
        CHECK(x.grad()[1] == 0.0);
        CHECK(x.grad()[2] == 0.0);
        CHECK(x.grad()[3] == 0.0);
    }
    SUBCASE("max-pool gradient vs finite differences") {
        Rng rng(11);
        auto x = random_tensor({1, 4, 4}, rng);
        std::vector<Tensor64> leaves{x};
        auto rep = gradcheck::run(leaves, [&] { return project(pool2(x, PoolKind::Max), 2); });
        CHECK(rep.max_rel_error < 1e-4);
    }
    SUBCASE("odd dims rejected") {
        auto x = Tensor64::zeros({1, 3, 4});
        CHECK_THROWS(pool2(x, PoolKind::Avg));
    }
}

TEST_CASE("resize_bilinear_2x") {
    SUBCASE("constants preserved") {
        auto x = Tensor64::from_values({1, 2, 2}, std::vector<double>(4, 1.5), false);
        auto y = resize_bilinear_2x(x);
        REQUIRE(y.shape() == Shape{1, 4, 4});
        for (double v : y.values()) CHECK(v == doctest::Approx(1.5));
    }
    SUBCASE("linear ramp stays linear") {
        const int w = 4;
        std::vector<double> vals;
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < w; ++x) vals.push_back(x);
        auto x = Tensor64::from_values({1, 2, w}, vals, false);
        auto y = resize_bilinear_2x(x);
        // align-corners: output column ox samples input at ox*(w-1)/(2w-1)
        const double slope = double(w - 1) / double(2 * w - 1);
        for (int row = 0; row < 4; ++row)
            for (int ox = 0; ox < 2 * w; ++ox)
                CHECK(y.values()[row * 2 * w + ox] == doctest::Approx(slope * ox).epsilon(1e-12));
    }
    SUBCASE("gradient vs finite differences") {
        Rng rng(5);
        auto x = random_tensor({2, 3, 3}, rng);
        std::vector<Tensor64> leaves{x};
        auto rep = gradcheck::run(leaves, [&] { return project(resize_bilinear_2x(x), 3); });
        CHECK(rep.max_rel_error < 1e-4);
    }
    SUBCASE("degenerate dims rejected") {
        auto x = Tensor64::zeros({1, 1, 4});
        CHECK_THROWS(resize_bilinear_2x(x));
    }
}

TEST_CASE("elementwise activations") {
    auto x = Tensor64::from_values({3}, {0.0, -1.0, 2.0}, true);
    SUBCASE("sigmoid(0) = 0.5") {
        auto y = sigmoid(x);
        CHECK(y.values()[0] == doctest::Approx(0.5));
    }
    SUBCASE("leaky_rectifier slope 0.1 at -1 gives -0.1") {
        auto y = leaky_relu(x, 0.1);
        CHECK(y.values()[1] == doctest::Approx(-0.1));
        CHECK(y.values()[2] == doctest::Approx(2.0));
    }
    SUBCASE("sigmoid derivative at 0 is 0.25, matches finite differences") {
        auto x0 = Tensor64::from_values({1}, {0.0}, true);
        std::vector<Tensor64> leaves{x0};
        auto rep = gradcheck::run(leaves, [&] { return sum_all(sigmoid(x0)); });
        CHECK(rep.max_rel_error < 1e-4);
        x0.zero_grad();
        auto loss = sum_all(sigmoid(x0));
        backward(loss);
        CHECK(x0.grad()[0] == doctest::Approx(0.25));
    }
    SUBCASE("leaky gradient vs finite differences") {
        Rng rng(6);
        auto xr = random_tensor({8}, rng);
        std::vector<Tensor64> leaves{xr};
        auto rep = gradcheck::run(leaves, [&] { return project(leaky_relu(xr, 0.1), 4); });
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_CASE("dense layer") {
    SUBCASE("identity weights, zero bias") {
        auto x = Tensor64::from_values({2}, {3.0, -4.0}, false);
        auto w = Tensor64::from_values({2, 2}, {1, 0, 0, 1}, false);
        auto b = Tensor64::zeros({2});
        auto y = dense(x, w, b);
        CHECK(y.values()[0] == 3.0);
        CHECK(y.values()[1] == -4.0);
    }
    SUBCASE("[[1,1]] x [2,3] = [5]") {
        auto x = Tensor64::from_values({2}, {2.0, 3.0}, false);
        auto w = Tensor64::from_values({1, 2}, {1.0, 1.0}, false);
        auto b = Tensor64::zeros({1});
        auto y = dense(x, w, b);
        CHECK(y.values()[0] == 5.0);
    }
    SUBCASE("weight gradient of sum(output) broadcasts the input") {
        auto x = Tensor64::from_values({3}, {1.0, 2.0, 3.0}, false);
        auto w = Tensor64::from_values({2, 3}, std::vector<double>(6, 0.5), true);
        auto b = Tensor64::zeros({2});
        auto loss = sum_all(dense(x, w, b));
        backward(loss);
        for (int m = 0; m < 2; ++m)
            for (int n = 0; n < 3; ++n) CHECK(w.grad()[m * 3 + n] == doctest::Approx(x.values()[n]));
    }
    SUBCASE("gradients vs finite differences") {
        Rng rng(9);
        auto x = random_tensor({4}, rng);
        auto w = random_tensor({3, 4}, rng);
        auto b = random_tensor({3}, rng);
        std::vector<Tensor64> leaves{x, w, b};
        auto rep = gradcheck::run(leaves, [&] { return project(dense(x, w, b), 7); });
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_CASE("backward") {
    SUBCASE("loss = sum(x^2) gives grad 2x") {
        auto x = Tensor64::from_values({4}, {1.0, -2.0, 0.5, 3.0}, true);
        auto loss = sum_all(square(x));
        backward(loss);
        for (size_t i = 0; i < x.size(); ++i)
            CHECK(x.grad()[i] == doctest::Approx(2.0 * x.values()[i]));
    }
    SUBCASE("unused parameter gets a zero gradient") {
        auto x = Tensor64::from_values({2}, {1.0, 1.0}, true);
        auto unused = Tensor64::from_values({3}, {5.0, 5.0, 5.0}, true);
        auto loss = sum_all(x);
        std::vector<Tensor64> params{x, unused};
        backward(loss, params);
        for (double g : unused.grad()) CHECK(g == 0.0);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("non-scalar loss rejected") {
        auto x = Tensor64::from_values({2}, {1.0, 2.0}, true);
        CHECK_THROWS(backward(x));
    }
    SUBCASE("composite conv->pool->dense chain vs finite differences") {
        Rng rng(10);
        auto x = random_tensor({1, 4, 4}, rng, false);
        auto k = random_tensor({2, 1, 3, 3}, rng);
        auto w = random_tensor({2, 8}, rng);
        auto b = random_tensor({2}, rng);
        std::vector<Tensor64> leaves{k, w, b};
        auto build = [&] {
            auto h1 = leaky_relu(conv2d(x, k), 0.1);
            auto h2 = pool2(h1, PoolKind::Avg);  // [2,2,2]
            return project(dense(reshape_to_vector(h2), w, b), 12);
        };
        auto rep = gradcheck::run(leaves, build);
        CHECK(rep.max_rel_error < 1e-4);
    }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
    Rng r1(42), r2(42);
    auto x1 = random_tensor({2, 6, 6}, r1, false);
    auto x2 = random_tensor({2, 6, 6}, r2, false);
    REQUIRE(std::memcmp(x1.values().data(), x2.values().data(),
                        x1.size() * sizeof(double)) == 0);
    auto k1 = random_tensor({3, 2, 3, 3}, r1, false);
    auto k2 = random_tensor({3, 2, 3, 3}, r2, false);
    auto y1 = conv2d(x1, k1, 2);
    auto y2 = conv2d(x2, k2, 2);
    CHECK(std::memcmp(y1.values().data(), y2.values().data(), y1.size() * sizeof(double)) == 0);
}

TEST_CASE("adam optimizer") {
    SUBCASE("zero gradient leaves parameters unchanged, increments t") {
        auto p = Tensor64::from_values({3}, {1.0, 2.0, 3.0}, true);
        p.zero_grad();
        std::vector<Tensor64> params{p};
        AdamStateT<double> st;
        adam_step(params, st, 0.01);
        CHECK(st.t == 1);
        CHECK(p.values()[0] == 1.0);
        CHECK(p.values()[1] == 2.0);
        CHECK(p.values()[2] == 3.0);
    }
    SUBCASE("first step with constant gradient approaches -lr*sign(g) as epsilon->0") {
        auto p = Tensor64::from_values({2}, {0.0, 0.0}, true);
        p.mutable_grad() = {0.3, -0.7};
        std::vector<Tensor64> params{p};
        AdamStateT<double> st;
        st.epsilon = 1e-12;
        adam_step(params, st, 0.05);
        CHECK(p.values()[0] == doctest::Approx(-0.05).epsilon(1e-9));
        CHECK(p.values()[1] == doctest::Approx(0.05).epsilon(1e-9));
    }
    SUBCASE("two steps g then -g: v stays positive, second update smaller than lr") {
        const double g = 0.4, lr = 0.01;
        auto p = Tensor64::from_values({1}, {1.0}, true);
        std::vector<Tensor64> params{p};
        AdamStateT<double> st;

        // independent closed-form recursion
        double m = 0, v = 0, x = 1.0;
        for (int step = 1; step <= 2; ++step) {
            const double grad = (step == 1) ? g : -g;
            m = st.beta1 * m + (1 - st.beta1) * grad;
            v = st.beta2 * v + (1 - st.beta2) * grad * grad;
            const double mhat = m / (1 - std::pow(st.beta1, step));
            const double vhat = v / (1 - std::pow(st.beta2, step));
            x -= lr * mhat / (std::sqrt(vhat) + st.epsilon);
        }

        p.mutable_grad() = {g};
        adam_step(params, st, lr);
        const double after1 = p.values()[0];
        p.mutable_grad() = {-g};
        adam_step(params, st, lr);
        const double after2 = p.values()[0];

        CHECK(st.t == 2);
        CHECK(st.v[0][0] > 0.0);
        CHECK(std::abs(after2 - after1) < lr);
        CHECK(after2 == doctest::Approx(x).epsilon(1e-12));
    }
}
