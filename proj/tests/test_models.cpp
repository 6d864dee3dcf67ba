#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "vstain/nn.hpp"
#include "vstain/util.hpp"

using namespace vstain;

namespace {

template <typename T>
TensorT<T> random_input(Shape shape, uint64_t seed, T scl = T(1)) {
    Rng rng(seed);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(scl * rng.normal());
    return TensorT<T>::from_values(std::move(shape), std::move(v), false);
}

}  // namespace

TEST_CASE("virtual stainer maps 2x64x64 to 3x64x64") {
    auto net = build_vs_generator<float>(16, 123);
    auto out = net.bind(false).forward(random_input<float>({2, 64, 64}, 1));
    CHECK(out.shape() == Shape{3, 64, 64});
}

TEST_CASE("virtual stainer encoder widths double per level") {
    auto net = build_vs_generator<float>(16, 123);
    auto fw = net.bind(false).forward_with_taps(random_input<float>({2, 64, 64}, 2));
    REQUIRE(fw.taps.size() == 4);
    int expected_c = 16, expected_s = 32;
    for (const auto& tap : fw.taps) {
        CHECK(tap.dim(0) == expected_c);
        CHECK(tap.dim(1) == expected_s);
        CHECK(tap.dim(2) == expected_s);
        expected_c *= 2;
        expected_s /= 2;
    }
}

TEST_CASE("rebuilding with the same seed gives identical parameters") {
    auto a = build_vs_generator<float>(8, 77);
    auto b = build_vs_generator<float>(8, 77);
    REQUIRE(a.params().size() == b.params().size());
    for (size_t i = 0; i < a.params().size(); ++i) {
        REQUIRE(a.params()[i].size() == b.params()[i].size());
        CHECK(std::memcmp(a.params()[i].values->data(), b.params()[i].values->data(),
                          a.params()[i].size() * sizeof(float)) == 0);
    }
    CHECK(a.parameter_hash() == b.parameter_hash());
    auto c = build_vs_generator<float>(8, 78);
    CHECK(a.parameter_hash() != c.parameter_hash());
}

TEST_CASE("refocuser preserves shape and uses max pooling at five levels") {
    auto net = build_dr_generator<float>(16, 5);
    CHECK(net.config().levels == 5);
    CHECK(net.config().pool == PoolKind::Max);
    CHECK(net.config().convs_per_block == 2);
    auto out = net.bind(false).forward(random_input<float>({2, 64, 64}, 3));
    CHECK(out.shape() == Shape{2, 64, 64});
}

TEST_CASE("refocuser rejects spatial dims not divisible by 2^5") {
    auto net = build_dr_generator<float>(8, 5);
    CHECK_THROWS(net.bind(false).forward(random_input<float>({2, 48, 48}, 4)));
}

TEST_CASE("refocuser on a zero image is finite with the same shape") {
    auto net = build_dr_generator<float>(8, 9);
    auto out = net.bind(false).forward(TensorT<float>::zeros({2, 32, 32}));
    REQUIRE(out.shape() == Shape{2, 32, 32});
    for (float v : out.values()) CHECK(std::isfinite(v));
}

TEST_CASE("discriminator halves spatial size per block and outputs in (0,1)") {
    auto net = build_discriminator<float>(3, 8, 11);
    auto fw = net.bind(false).forward_with_taps(random_input<float>({3, 64, 64}, 5));
    REQUIRE(fw.taps.size() == 6);
    int expected_s = 32;
    for (int j = 0; j < 6; ++j) {
        CHECK(fw.taps[j].dim(0) == 8 << (j + 1));  // base * 2^j, 1-indexed blocks
        CHECK(fw.taps[j].dim(1) == expected_s);
        expected_s /= 2;
    }
    const float d = fw.output.item();
    CHECK(d > 0.f);
    CHECK(d < 1.f);
}

TEST_CASE("identical inputs give identical outputs and feature maps") {
    auto net = build_vs_generator<float>(8, 21);
    auto bound = net.bind(false);
    auto in = random_input<float>({2, 32, 32}, 6);
    auto f1 = bound.forward_with_taps(in);
    auto f2 = bound.forward_with_taps(in);
    CHECK(std::memcmp(f1.output.values().data(), f2.output.values().data(),
                      f1.output.size() * sizeof(float)) == 0);
    for (size_t m = 0; m < f1.taps.size(); ++m)
        CHECK(std::memcmp(f1.taps[m].values().data(), f2.taps[m].values().data(),
                          f1.taps[m].size() * sizeof(float)) == 0);
}

TEST_CASE("frozen taps contribute no gradient to the tapped network") {
    auto vs = build_vs_generator<double>(4, 31);
    auto frozen = vs.bind(false);
    auto probe = TensorT<double>::from_values({2, 16, 16}, std::vector<double>(512, 0.1), true);
    auto taps = tap_vs_features(frozen, probe);
    REQUIRE(taps.size() == 4);
    TensorT<double> loss = mean_all(abs_op(taps[0]));
    for (size_t m = 1; m < taps.size(); ++m) loss = add(loss, mean_all(abs_op(taps[m])));
    backward(loss, frozen.leaves);
    for (const auto& leaf : frozen.leaves)
        for (double g : leaf.grad()) CHECK(g == 0.0);
    // while the probe itself does receive gradient
    double probe_grad_mag = 0;
    for (double g : probe.grad()) probe_grad_mag += std::abs(g);
    CHECK(probe_grad_mag > 0.0);
}

TEST_CASE("tap_vs_features rejects a refocuser") {
    auto dr = build_dr_generator<float>(8, 3);
    auto bound = dr.bind(false);
    CHECK_THROWS(tap_vs_features(bound, random_input<float>({2, 32, 32}, 9)));
}

TEST_CASE("generator gradient w.r.t. first-layer weights passes finite differences") {
    GeneratorConfig cfg = vs_generator_config(4);
    auto net = GeneratorNetworkT<double>::build(cfg, 17);
    auto bound = net.bind(true);
    auto in = random_input<double>({2, 16, 16}, 13, 0.5);
    // check the first conv kernel and bias only; full-parameter FD would be slow
    std::vector<TensorT<double>> first{bound.leaves[0], bound.leaves[1]};
    auto rep = gradcheck::run(first, [&] { return mean_all(square(bound.forward(in))); }, 1e-4);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("shape contracts hold over random divisible sizes") {
    Rng rng(99);
    auto vs = build_vs_generator<float>(4, 1);
    auto dr = build_dr_generator<float>(4, 2);
    for (int trial = 0; trial < 4; ++trial) {
        const int h = 16 * (1 + static_cast<int>(rng.below(3)));  // 16, 32, 48
        const int w = 16 * (1 + static_cast<int>(rng.below(3)));
        auto out = vs.bind(false).forward(random_input<float>({2, h, w}, 100 + trial));
        CHECK(out.shape() == Shape{3, h, w});
        if (h % 32 == 0 && w % 32 == 0) {
            auto out2 = dr.bind(false).forward(random_input<float>({2, h, w}, 200 + trial));
            CHECK(out2.shape() == Shape{2, h, w});
        }
    }
}

TEST_CASE("translation consistency on constant background (smoke, loose tolerance)") {
    auto net = build_dr_generator<float>(8, 41);
    auto bound = net.bind(false);
    const int n = 64, shift = 32;  // one full pooling granule
    Image a(2, n, n, 0.2f), b(2, n, n, 0.2f);
    // small bump away from borders, shifted by the pooling granularity
    for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx) {
            a.at(0, 8 + dy, 8 + dx) = 1.0f;
            b.at(0, 8 + dy + shift, 8 + dx) = 1.0f;
        }
    auto oa = to_image(bound.forward(to_tensor(a)));
    auto ob = to_image(bound.forward(to_tensor(b)));
    // compare the response at the bump location in each output
    double max_mismatch = 0, scale = 0;
    for (int c = 0; c < 2; ++c)
        for (int dy = 0; dy < 8; ++dy)
            for (int dx = 0; dx < 8; ++dx) {
                const double va = oa.at(c, 6 + dy, 6 + dx);
                const double vb = ob.at(c, 6 + dy + shift, 6 + dx);
                max_mismatch = std::max(max_mismatch, std::abs(va - vb));
                scale = std::max({scale, std::abs(va), std::abs(vb)});
            }
    CHECK(max_mismatch < 0.25 * std::max(scale, 1e-6));
}
