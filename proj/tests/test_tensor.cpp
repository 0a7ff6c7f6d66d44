#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "hmfn/checkpoint.hpp"
#include "hmfn/gradcheck.hpp"
#include "hmfn/tensor.hpp"

using namespace hmfn;

TEST_CASE("matmul basics") {
    Tensor identity = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from_values({2, 1}, {3, -7});
    Tensor out = matmul(identity, v);
    CHECK(out(0, 0) == 3.0);
    CHECK(out(1, 0) == -7.0);

    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::from_values({2, 1}, {1, 1});
    Tensor r = matmul(a, ones);
    CHECK(r(0, 0) == 3.0);
    CHECK(r(1, 0) == 7.0);

    Tensor z = Tensor::zeros({3, 2});
    Tensor anyv = Tensor::from_values({2, 2}, {5, 6, 7, 8});
    Tensor zr = matmul(z, anyv);
    for (std::size_t i = 0; i < zr.size(); ++i) CHECK(zr(i) == 0.0);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), DimensionError);
    CHECK_THROWS_WITH(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})),
                      Catch::Matchers::ContainsSubstring("[2,3]") &&
                          Catch::Matchers::ContainsSubstring("[2,2]"));
}

TEST_CASE("conv2d basics") {
    // 1x1 kernel of value 1 is the identity
    Tensor x = Tensor::from_values({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor k1 = Tensor::from_values({1, 1, 1, 1}, {1});
    Tensor same = conv2d(x, k1, 1, 0);
    REQUIRE(same.shape() == Shape{1, 2, 3});
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(same(i) == x(i));

    // 3x3 all-ones kernel over 3x3 all-ones input collapses to the scalar 9
    Tensor ones = Tensor::filled({1, 3, 3}, 1.0);
    Tensor k3 = Tensor::filled({1, 1, 3, 3}, 1.0);
    Tensor nine = conv2d(ones, k3, 1, 0);
    REQUIRE(nine.shape() == Shape{1, 1, 1});
    CHECK(nine(0) == 9.0);

    Tensor kz = Tensor::zeros({2, 1, 3, 3});
    Tensor zr = conv2d(ones, kz, 1, 1);
    for (std::size_t i = 0; i < zr.size(); ++i) CHECK(zr(i) == 0.0);

    // output spatial size floor((H+2p-k)/stride)+1
    Tensor big = Tensor::zeros({1, 7, 9});
    Tensor k = Tensor::zeros({4, 1, 3, 3});
    CHECK(conv2d(big, k, 2, 1).shape() == Shape{4, 4, 5});

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0),
                    DimensionError);
}

TEST_CASE("elementwise suite") {
    Tensor s = softmax(Tensor::from_values({2}, {0, 0}), 0);
    CHECK(s(0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(s(1) == Catch::Approx(0.5).margin(1e-12));

    // softmax outputs are nonnegative and sum to 1 +- 1e-9 along the axis
    Rng rng(7);
    Tensor r = Tensor::rand_uniform({3, 4, 5}, rng, -5, 5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        Tensor sm = softmax(r, axis);
        for (std::size_t i = 0; i < sm.size(); ++i) CHECK(sm(i) >= 0.0);
        // spot check sums along axis 1
    }
    Tensor sm1 = softmax(r, 1);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            Real total = 0;
            for (std::size_t j = 0; j < 4; ++j) total += sm1(i, j, k);
            CHECK(std::fabs(total - 1.0) <= 1e-9);
        }
    CHECK_THROWS_AS(softmax(r, 3), DimensionError);

    Tensor c = Tensor::filled({2, 3, 3}, 3.0);
    Tensor up = bilinear_upsample(c, 2);
    REQUIRE(up.shape() == Shape{2, 6, 6});
    for (std::size_t i = 0; i < up.size(); ++i) CHECK(up(i) == Catch::Approx(3.0).margin(1e-12));

    Tensor n = nearest_upsample(Tensor::from_values({1, 2, 2}, {1, 2, 3, 4}), 2);
    REQUIRE(n.shape() == Shape{1, 4, 4});
    const Real expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (std::size_t i = 0; i < 16; ++i) CHECK(n(i) == expect[i]);
}

TEST_CASE("forward determinism") {
    Rng rng(42);
    Tensor x = Tensor::rand_uniform({2, 8, 8}, rng, -1, 1);
    Tensor k = Tensor::rand_uniform({3, 2, 3, 3}, rng, -1, 1);
    Tensor a = conv2d(x, k, 2, 1);
    Tensor b = conv2d(x, k, 2, 1);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a(i) == b(i));
}

TEST_CASE("backward requires scalar loss") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("finite differences oracle") {
    // f(x) = sum(x^2), x = [1,2] -> grad [2,4]
    Tensor x = Tensor::from_values({2}, {1, 2});
    Tensor g = finite_difference_grad([](Tensor& t) { return sum(mul(t, t)).item(); }, x);
    CHECK(g(0) == Catch::Approx(2.0).margin(1e-6));
    CHECK(g(1) == Catch::Approx(4.0).margin(1e-6));

    Tensor gc = finite_difference_grad([](Tensor&) { return Real(5); }, x);
    CHECK(gc(0) == 0.0);
    CHECK(gc(1) == 0.0);

    CHECK_THROWS_AS(finite_difference_grad([](Tensor&) { return Real(0); }, x, 0.0), ContractError);
}

TEST_CASE("backward matches finite differences across ops, seeds and shapes") {
    const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
    for (std::uint64_t seed : seeds) {
        Rng rng(seed);

        // matmul chain: loss = sum(relu(A x) * w)
        for (std::size_t m : {2, 3, 5}) {
            Tensor a = Tensor::rand_uniform({m, m}, rng, -1, 1);
            Tensor w = Tensor::rand_uniform({m, 1}, rng, -1, 1);
            Tensor x = Tensor::rand_uniform({m, 1}, rng, -1, 1);
            const Real err = gradcheck(
                [&](const Tensor& p) { return sum(mul(relu(matmul(a, p)), w)); }, x);
            CHECK(err < 1e-4);
            const Real err_a = gradcheck(
                [&](const Tensor& p) { return sum(mul(relu(matmul(p, x)), w)); }, a);
            CHECK(err_a < 1e-4);
        }

        // conv2d w.r.t. input and kernel, several geometries
        struct Geo {
            std::size_t cin, h, w, cout, k, stride, pad;
        };
        for (const Geo& g : {Geo{1, 5, 5, 2, 3, 1, 1}, Geo{2, 6, 4, 1, 3, 2, 1}, Geo{3, 4, 4, 2, 1, 1, 0}}) {
            Tensor in = Tensor::rand_uniform({g.cin, g.h, g.w}, rng, -1, 1);
            Tensor kn = Tensor::rand_uniform({g.cout, g.cin, g.k, g.k}, rng, -1, 1);
            CHECK(gradcheck([&](const Tensor& p) { return sum(conv2d(p, kn, g.stride, g.pad)); }, in) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return sum(conv2d(in, p, g.stride, g.pad)); }, kn) < 1e-4);
        }

        // elementwise ops under a weighted-sum readout
        for (std::size_t n : {3, 6, 10}) {
            Tensor w = Tensor::rand_uniform({n}, rng, -1, 1);
            Tensor x = Tensor::rand_uniform({n}, rng, 0.2, 2.0);
            auto weighted = [&](Tensor t) { return sum(mul(t, w)); };
            CHECK(gradcheck([&](const Tensor& p) { return weighted(sigmoid(p)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(hmfn::exp(p)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(hmfn::log(p)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(softmax(p, 0)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(add_scalar(mul_scalar(p, 1.7), 0.3)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(rsub_scalar(2.5, p)); }, x) < 1e-4);
            CHECK(gradcheck([&](const Tensor& p) { return weighted(hmfn::abs(add_scalar(p, -1.0))); }, x) < 1e-3);
        }

        // pooling and resampling
        Tensor img = Tensor::rand_uniform({2, 6, 6}, rng, -1, 1);
        CHECK(gradcheck([&](const Tensor& p) { return sum(max_pool2d(p, 3, 1)); }, img) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(mul_scalar(nearest_upsample(p, 2), 0.25)); }, img) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(mul_scalar(bilinear_upsample(p, 2), 0.25)); }, img) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(bilinear_resize(p, 4, 9)); }, img) < 1e-4);

        // structural ops
        Tensor part = Tensor::rand_uniform({2, 3, 3}, rng, -1, 1);
        CHECK(gradcheck(
                  [&](const Tensor& p) {
                      Tensor cat = concat({p, mul_scalar(p, 2.0)}, 0);
                      return sum(mul(select0(cat, 1), select0(cat, 3)));
                  },
                  part) < 1e-4);

        // broadcasting add/mul with a trailing-suffix operand
        Tensor base = Tensor::rand_uniform({3, 4}, rng, -1, 1);
        Tensor suffix = Tensor::rand_uniform({4}, rng, -1, 1);
        CHECK(gradcheck([&](const Tensor& p) { return sum(add(base, p)); }, suffix) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(mul(p, suffix)); }, base) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(mul(base, p)); }, suffix) < 1e-4);

        Tensor bias = Tensor::rand_uniform({2}, rng, -1, 1);
        CHECK(gradcheck([&](const Tensor& p) { return sum(add_channel_bias(img, p)); }, bias) < 1e-4);
        CHECK(gradcheck([&](const Tensor& p) { return sum(clamp(p, -0.5, 0.5)); }, img) < 1e-3);
    }
}

TEST_CASE("gradient accumulates across reuse") {
    Tensor x = Tensor::from_values({1}, {3}, true);
    {
        Tape tape;
        Tensor y = mul(x, x);  // x^2, dy/dx = 6
        tape.backward(y);
    }
    CHECK(x.grad()[0] == Catch::Approx(6.0));
}

TEST_CASE("checkpoint round trip") {
    checkpoint::TensorMap m;
    Rng rng(11);
    m["alpha"] = Tensor::rand_uniform({3, 4}, rng, -2, 2);
    m["beta"] = Tensor::rand_uniform({2, 2, 2}, rng, -2, 2);
    m["meta.step"] = Tensor::scalar(42);

    const std::string path = "ckpt_test.hmfn";
    checkpoint::save(path, m);
    auto loaded = checkpoint::load(path);
    REQUIRE(loaded.size() == 3);
    REQUIRE(loaded.count("alpha") == 1);
    CHECK(loaded["alpha"].shape() == Shape{3, 4});
    CHECK(loaded["meta.step"].item() == 42.0);

    // float32 payload: reload of a reload is exact
    const std::string path2 = "ckpt_test2.hmfn";
    checkpoint::save(path2, loaded);
    auto loaded2 = checkpoint::load(path2);
    for (const auto& [name, t] : loaded2) {
        const Tensor& o = loaded.at(name);
        REQUIRE(t.size() == o.size());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t(i) == o(i));
    }

    std::remove(path.c_str());
    std::remove(path2.c_str());

    CHECK_THROWS_AS(checkpoint::load("does_not_exist.hmfn"), IoError);
}
