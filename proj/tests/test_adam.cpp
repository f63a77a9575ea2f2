#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ord2seq/adam.hpp"
#include "ord2seq/rng.hpp"
#include "ord2seq/tensor.hpp"

using namespace ord2seq;

TEST_CASE("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::param({3}, {1.0, -2.0, 0.5}, "p");
    p.zero_grad();
    Adam adam({p});
    adam.step();
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == -2.0);
    CHECK(p.values()[2] == 0.5);
    CHECK(adam.step_count() == 1);
}

TEST_CASE("first update magnitude is the learning rate after bias correction") {
    Tensor p = Tensor::param({1}, {0.0}, "p");
    p.zero_grad();
    Tensor loss = sum(p);  // d loss / d p = 1
    loss.backward();
    Adam adam({p}, AdamConfig{.lr = 1e-4});
    adam.step();
    // mhat = 1, vhat = 1, so the step is lr / (1 + eps).
    CHECK(std::fabs(-p.values()[0] - 1e-4) < 1e-10);
}

TEST_CASE("missing gradient is an error") {
    Tensor p = Tensor::param({2}, {0.0, 0.0}, "p");
    Adam adam({p});
    CHECK_THROWS_AS(adam.step(), std::runtime_error);
}

TEST_CASE("convex quadratic decreases over 100 steps") {
    // f(p) = mean((p - target)^2)
    Tensor p = Tensor::param({2}, {3.0, -2.5}, "p");
    const Tensor target = Tensor::from({2}, {-1.0, 0.5});
    Adam adam({p}, AdamConfig{.lr = 0.05});

    const auto loss_value = [&]() {
        Tensor diff = sub(p, target);
        return mean(mul(diff, diff));
    };

    double prev = loss_value().item();
    const double first = prev;
    for (int i = 0; i < 100; ++i) {
        adam.zero_grad();
        Tensor loss = loss_value();
        loss.backward();
        adam.step();
        const double now = loss_value().item();
        CHECK(now <= prev + 1e-12);
        prev = now;
    }
    CHECK(prev < first * 0.1);
}

TEST_CASE("identical seeds give bit-identical trajectories") {
    const auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> init(4);
        for (auto& v : init) v = rng.uniform(-1.0, 1.0);
        Tensor p = Tensor::param({4}, init, "p");
        Adam adam({p}, AdamConfig{.lr = 1e-2});
        for (int i = 0; i < 25; ++i) {
            adam.zero_grad();
            Tensor loss = mean(mul(sigmoid(p), sigmoid(p)));
            loss.backward();
            adam.step();
        }
        return std::vector<double>(p.values().begin(), p.values().end());
    };
    const auto a = run(9), b = run(9), c = run(10);
    CHECK(a == b);
    CHECK(a != c);
}
