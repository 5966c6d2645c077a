#include <doctest.h>

#include <stdexcept>

#include "advrestore/rng.hpp"
#include "advrestore/tensor.hpp"

using namespace advrestore;

TEST_CASE("tensor shape and data must agree") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0}, {}), std::invalid_argument);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
}

TEST_CASE("tensor helpers") {
    Tensor a = Tensor::from({2}, {3.0, -4.0});
    CHECK(a.max_abs() == doctest::Approx(4.0));
    Tensor b = Tensor::from({2}, {1.0, 1.0});
    CHECK(a.max_abs_diff(b) == doctest::Approx(5.0));
    CHECK(mean_squared_error(a, b) == doctest::Approx((4.0 + 25.0) / 2.0));
    CHECK_THROWS_WITH_AS(require_same_shape("op", a, Tensor::zeros({3})),
                         "op: shape mismatch [2] vs [3]", std::invalid_argument);
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    Rng fork1 = c.fork("stream-one");
    Rng fork2 = c.fork("stream-two");
    CHECK(fork1.next_u64() != fork2.next_u64());
    Rng d(42);
    Rng fork1b = d.fork("stream-one");
    CHECK(Rng(42).fork("stream-one").next_u64() == fork1b.next_u64());
}

TEST_CASE("rng normal has sane moments") {
    Rng rng(7);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = rng.normal();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.03);
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("uniform stays in range") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const int k = rng.uniform_int(-2, 5);
        CHECK(k >= -2);
        CHECK(k <= 5);
    }
}
