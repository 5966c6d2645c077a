#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "advrestore/nn.hpp"
#include "advrestore/optim.hpp"
#include "advrestore/rng.hpp"

using namespace advrestore;

TEST_CASE("sgd step") {
    Parameter w("w", Tensor::from({1}, {1.0}));
    w.grad = Tensor::from({1}, {2.0});
    sgd_step({&w}, 0.1);
    CHECK(w.value.data[0] == doctest::Approx(0.8));
}

TEST_CASE("frozen parameters are bit-identical after steps") {
    Parameter w("w", Tensor::from({3}, {1.0, -2.0, 0.5}));
    w.trainable = false;
    w.grad = Tensor::from({3}, {10.0, 10.0, 10.0});
    const Tensor before = w.value;
    sgd_step({&w}, 0.5);
    Adam adam({&w}, 0.5);
    adam.step();
    for (std::size_t i = 0; i < before.data.size(); ++i) CHECK(w.value.data[i] == before.data[i]);
}

TEST_CASE("adam first-step magnitude is the learning rate") {
    for (double g : {3.0, 0.25, -40.0}) {
        Parameter w("w", Tensor::from({1}, {1.0}));
        Adam adam({&w}, 0.01);
        w.grad = Tensor::from({1}, {g});
        adam.step();
        // Bias-corrected first step: lr * g / (|g| + eps).
        CHECK(std::abs(w.value.data[0] - 1.0) == doctest::Approx(0.01).epsilon(1e-6));
    }
}

TEST_CASE("non-finite gradients are rejected by name") {
    Parameter w("conv1.w", Tensor::from({1}, {1.0}));
    w.grad = Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_WITH_AS(sgd_step({&w}, 0.1),
                         "optimizer: non-finite gradient for parameter 'conv1.w'", std::runtime_error);
    Adam adam({&w}, 0.1);
    CHECK_THROWS_AS(adam.step(), std::runtime_error);
}

namespace {

// A tiny training loop; returns the parameter trajectory digest.
std::uint64_t run_training(std::uint64_t seed) {
    Rng rng(seed);
    LinearLayer layer("lin", 4, 3, rng);
    std::vector<Parameter*> params;
    layer.collect(params);
    Adam opt(params, 1e-2);
    std::uint64_t digest = 0;
    for (int step = 0; step < 25; ++step) {
        const Tensor x = rng.uniform_tensor({4}, -1.0, 1.0);
        const Tensor target = rng.uniform_tensor({3}, -1.0, 1.0);
        opt.zero_grad();
        Tape tape;
        BoundParams bp;
        Var loss = tape.mse(layer.forward(tape, bp, tape.constant(x)), tape.constant(target));
        tape.backward(loss);
        bp.accumulate_grads(tape);
        opt.step();
        digest ^= parameters_digest(params) + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(step);
    }
    return digest;
}

}  // namespace

TEST_CASE("two runs with the same seed produce bit-identical trajectories") {
    CHECK(run_training(123) == run_training(123));
    CHECK(run_training(123) != run_training(124));
}

TEST_CASE("bound parameters accumulate gradients across samples") {
    Rng rng(9);
    Parameter w("w", Tensor::from({1}, {2.0}));
    Tape tape;
    BoundParams bp;
    Var wv = bp.bind(tape, w);
    // loss = (w*3)^2 summed contributions
    Var loss = tape.sum(tape.mul(tape.scale(wv, 3.0), tape.scale(wv, 3.0)));
    tape.backward(loss);
    bp.accumulate_grads(tape);
    CHECK(w.grad.data[0] == doctest::Approx(2.0 * 9.0 * 2.0));  // d/dw 9w^2 = 18w
    // A second pass accumulates on top.
    Tape tape2;
    BoundParams bp2;
    Var wv2 = bp2.bind(tape2, w);
    Var loss2 = tape2.sum(wv2);
    tape2.backward(loss2);
    bp2.accumulate_grads(tape2);
    CHECK(w.grad.data[0] == doctest::Approx(36.0 + 1.0));
}
