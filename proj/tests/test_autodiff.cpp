#include <doctest.h>

#include <stdexcept>

#include <functional>
#include <string>
#include <vector>

#include "advrestore/autodiff.hpp"
#include "advrestore/rng.hpp"

using namespace advrestore;

namespace {

struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Var(Tape&, const std::vector<Var>&)> build;
};

Tensor random_inputs(Rng& rng, const std::vector<int>& shape, double lo = -1.5, double hi = 1.5) {
    return rng.uniform_tensor(shape, lo, hi);
}

double eval_with(const OpCase& c, std::size_t replace_index, const Tensor& probe,
                 const Tensor& weights) {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        leaves.push_back(tape.leaf(i == replace_index ? probe : c.inputs[i]));
    }
    Var out = c.build(tape, leaves);
    if (out.value().numel() == 1) return out.value().item();
    return tape.sum(tape.mul(out, tape.constant(weights))).value().item();
}

// Central finite differences against the analytic backward pass for every
// input leaf of the case.
void check_case(const OpCase& c, double rel_tol = 1e-5, double abs_tol = 1e-8) {
    CAPTURE(c.name);
    Rng wrng(fnv1a64(c.name));
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& in : c.inputs) leaves.push_back(tape.leaf(in));
    Var out = c.build(tape, leaves);
    Tensor weights = wrng.uniform_tensor(out.value().shape, -1.0, 1.0);
    Var loss = out.value().numel() == 1 ? out : tape.sum(tape.mul(out, tape.constant(weights)));
    tape.backward(loss);
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        const Tensor analytic = tape.grad(leaves[i]);
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& probe) { return eval_with(c, i, probe, weights); }, c.inputs[i]);
        for (std::size_t k = 0; k < analytic.data.size(); ++k) {
            const double a = analytic.data[k], f = fd.data[k];
            const double err = std::abs(a - f);
            const double bound = rel_tol * std::max(std::abs(a), std::abs(f)) + abs_tol;
            if (err > bound) {
                CAPTURE(i);
                CAPTURE(k);
                CAPTURE(a);
                CAPTURE(f);
                CHECK(err <= bound);
            }
        }
    }
}

std::vector<OpCase> registered_op_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OpCase> cases;
    auto in = [&](std::vector<int> s) { return random_inputs(rng, s); };

    cases.push_back({"add", {in({2, 3}), in({2, 3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); }});
    cases.push_back({"sub", {in({5}), in({5})},
                     [](Tape& t, const std::vector<Var>& v) { return t.sub(v[0], v[1]); }});
    cases.push_back({"mul", {in({4, 2}), in({4, 2})},
                     [](Tape& t, const std::vector<Var>& v) { return t.mul(v[0], v[1]); }});
    cases.push_back({"scale", {in({3, 3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], -0.73); }});
    cases.push_back({"add_scalar", {in({6})},
                     [](Tape& t, const std::vector<Var>& v) { return t.add_scalar(v[0], 0.31); }});
    cases.push_back({"silu", {in({2, 5})},
                     [](Tape& t, const std::vector<Var>& v) { return t.silu(v[0]); }});
    cases.push_back({"reshape", {in({2, 6})},
                     [](Tape& t, const std::vector<Var>& v) { return t.reshape(v[0], {3, 4}); }});
    cases.push_back(
        {"sum", {in({3, 2})}, [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); }});
    cases.push_back({"matmul", {in({3, 4}), in({4, 2})},
                     [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }});
    cases.push_back({"conv2d_k3s1p1", {in({3, 6, 6}), in({4, 3, 3, 3}), in({4})},
                     [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2], 1, 1); }});
    cases.push_back({"conv2d_k2s2p0", {in({2, 6, 6}), in({3, 2, 2, 2}), in({3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2], 2, 0); }});
    cases.push_back({"conv2d_k1s1p0", {in({3, 4, 4}), in({2, 3, 1, 1}), in({2})},
                     [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2], 1, 0); }});
    cases.push_back({"conv2d_k4s2p1", {in({2, 6, 6}), in({3, 2, 4, 4}), in({3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2], 2, 1); }});
    cases.push_back({"conv2d_k5s1p2", {in({1, 7, 7}), in({2, 1, 5, 5}), in({2})},
                     [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2], 1, 2); }});
    cases.push_back({"conv2d_transpose_k2s2p0", {in({3, 4, 4}), in({3, 2, 2, 2}), in({2})},
                     [](Tape& t, const std::vector<Var>& v) {
                         return t.conv2d_transpose(v[0], v[1], v[2], 2, 0);
                     }});
    cases.push_back({"conv2d_transpose_k3s1p1", {in({2, 5, 5}), in({2, 3, 3, 3}), in({3})},
                     [](Tape& t, const std::vector<Var>& v) {
                         return t.conv2d_transpose(v[0], v[1], v[2], 1, 1);
                     }});
    cases.push_back({"conv2d_transpose_k4s2p1", {in({2, 4, 4}), in({2, 2, 4, 4}), in({2})},
                     [](Tape& t, const std::vector<Var>& v) {
                         return t.conv2d_transpose(v[0], v[1], v[2], 2, 1);
                     }});
    cases.push_back({"bias_add", {in({3, 4, 4}), in({3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.bias_add(v[0], v[1]); }});
    cases.push_back({"concat_channels", {in({2, 4, 4}), in({3, 4, 4})},
                     [](Tape& t, const std::vector<Var>& v) { return t.concat_channels(v[0], v[1]); }});
    cases.push_back({"concat_channels_batched", {in({2, 2, 3, 3}), in({2, 4, 3, 3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.concat_channels(v[0], v[1]); }});
    cases.push_back({"group_norm", {in({4, 3, 3}), in({4}), in({4})},
                     [](Tape& t, const std::vector<Var>& v) {
                         return t.group_norm(v[0], v[1], v[2], 2);
                     }});
    cases.push_back({"upsample_nearest", {in({2, 3, 3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.upsample_nearest(v[0], 2); }});
    cases.push_back({"downsample_nearest", {in({2, 6, 6})},
                     [](Tape& t, const std::vector<Var>& v) { return t.downsample_nearest(v[0], 2); }});
    cases.push_back({"mse", {in({3, 3}), in({3, 3})},
                     [](Tape& t, const std::vector<Var>& v) { return t.mse(v[0], v[1]); }});
    cases.push_back({"softmax_cross_entropy", {in({7})},
                     [](Tape& t, const std::vector<Var>& v) {
                         return t.softmax_cross_entropy(v[0], 2);
                     }});
    {
        // Keep samples away from the clamp kinks so central differences see a
        // smooth function.
        Tensor x = in({3, 4});
        for (double& v : x.data) {
            if (std::abs(v - 0.6) < 0.02) v += 0.05;
            if (std::abs(v + 0.6) < 0.02) v -= 0.05;
        }
        cases.push_back({"clamp_exact", {x},
                         [](Tape& t, const std::vector<Var>& v) {
                             return t.clamp(v[0], -0.6, 0.6, ClampGrad::Exact);
                         }});
    }
    {
        Tensor x = in({2, 3, 3});
        Rng box(99);
        Tensor lo = box.uniform_tensor(x.shape, -0.8, -0.4);
        Tensor hi = box.uniform_tensor(x.shape, 0.4, 0.8);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            if (std::abs(x.data[i] - lo.data[i]) < 0.02) x.data[i] += 0.05;
            if (std::abs(x.data[i] - hi.data[i]) < 0.02) x.data[i] -= 0.05;
        }
        cases.push_back({"clamp_box_exact", {x},
                         [lo, hi](Tape& t, const std::vector<Var>& v) {
                             return t.clamp_box(v[0], lo, hi, ClampGrad::Exact);
                         }});
    }
    {
        Tensor v0 = in({6});
        v0.data[0] += 2.0;  // keep the norm well away from zero
        cases.push_back({"l2_normalize", {v0},
                         [](Tape& t, const std::vector<Var>& v) { return t.l2_normalize(v[0]); }});
    }
    cases.push_back({"squared_distance", {in({5}), in({5})},
                     [](Tape& t, const std::vector<Var>& v) { return t.squared_distance(v[0], v[1]); }});
    return cases;
}

}  // namespace

TEST_CASE("every registered op matches central finite differences") {
    for (const OpCase& c : registered_op_cases(2024)) check_case(c);
}

TEST_CASE("finite-difference agreement holds across random draws") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        for (const OpCase& c : registered_op_cases(seed)) check_case(c);
    }
}

TEST_CASE("silu at zero is zero") {
    Tape tape;
    Var x = tape.leaf(Tensor::from({1}, {0.0}));
    CHECK(tape.silu(x).value().item() == 0.0);
}

TEST_CASE("concatenate shape arithmetic, batched") {
    Tape tape;
    Var a = tape.constant(Tensor::zeros({2, 3, 4, 4}));
    Var b = tape.constant(Tensor::zeros({2, 5, 4, 4}));
    CHECK(tape.concat_channels(a, b).value().shape == std::vector<int>{2, 8, 4, 4});
}

TEST_CASE("identity-center convolution preserves an all-ones input") {
    Tape tape;
    Var x = tape.constant(Tensor::full({1, 3, 3}, 1.0));
    Tensor w = Tensor::zeros({1, 1, 3, 3});
    w.data[4] = 1.0;  // center tap
    Var out = tape.conv2d(x, tape.constant(w), tape.constant(Tensor::zeros({1})), 1, 1);
    for (double v : out.value().data) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("sum of squares backward") {
    Tape tape;
    Var w = tape.leaf(Tensor::from({2}, {1.0, 2.0}));
    Var loss = tape.sum(tape.mul(w, w));
    tape.backward(loss);
    const Tensor g = tape.grad(w);
    CHECK(g.data[0] == doctest::Approx(2.0));
    CHECK(g.data[1] == doctest::Approx(4.0));
}

TEST_CASE("unreachable leaves get zero gradients") {
    Tape tape;
    Var w = tape.leaf(Tensor::from({2}, {1.0, 2.0}));
    Var detached = tape.leaf(Tensor::from({3}, {5.0, 6.0, 7.0}));
    Var loss = tape.sum(tape.mul(w, w));
    tape.backward(loss);
    const Tensor g = tape.grad(detached);
    CHECK(g.shape == std::vector<int>{3});
    for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("random multi-parameter graph matches finite differences") {
    Rng rng(77);
    const Tensor a0 = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    const Tensor b0 = rng.uniform_tensor({3, 2}, -1.0, 1.0);
    const Tensor c0 = rng.uniform_tensor({2, 2}, -1.0, 1.0);
    const Tensor d0 = rng.uniform_tensor({2, 2}, -1.0, 1.0);
    const Tensor e0 = rng.uniform_tensor({4}, -1.0, 1.0);
    const Tensor target = rng.uniform_tensor({2, 2}, -1.0, 1.0);
    auto build = [&](const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& d,
                     const Tensor& e, Tape& tape, std::vector<Var>& leaves) {
        leaves = {tape.leaf(a), tape.leaf(b), tape.leaf(c), tape.leaf(d), tape.leaf(e)};
        Var m = tape.matmul(leaves[0], leaves[1]);
        Var s = tape.silu(m);
        Var u = tape.add(tape.mul(s, leaves[2]), leaves[3]);
        Var flat = tape.reshape(u, {4});
        Var mixed = tape.add(flat, tape.l2_normalize(leaves[4]));
        return tape.mse(tape.reshape(mixed, {2, 2}), tape.constant(target));
    };
    Tape tape;
    std::vector<Var> leaves;
    Var loss = build(a0, b0, c0, d0, e0, tape, leaves);
    tape.backward(loss);
    const Tensor inputs[5] = {a0, b0, c0, d0, e0};
    for (int i = 0; i < 5; ++i) {
        auto f = [&](const Tensor& probe) {
            Tape t2;
            std::vector<Var> l2;
            const Tensor& pa = i == 0 ? probe : a0;
            const Tensor& pb = i == 1 ? probe : b0;
            const Tensor& pc = i == 2 ? probe : c0;
            const Tensor& pd = i == 3 ? probe : d0;
            const Tensor& pe = i == 4 ? probe : e0;
            return build(pa, pb, pc, pd, pe, t2, l2).value().item();
        };
        const Tensor analytic = tape.grad(leaves[static_cast<std::size_t>(i)]);
        const Tensor fd = finite_difference_gradient(f, inputs[i]);
        for (std::size_t k = 0; k < analytic.data.size(); ++k) {
            const double err = std::abs(analytic.data[k] - fd.data[k]);
            CHECK(err <= 1e-5 * std::max({1.0, std::abs(analytic.data[k]), std::abs(fd.data[k])}));
        }
    }
}

TEST_CASE("concatenate backward splits the upstream gradient exactly") {
    Rng rng(5);
    const Tensor a0 = rng.uniform_tensor({2, 3, 3}, -1.0, 1.0);
    const Tensor b0 = rng.uniform_tensor({4, 3, 3}, -1.0, 1.0);
    const Tensor w = rng.uniform_tensor({6, 3, 3}, -1.0, 1.0);
    Tape tape;
    Var a = tape.leaf(a0);
    Var b = tape.leaf(b0);
    Var loss = tape.sum(tape.mul(tape.concat_channels(a, b), tape.constant(w)));
    tape.backward(loss);
    const Tensor ga = tape.grad(a);
    const Tensor gb = tape.grad(b);
    for (std::size_t i = 0; i < ga.data.size(); ++i) CHECK(ga.data[i] == w.data[i]);
    for (std::size_t i = 0; i < gb.data.size(); ++i) CHECK(gb.data[i] == w.data[i + ga.data.size()]);
}

TEST_CASE("straight-through clamp passes gradients through saturated pixels") {
    Tape tape;
    Var x = tape.leaf(Tensor::from({3}, {-2.0, 0.5, 2.0}));
    Var y = tape.clamp(x, 0.0, 1.0, ClampGrad::StraightThrough);
    tape.backward(tape.sum(y));
    for (double v : tape.grad(x).data) CHECK(v == 1.0);
    Tape tape2;
    Var x2 = tape2.leaf(Tensor::from({3}, {-2.0, 0.5, 2.0}));
    Var y2 = tape2.clamp(x2, 0.0, 1.0, ClampGrad::Exact);
    tape2.backward(tape2.sum(y2));
    const Tensor g = tape2.grad(x2);
    CHECK(g.data[0] == 0.0);
    CHECK(g.data[1] == 1.0);
    CHECK(g.data[2] == 0.0);
}

TEST_CASE("shape errors name the op and both shapes") {
    Tape tape;
    Var a = tape.constant(Tensor::zeros({2, 3}));
    Var b = tape.constant(Tensor::zeros({3, 3}));
    CHECK_THROWS_WITH_AS(tape.add(a, b), "add: shape mismatch [2,3] vs [3,3]", std::invalid_argument);
    Var x = tape.constant(Tensor::zeros({3, 8, 8}));
    Var w = tape.constant(Tensor::zeros({16, 4, 3, 3}));
    Var bias = tape.constant(Tensor::zeros({16}));
    CHECK_THROWS_AS(tape.conv2d(x, w, bias, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(tape.matmul(a, a), std::invalid_argument);
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    Var x = tape.leaf(Tensor::zeros({2, 2}));
    Var y = tape.scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(31);
    for (const OpCase& c : registered_op_cases(314)) {
        Tape tape;
        std::vector<Var> leaves;
        for (const Tensor& in : c.inputs) leaves.push_back(tape.leaf(in));
        Var out = c.build(tape, leaves);
        CHECK(out.value().all_finite());
    }
}
