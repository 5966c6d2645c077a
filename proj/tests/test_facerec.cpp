#include <doctest.h>

#include <stdexcept>

#include "advrestore/facerec.hpp"
#include "advrestore/rng.hpp"

using namespace advrestore;

TEST_CASE("phi is L2 normalization") {
    const Tensor v = Tensor::from({2}, {3.0, 4.0});
    const Tensor u = normalize_phi(v);
    CHECK(u.data[0] == doctest::Approx(0.6));
    CHECK(u.data[1] == doctest::Approx(0.8));

    const Tensor unit = Tensor::from({2}, {0.0, 1.0});
    CHECK(normalize_phi(unit).max_abs_diff(unit) == doctest::Approx(0.0));

    Rng rng(1);
    const Tensor w = rng.normal_tensor({8});
    for (double c : {0.5, 2.0, 117.0}) {
        CHECK(normalize_phi(c * w).max_abs_diff(normalize_phi(w)) < 1e-12);
    }
    CHECK_THROWS_AS(normalize_phi(Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("embedding distance properties") {
    const Tensor a = Tensor::from({3}, {1.0, 0.0, 0.0});
    const Tensor b = Tensor::from({3}, {0.0, 2.0, 0.0});
    CHECK(embedding_distance(a, a) == doctest::Approx(0.0));
    CHECK(embedding_distance(a, b) == doctest::Approx(2.0));
    const Tensor na = Tensor::from({3}, {-5.0, 0.0, 0.0});
    CHECK(embedding_distance(a, na) == doctest::Approx(4.0));
    CHECK_THROWS_AS(embedding_distance(a, Tensor::zeros({4})), std::invalid_argument);

    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = rng.normal_tensor({6});
        const Tensor y = rng.normal_tensor({6});
        const double d = embedding_distance(x, y);
        CHECK(d >= 0.0);
        CHECK(d <= 4.0 + 1e-12);
        CHECK(d == doctest::Approx(embedding_distance(y, x)).epsilon(1e-12));
    }
}

TEST_CASE("threshold calibration is the FAR quantile") {
    std::vector<double> d;
    for (int i = 0; i < 100; ++i) d.push_back(1.0 + i);  // 1..100
    const VerificationThreshold t = calibrate_threshold(d, 0.01);
    CHECK(t.threshold == doctest::Approx(2.0));  // exactly one distance (1.0) below
    int below = 0;
    for (double x : d) {
        if (x < t.threshold) ++below;
    }
    CHECK(below == 1);

    const VerificationThreshold full = calibrate_threshold(d, 1.0);
    CHECK(full.threshold >= 100.0);

    CHECK(calibrate_threshold(d, 0.01).threshold == calibrate_threshold(d, 0.01).threshold);
    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>(50, 1.0), 0.01), std::invalid_argument);

    SUBCASE("monotone in the FAR target") {
        Rng rng(3);
        std::vector<double> rd;
        for (int i = 0; i < 250; ++i) rd.push_back(rng.uniform(0.0, 4.0));
        double prev = 0.0;
        for (double far : {0.0, 0.01, 0.05, 0.2, 0.5, 1.0}) {
            const double thr = calibrate_threshold(rd, far).threshold;
            CHECK(thr >= prev);
            prev = thr;
        }
    }
}

TEST_CASE("embedding model contracts") {
    Rng rng(4);
    EmbeddingModel m = EmbeddingModel::create(ModelRole::Surrogate, 101, 5, 32, rng);
    const Tensor img = rng.uniform_tensor({1, 32, 32}, 0.0, 1.0);
    const Tensor e1 = m.embed(img);
    const Tensor e2 = m.embed(img);
    CHECK(e1.shape == std::vector<int>{m.arch.embed_dim});
    CHECK(e1.max_abs_diff(e2) == 0.0);
    CHECK_THROWS_AS(m.embed(Tensor::zeros({1, 16, 16})), std::invalid_argument);
}

TEST_CASE("architecture seeds produce distinct architectures") {
    const EmbeddingArch a = EmbeddingArch::from_seed(101);
    const EmbeddingArch b = EmbeddingArch::from_seed(202);
    const EmbeddingArch c = EmbeddingArch::from_seed(303);
    auto differs = [](const EmbeddingArch& x, const EmbeddingArch& y) {
        return x.n_blocks != y.n_blocks || x.base_ch != y.base_ch || x.kernel != y.kernel ||
               x.embed_dim != y.embed_dim;
    };
    CHECK(differs(a, b));
    CHECK(differs(a, c));
    CHECK(differs(b, c));
}

TEST_CASE("embedding gradient w.r.t. the image matches finite differences") {
    Rng rng(5);
    EmbeddingModel m = EmbeddingModel::create(ModelRole::Surrogate, 7, 4, 16, rng);
    const Tensor img = rng.uniform_tensor({1, 16, 16}, 0.05, 0.95);
    Tape tape;
    BoundParams bp(true);
    Var x = tape.leaf(img);
    Var emb = m.embed_var(tape, bp, x);
    Var loss = tape.squared_distance(emb, tape.constant(Tensor::zeros(emb.value().shape)));
    tape.backward(loss);
    const Tensor analytic = tape.grad(x);
    auto f = [&](const Tensor& probe) {
        const Tensor e = m.embed(probe);
        double acc = 0.0;
        for (double v : e.data) acc += v * v;
        return acc;
    };
    // Spot-check a sample of coordinates; the full image would be slow.
    Rng pick(6);
    const Tensor fd = finite_difference_gradient(f, img, 1e-5);
    int checked = 0;
    for (int k = 0; k < 40; ++k) {
        const std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(img.data.size()) - 1));
        const double a = analytic.data[i], g = fd.data[i];
        CHECK(std::abs(a - g) <= 1e-4 * std::max({1.0, std::abs(a), std::abs(g)}));
        ++checked;
    }
    CHECK(checked == 40);
}

TEST_CASE("dropout wrap determinism and p=0 no-op") {
    Rng rng(8);
    EmbeddingModel m = EmbeddingModel::create(ModelRole::Surrogate, 9, 4, 16, rng);
    const Tensor img = rng.uniform_tensor({1, 16, 16}, 0.0, 1.0);

    SUBCASE("p=0 equals the unwrapped model") {
        Rng drng(1);
        DropoutSpec spec{0.0, &drng};
        Tape tape;
        BoundParams bp(true);
        const Tensor with = m.embed_var(tape, bp, tape.constant(img), &spec).value();
        CHECK(with.max_abs_diff(m.embed(img)) == 0.0);
    }
    SUBCASE("same seed gives the same mask sequence") {
        auto run = [&](std::uint64_t seed) {
            Rng drng(seed);
            DropoutSpec spec{0.3, &drng};
            std::vector<Tensor> outs;
            for (int i = 0; i < 3; ++i) {
                Tape tape;
                BoundParams bp(true);
                outs.push_back(m.embed_var(tape, bp, tape.constant(img), &spec).value());
            }
            return outs;
        };
        const auto a = run(42);
        const auto b = run(42);
        const auto c = run(43);
        for (int i = 0; i < 3; ++i) CHECK(a[static_cast<std::size_t>(i)].max_abs_diff(b[static_cast<std::size_t>(i)]) == 0.0);
        bool any_diff = false;
        for (int i = 0; i < 3; ++i) {
            any_diff = any_diff || a[static_cast<std::size_t>(i)].max_abs_diff(c[static_cast<std::size_t>(i)]) > 0.0;
        }
        CHECK(any_diff);
    }
    SUBCASE("invalid probability") {
        Rng drng(1);
        DropoutSpec spec{1.0, &drng};
        Tape tape;
        BoundParams bp(true);
        CHECK_THROWS_AS(m.embed_var(tape, bp, tape.constant(img), &spec), std::invalid_argument);
    }
}

TEST_CASE("embedding checkpoints round trip") {
    Rng rng(10);
    EmbeddingModel m = EmbeddingModel::create(ModelRole::Victim, 202, 6, 32, rng);
    const std::string path = "/tmp/advrestore_emb_test.ckpt";
    save_embedding_model(path, m);
    EmbeddingModel back = load_embedding_model(path);
    CHECK(back.arch_seed == m.arch_seed);
    CHECK(back.role == m.role);
    const Tensor img = rng.uniform_tensor({1, 32, 32}, 0.0, 1.0);
    CHECK(back.embed(img).max_abs_diff(m.embed(img)) == 0.0);
    std::remove(path.c_str());
}
