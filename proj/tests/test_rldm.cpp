#include <doctest.h>

#include <stdexcept>

#include <cstdio>

#include "advrestore/rldm.hpp"

using namespace advrestore;

namespace {

RLDMModel tiny_untrained_model(std::uint64_t seed) {
    Rng rng(seed);
    AutoencoderConfig acfg;
    acfg.base_ch = 8;
    acfg.mid_ch = 8;
    UNetConfig ucfg;
    ucfg.base_ch = 8;
    ucfg.mid_ch = 12;
    RLDMModel m;
    m.ae = Autoencoder::create(acfg, rng);
    m.ae.freeze();
    m.unet = ConditionalUNet::create(ucfg, rng);
    m.sched = VarianceSchedule::linear(100, 1e-3, 0.05);
    m.sub = make_ddim_subsequence(100, 5);
    return m;
}

}  // namespace

TEST_CASE("autoencoder shape contracts") {
    Rng rng(1);
    AutoencoderConfig cfg;
    Autoencoder ae = Autoencoder::create(cfg, rng);
    const Tensor img = rng.uniform_tensor({1, 32, 32}, 0.0, 1.0);
    const Tensor z = ae.encode(img);
    CHECK(z.shape == std::vector<int>{4, 8, 8});
    CHECK(ae.encode(img).max_abs_diff(z) == 0.0);
    const Tensor y = ae.decode(z);
    CHECK(y.shape == img.shape);
    for (double v : y.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(ae.decode(z).max_abs_diff(y) == 0.0);
    CHECK_THROWS_AS(ae.encode(Tensor::zeros({1, 16, 16})), std::invalid_argument);
    CHECK_THROWS_AS(ae.decode(Tensor::zeros({4, 4, 4})), std::invalid_argument);
}

TEST_CASE("unet output matches the noisy-latent shape and sees its condition") {
    Rng rng(2);
    UNetConfig cfg;
    cfg.base_ch = 8;
    cfg.mid_ch = 12;
    ConditionalUNet unet = ConditionalUNet::create(cfg, rng);
    const Tensor z_cond = rng.normal_tensor({4, 8, 8});
    const Tensor z_noisy = rng.normal_tensor({4, 8, 8});
    const Tensor eps = unet.forward(z_cond, z_noisy, 10);
    CHECK(eps.shape == z_noisy.shape);
    CHECK(unet.forward(z_cond, z_noisy, 10).max_abs_diff(eps) == 0.0);
    // Conditioning is live: a different condition changes the output.
    const Tensor z_cond2 = rng.normal_tensor({4, 8, 8});
    CHECK(unet.forward(z_cond2, z_noisy, 10).max_abs_diff(eps) > 0.0);
    // Timestep is live too.
    CHECK(unet.forward(z_cond, z_noisy, 90).max_abs_diff(eps) > 0.0);
    CHECK_THROWS_AS(unet.forward(Tensor::zeros({4, 8, 8}), Tensor::zeros({4, 4, 4}), 1),
                    std::invalid_argument);
}

TEST_CASE("unet gradient w.r.t. the noisy latent matches finite differences") {
    Rng rng(3);
    UNetConfig cfg;
    cfg.base_ch = 6;
    cfg.mid_ch = 8;
    cfg.gn_groups = 2;
    ConditionalUNet unet = ConditionalUNet::create(cfg, rng);
    const Tensor z_cond = rng.normal_tensor({4, 4, 4});
    const Tensor z_noisy = rng.normal_tensor({4, 4, 4});
    Tape tape;
    BoundParams bp(true);
    Var zn = tape.leaf(z_noisy);
    Var eps = unet.forward_var(tape, bp, tape.constant(z_cond), zn, 3);
    Var loss = tape.mse(eps, tape.constant(Tensor::zeros(eps.value().shape)));
    tape.backward(loss);
    const Tensor analytic = tape.grad(zn);
    auto f = [&](const Tensor& probe) {
        const Tensor out = unet.forward(z_cond, probe, 3);
        double acc = 0.0;
        for (double v : out.data) acc += v * v;
        return acc / static_cast<double>(out.data.size());
    };
    const Tensor fd = finite_difference_gradient(f, z_noisy);
    for (std::size_t i = 0; i < analytic.data.size(); ++i) {
        CHECK(std::abs(analytic.data[i] - fd.data[i]) <=
              1e-4 * std::max({1.0, std::abs(analytic.data[i]), std::abs(fd.data[i])}));
    }
}

TEST_CASE("training guards") {
    RLDMModel m = tiny_untrained_model(4);
    const Dataset ds = generate_synthetic_faces(5, 3, 6);
    Adam opt(m.unet.params(), 1e-3);
    Rng rng(5);

    SUBCASE("unfrozen autoencoder is rejected") {
        set_trainable(m.ae.params(), true);
        std::vector<const ImageRecord*> batch = {&ds.records[0]};
        CHECK_THROWS_WITH_AS(train_rldm_step(m, batch, opt, rng), doctest::Contains("frozen"),
                             std::runtime_error);
    }
    SUBCASE("frozen encoder/decoder stay bit-identical over a step") {
        const std::uint64_t before = parameters_digest(m.ae.params());
        const std::uint64_t unet_before = parameters_digest(m.unet.params());
        std::vector<const ImageRecord*> batch = {&ds.records[0], &ds.records[1]};
        const double loss = train_rldm_step(m, batch, opt, rng);
        CHECK(loss > 0.0);
        CHECK(parameters_digest(m.ae.params()) == before);
        CHECK(parameters_digest(m.unet.params()) != unet_before);
    }
    SUBCASE("empty batch is rejected") {
        std::vector<const ImageRecord*> batch;
        CHECK_THROWS_AS(train_rldm_step(m, batch, opt, rng), std::invalid_argument);
    }
}

TEST_CASE("restore runs the subsequence and is seed-deterministic") {
    RLDMModel m = tiny_untrained_model(6);
    Rng rng(7);
    const Tensor x = rng.uniform_tensor({1, 32, 32}, 0.0, 1.0);

    m.unet.forward_calls = 0;
    m.ae.decode_calls = 0;
    m.ae.encode_calls = 0;
    const RestoreResult a = restore(x, m, 99);
    CHECK(m.unet.forward_calls == m.sub.size());
    CHECK(m.ae.decode_calls == 1);
    CHECK(m.ae.encode_calls == 1);
    CHECK(a.r_final == m.sub.steps.front());

    const RestoreResult b = restore(x, m, 99);
    CHECK(a.x_restored.max_abs_diff(b.x_restored) == 0.0);
    CHECK(a.eps_final.max_abs_diff(b.eps_final) == 0.0);
    CHECK(a.z_prefinal.max_abs_diff(b.z_prefinal) == 0.0);

    const RestoreResult c = restore(x, m, 100);
    CHECK(a.x_restored.max_abs_diff(c.x_restored) > 0.0);

    // The saved (eps, z) state reproduces the final latent exactly.
    const Tensor z_check = ddim_step(a.eps_final, a.z_prefinal, a.r_final, 0, std::nullopt, m.sched);
    CHECK(z_check.max_abs_diff(a.z_final) == 0.0);

    SUBCASE("empty subsequence fails") {
        m.sub.steps.clear();
        CHECK_THROWS_AS(restore(x, m, 1), std::invalid_argument);
    }
}

TEST_CASE("rldm checkpoints round trip bit-exactly") {
    RLDMModel m = tiny_untrained_model(8);
    m.ae.latent_shift = 0.123;
    m.ae.latent_scale = 1.7;
    const std::string path = "/tmp/advrestore_rldm_test.ckpt";
    save_rldm(path, m);
    RLDMModel back = load_rldm(path);
    CHECK(back.ae.frozen());
    CHECK(back.ae.latent_shift == m.ae.latent_shift);
    CHECK(back.ae.latent_scale == m.ae.latent_scale);
    CHECK(back.sched.n_steps == m.sched.n_steps);
    CHECK(back.sub.steps == m.sub.steps);
    Rng rng(9);
    const Tensor img = rng.uniform_tensor({1, 32, 32}, 0.0, 1.0);
    CHECK(back.ae.encode(img).max_abs_diff(m.ae.encode(img)) == 0.0);
    const Tensor z = m.ae.encode(img);
    CHECK(back.ae.decode(z).max_abs_diff(m.ae.decode(z)) == 0.0);
    const Tensor zc = rng.normal_tensor({4, 8, 8});
    const Tensor zn = rng.normal_tensor({4, 8, 8});
    CHECK(back.unet.forward(zc, zn, 5).max_abs_diff(m.unet.forward(zc, zn, 5)) == 0.0);
    std::remove(path.c_str());
}
