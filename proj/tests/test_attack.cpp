#include <doctest.h>

#include <stdexcept>

#include "advrestore/attack.hpp"

using namespace advrestore;

namespace {

struct Fixture {
    RLDMModel rldm;
    EmbeddingModel surrogate;
    Dataset ds;

    Fixture() : ds(generate_synthetic_faces(3, 3, 6)) {
        Rng rng(100);
        AutoencoderConfig acfg;
        acfg.base_ch = 8;
        acfg.mid_ch = 8;
        UNetConfig ucfg;
        ucfg.base_ch = 8;
        ucfg.mid_ch = 12;
        rldm.ae = Autoencoder::create(acfg, rng);
        rldm.ae.freeze();
        rldm.unet = ConditionalUNet::create(ucfg, rng);
        rldm.sched = VarianceSchedule::linear(60, 1e-3, 0.05);
        rldm.sub = make_ddim_subsequence(60, 4);
        surrogate = EmbeddingModel::create(ModelRole::Surrogate, 101, 3, 32, rng);
    }

    AttackConfig fast_cfg(AttackVariant v) const {
        AttackConfig cfg;
        cfg.variant = v;
        cfg.max_iters = 4;
        cfg.curve_stride = 2;
        cfg.seed = 1234;
        return cfg;
    }
};

}  // namespace

TEST_CASE("clip_budget examples and contracts") {
    const Tensor anchor1 = Tensor::full({1, 1, 1}, 0.5);
    CHECK(clip_budget(Tensor::full({1, 1, 1}, 0.75), anchor1, 0.1).data[0] == doctest::Approx(0.6));

    const Tensor inside = Tensor::full({1, 1, 1}, 0.55);
    CHECK(clip_budget(inside, anchor1, 0.1).data[0] == doctest::Approx(0.55));

    const Tensor anchor2 = Tensor::full({1, 1, 1}, 0.05);
    CHECK(clip_budget(Tensor::full({1, 1, 1}, -0.2), anchor2, 0.1).data[0] == doctest::Approx(0.0));

    CHECK_THROWS_AS(clip_budget(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 3, 3}), 0.1),
                    std::invalid_argument);

    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor y = rng.uniform_tensor({1, 4, 4}, -0.5, 1.5);
        const Tensor anchor = rng.uniform_tensor({1, 4, 4}, 0.0, 1.0);
        const double rho = rng.uniform(0.01, 0.3);
        const Tensor out = clip_budget(y, anchor, rho);
        CHECK(out.max_abs_diff(anchor) <= rho + 1e-12);
        for (double v : out.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("adv_loss equals the embedding distance and vanishes at the target") {
    Fixture f;
    const Tensor x_t = f.ds.records[0].hq;
    CHECK(adv_loss(f.surrogate, x_t, x_t) == doctest::Approx(0.0));

    const Tensor x = f.ds.records[5].hq;
    const double direct = embedding_distance(f.surrogate.embed(x), f.surrogate.embed(x_t));
    CHECK(adv_loss(f.surrogate, x, x_t) == doctest::Approx(direct).epsilon(1e-12));

    Tape tape;
    Var xv = tape.leaf(x);
    const Tensor target_unit = normalize_phi(f.surrogate.embed(x_t));
    Var loss = adv_loss_var(tape, f.surrogate, xv, target_unit);
    CHECK(loss.value().item() == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("zero step size leaves the anchors untouched") {
    Fixture f;
    const Tensor& x_s = f.ds.records[1].degraded;
    const Tensor& x_t = f.ds.records[14].hq;

    AttackConfig cfg = f.fast_cfg(AttackVariant::Fim);
    cfg.step_size = 0.0;
    const AttackResult fim = fim_attack(x_s, x_t, f.surrogate, cfg);
    CHECK(fim.x_adv.max_abs_diff(x_s) == 0.0);
    for (std::size_t i = 1; i < fim.loss_trace.size(); ++i) {
        CHECK(fim.loss_trace[i] == fim.loss_trace[0]);
    }

    AttackConfig rcfg = f.fast_cfg(AttackVariant::AdvRestoreFim);
    rcfg.step_size = 0.0;
    const AttackResult adv = advrestore_attack(x_s, x_t, f.rldm, f.surrogate, rcfg);
    const RestoreResult rest = restore(x_s, f.rldm, rcfg.seed);
    CHECK(adv.x_ref.max_abs_diff(rest.x_restored) == 0.0);
    CHECK(adv.x_adv.max_abs_diff(clip_budget(rest.x_restored, rest.x_restored, rcfg.budget)) == 0.0);
    for (std::size_t i = 1; i < adv.loss_trace.size(); ++i) {
        CHECK(adv.loss_trace[i] == adv.loss_trace[0]);
    }
}

TEST_CASE("attack results satisfy the budget and validity invariants") {
    Fixture f;
    const Tensor& x_s = f.ds.records[2].degraded;
    const Tensor& x_t = f.ds.records[13].hq;
    for (AttackVariant v : {AttackVariant::Fim, AttackVariant::Dfanet, AttackVariant::AdvRestoreFim,
                            AttackVariant::AdvRestoreDfanet}) {
        const AttackConfig cfg = f.fast_cfg(v);
        const AttackResult r = run_attack(x_s, x_t, f.rldm, f.surrogate, cfg);
        CHECK(r.budget_linf <= cfg.budget + 1e-9);
        CHECK(r.x_adv.max_abs_diff(r.x_ref) <= cfg.budget + 1e-9);
        for (double px : r.x_adv.data) {
            CHECK(px >= 0.0);
            CHECK(px <= 1.0);
        }
        CHECK(r.iterations_run == cfg.max_iters);
        CHECK(static_cast<int>(r.loss_trace.size()) == cfg.max_iters);
        CHECK(r.curve_iters.front() == 0);
        CHECK(r.curve_iters.back() == cfg.max_iters);
    }
}

TEST_CASE("attacks are bit-deterministic given the seed") {
    Fixture f;
    const Tensor& x_s = f.ds.records[4].degraded;
    const Tensor& x_t = f.ds.records[16].hq;
    for (AttackVariant v : {AttackVariant::Fim, AttackVariant::AdvRestoreDfanet}) {
        const AttackConfig cfg = f.fast_cfg(v);
        const AttackResult a = run_attack(x_s, x_t, f.rldm, f.surrogate, cfg);
        const AttackResult b = run_attack(x_s, x_t, f.rldm, f.surrogate, cfg);
        CHECK(a.x_adv.max_abs_diff(b.x_adv) == 0.0);
        CHECK(a.loss_trace == b.loss_trace);
        AttackConfig cfg2 = cfg;
        cfg2.seed += 1;
        const AttackResult c = run_attack(x_s, x_t, f.rldm, f.surrogate, cfg2);
        if (v == AttackVariant::AdvRestoreDfanet) {
            CHECK(a.x_adv.max_abs_diff(c.x_adv) > 0.0);  // restore noise differs
        }
    }
}

TEST_CASE("advrestore perturbs only the final reverse step") {
    // All earlier timesteps are bit-identical to plain restore with the same
    // seed: the attack's anchor IS the plain restoration, and the saved
    // (eps, z) state regenerates it exactly.
    Fixture f;
    const Tensor& x_s = f.ds.records[7].degraded;
    const RestoreResult rest = restore(x_s, f.rldm, 555);
    AttackConfig cfg = f.fast_cfg(AttackVariant::AdvRestoreFim);
    cfg.seed = 555;
    const AttackResult r = advrestore_attack(x_s, f.ds.records[15].hq, f.rldm, f.surrogate, cfg);
    CHECK(r.x_ref.max_abs_diff(rest.x_restored) == 0.0);
}

TEST_CASE("attack config validation") {
    AttackConfig cfg;
    cfg.max_iters = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = AttackConfig{};
    cfg.budget = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = AttackConfig{};
    cfg.dropout_probability = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = AttackConfig{};
    cfg.step_size = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK(variant_from_name("advrestore-fim") == AttackVariant::AdvRestoreFim);
    CHECK_THROWS_AS(variant_from_name("nope"), std::invalid_argument);
    CHECK(variant_name(AttackVariant::Dfanet) == "dfanet");
}

TEST_CASE("white-box loss decreases under the attack on an untrained surrogate") {
    Fixture f;
    const Tensor& x_s = f.ds.records[3].degraded;
    const Tensor& x_t = f.ds.records[17].hq;
    AttackConfig cfg = f.fast_cfg(AttackVariant::Fim);
    cfg.max_iters = 30;
    cfg.step_size = 2.0 / 255.0;
    const AttackResult r = fim_attack(x_s, x_t, f.surrogate, cfg);
    CHECK(r.loss_trace.back() < r.loss_trace.front());
}
