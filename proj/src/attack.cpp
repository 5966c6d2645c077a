#include "advrestore/attack.hpp"

#include <cmath>
#include <stdexcept>

namespace advrestore {

std::string variant_name(AttackVariant v) {
    switch (v) {
        case AttackVariant::Fim: return "fim";
        case AttackVariant::Dfanet: return "dfanet";
        case AttackVariant::AdvRestoreFim: return "advrestore-fim";
        case AttackVariant::AdvRestoreDfanet: return "advrestore-dfanet";
    }
    throw std::logic_error("variant_name: unknown variant");
}

AttackVariant variant_from_name(const std::string& name) {
    if (name == "fim") return AttackVariant::Fim;
    if (name == "dfanet") return AttackVariant::Dfanet;
    if (name == "advrestore-fim") return AttackVariant::AdvRestoreFim;
    if (name == "advrestore-dfanet") return AttackVariant::AdvRestoreDfanet;
    throw std::invalid_argument("unknown attack variant '" + name + "'");
}

void AttackConfig::validate() const {
    if (step_size < 0.0) throw std::invalid_argument("attack config: step size must be >= 0");
    if (max_iters < 1) throw std::invalid_argument("attack config: max iterations must be >= 1");
    if (!(budget > 0.0 && budget < 1.0)) {
        throw std::invalid_argument("attack config: budget must lie in (0,1) on the pixel scale");
    }
    if (dropout_probability < 0.0 || dropout_probability >= 1.0) {
        throw std::invalid_argument("attack config: dropout probability must lie in [0,1)");
    }
    if (curve_stride < 1) throw std::invalid_argument("attack config: curve stride must be >= 1");
}

Tensor clip_budget(const Tensor& y, const Tensor& anchor, double rho) {
    require_same_shape("clip_budget", y, anchor);
    Tensor out = y;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double lo = anchor.data[i] - rho;
        const double hi = anchor.data[i] + rho;
        double v = out.data[i] < lo ? lo : (out.data[i] > hi ? hi : out.data[i]);
        out.data[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return out;
}

Var clip_budget_var(Tape& tape, Var y, const Tensor& anchor, double rho, ClampGrad mode) {
    require_same_shape("clip_budget", y.value(), anchor);
    Tensor lo = anchor, hi = anchor;
    for (std::size_t i = 0; i < lo.data.size(); ++i) {
        lo.data[i] = std::max(lo.data[i] - rho, 0.0);
        hi.data[i] = std::min(hi.data[i] + rho, 1.0);
    }
    return tape.clamp_box(y, lo, hi, mode);
}

Var adv_loss_var(Tape& tape, EmbeddingModel& surrogate, Var x, const Tensor& target_unit,
                 const DropoutSpec* dropout) {
    BoundParams bp(/*as_constants=*/true);
    Var emb = surrogate.embed_var(tape, bp, x, dropout);
    return tape.squared_distance(tape.l2_normalize(emb), tape.constant(target_unit));
}

double adv_loss(EmbeddingModel& surrogate, const Tensor& x_adv, const Tensor& x_target) {
    return embedding_distance(surrogate.embed(x_adv), surrogate.embed(x_target));
}

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

bool curve_point(const AttackConfig& cfg, int completed) {
    return completed % cfg.curve_stride == 0 && completed < cfg.max_iters;
}

}  // namespace

AttackResult advrestore_attack(const Tensor& x_s, const Tensor& x_t, RLDMModel& rldm,
                               EmbeddingModel& surrogate, const AttackConfig& cfg) {
    cfg.validate();
    const bool use_dropout =
        cfg.variant == AttackVariant::AdvRestoreDfanet || cfg.variant == AttackVariant::Dfanet;
    Rng drop_rng = Rng(cfg.seed).fork("dfanet-mask");
    DropoutSpec dropout{cfg.dropout_probability, &drop_rng};

    const RestoreResult rest = restore(x_s, rldm, cfg.seed);
    const Tensor& anchor = rest.x_restored;
    const Tensor target_unit = normalize_phi(surrogate.embed(x_t));

    AttackResult res;
    res.x_ref = anchor;
    Tensor eps = rest.eps_final;
    const Tensor z_pre = rest.z_prefinal;
    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        Tape tape;
        BoundParams bp(/*as_constants=*/true);
        Var eps_leaf = tape.leaf(eps);
        Var z = ddim_step_var(tape, eps_leaf, tape.constant(z_pre), rest.r_final, 0, std::nullopt,
                              rldm.sched);
        Var x = rldm.ae.decode_var(tape, bp, z, cfg.clamp_grad, /*clamp_output=*/true);
        Var x_clipped = clip_budget_var(tape, x, anchor, cfg.budget, cfg.clamp_grad);
        Var loss = adv_loss_var(tape, surrogate, x_clipped, target_unit,
                                use_dropout ? &dropout : nullptr);
        const double loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) {
            res.iterations_run = iter - 1;
            throw std::runtime_error("advrestore_attack: non-finite loss at iteration " +
                                     std::to_string(iter) + " after " +
                                     std::to_string(res.loss_trace.size()) + " recorded losses");
        }
        if (curve_point(cfg, iter - 1)) {
            res.curve_iters.push_back(iter - 1);
            res.curve_distance.push_back(
                embedding_distance(surrogate.embed(x_clipped.value()), surrogate.embed(x_t)));
        }
        tape.backward(loss);
        const Tensor g = tape.grad(eps_leaf);
        res.loss_trace.push_back(loss_value);
        for (std::size_t i = 0; i < eps.data.size(); ++i) {
            eps.data[i] -= cfg.step_size * sign_of(g.data[i]);
        }
    }
    const Tensor z_final = ddim_step(eps, z_pre, rest.r_final, 0, std::nullopt, rldm.sched);
    res.x_adv = clip_budget(rldm.ae.decode(z_final), anchor, cfg.budget);
    res.iterations_run = cfg.max_iters;
    res.budget_linf = res.x_adv.max_abs_diff(anchor);
    res.curve_iters.push_back(cfg.max_iters);
    res.curve_distance.push_back(embedding_distance(surrogate.embed(res.x_adv), surrogate.embed(x_t)));
    return res;
}

AttackResult fim_attack(const Tensor& x_s, const Tensor& x_t, EmbeddingModel& surrogate,
                        const AttackConfig& cfg) {
    cfg.validate();
    const bool use_dropout =
        cfg.variant == AttackVariant::Dfanet || cfg.variant == AttackVariant::AdvRestoreDfanet;
    Rng drop_rng = Rng(cfg.seed).fork("dfanet-mask");
    DropoutSpec dropout{cfg.dropout_probability, &drop_rng};

    const Tensor target_unit = normalize_phi(surrogate.embed(x_t));
    AttackResult res;
    res.x_ref = x_s;
    Tensor x_cur = x_s;
    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        Tape tape;
        Var x_leaf = tape.leaf(x_cur);
        Var loss = adv_loss_var(tape, surrogate, x_leaf, target_unit, use_dropout ? &dropout : nullptr);
        const double loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) {
            res.iterations_run = iter - 1;
            throw std::runtime_error("fim_attack: non-finite loss at iteration " + std::to_string(iter) +
                                     " after " + std::to_string(res.loss_trace.size()) +
                                     " recorded losses");
        }
        if (curve_point(cfg, iter - 1)) {
            res.curve_iters.push_back(iter - 1);
            res.curve_distance.push_back(embedding_distance(surrogate.embed(x_cur), surrogate.embed(x_t)));
        }
        tape.backward(loss);
        const Tensor g = tape.grad(x_leaf);
        res.loss_trace.push_back(loss_value);
        for (std::size_t i = 0; i < x_cur.data.size(); ++i) {
            x_cur.data[i] -= cfg.step_size * sign_of(g.data[i]);
        }
        x_cur = clip_budget(x_cur, x_s, cfg.budget);
    }
    res.x_adv = x_cur;
    res.iterations_run = cfg.max_iters;
    res.budget_linf = res.x_adv.max_abs_diff(x_s);
    res.curve_iters.push_back(cfg.max_iters);
    res.curve_distance.push_back(embedding_distance(surrogate.embed(res.x_adv), surrogate.embed(x_t)));
    return res;
}

AttackResult run_attack(const Tensor& x_s, const Tensor& x_t, RLDMModel& rldm,
                        EmbeddingModel& surrogate, const AttackConfig& cfg) {
    switch (cfg.variant) {
        case AttackVariant::Fim:
        case AttackVariant::Dfanet:
            return fim_attack(x_s, x_t, surrogate, cfg);
        case AttackVariant::AdvRestoreFim:
        case AttackVariant::AdvRestoreDfanet:
            return advrestore_attack(x_s, x_t, rldm, surrogate, cfg);
    }
    throw std::logic_error("run_attack: unknown variant");
}

}  // namespace advrestore
