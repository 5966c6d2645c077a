#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advrestore/facerec.hpp"
#include "advrestore/rldm.hpp"

namespace advrestore {

enum class AttackVariant { Fim, Dfanet, AdvRestoreFim, AdvRestoreDfanet };

std::string variant_name(AttackVariant v);
AttackVariant variant_from_name(const std::string& name);

struct AttackConfig {
    double step_size = 1.0 / 255.0;  // beta
    int max_iters = 200;             // N_max
    double budget = 8.0 / 255.0;     // rho, L-inf in pixel scale
    std::uint64_t seed = 0;
    AttackVariant variant = AttackVariant::Fim;
    double dropout_probability = 0.1;  // DFANet variants only
    // Straight-through keeps the budget clamp from zeroing updates; the
    // exact mode exists for finite-difference checks.
    ClampGrad clamp_grad = ClampGrad::StraightThrough;
    // Iterations at which white-box success is sampled for the
    // ASR-vs-iteration curve (always includes 0 and max_iters).
    int curve_stride = 20;

    void validate() const;
};

struct AttackResult {
    Tensor x_adv;
    Tensor x_ref;                     // clip anchor: restored image or source
    std::vector<double> loss_trace;   // loss before each update
    int iterations_run = 0;
    double budget_linf = 0.0;         // max |x_adv - x_ref|
    std::vector<int> curve_iters;     // checkpoints for the success curve
    std::vector<double> curve_distance;  // surrogate distance to target at each checkpoint
};

// Elementwise clamp to [anchor-rho, anchor+rho], then to the valid [0,1]
// pixel range.
Tensor clip_budget(const Tensor& y, const Tensor& anchor, double rho);
Var clip_budget_var(Tape& tape, Var y, const Tensor& anchor, double rho, ClampGrad mode);

// || phi(F(x)) - target_unit ||^2 on the tape; target_unit is phi(F(x_t)).
Var adv_loss_var(Tape& tape, EmbeddingModel& surrogate, Var x, const Tensor& target_unit,
                 const DropoutSpec* dropout = nullptr);
double adv_loss(EmbeddingModel& surrogate, const Tensor& x_adv, const Tensor& x_target);

// Full pipeline: restore x_s, then sign-gradient updates on the UNet output
// at the final reverse timestep, decoding through the frozen decoder.
AttackResult advrestore_attack(const Tensor& x_s, const Tensor& x_t, RLDMModel& rldm,
                               EmbeddingModel& surrogate, const AttackConfig& cfg);

// Pixel-space iterative sign-gradient baseline anchored at x_s.
AttackResult fim_attack(const Tensor& x_s, const Tensor& x_t, EmbeddingModel& surrogate,
                        const AttackConfig& cfg);

// Dispatch on cfg.variant; DFANet variants wrap the surrogate with
// per-iteration dropout.
AttackResult run_attack(const Tensor& x_s, const Tensor& x_t, RLDMModel& rldm,
                        EmbeddingModel& surrogate, const AttackConfig& cfg);

}  // namespace advrestore
