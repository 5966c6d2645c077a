#pragma once

#include <optional>
#include <vector>

#include "advrestore/autodiff.hpp"
#include "advrestore/tensor.hpp"

namespace advrestore {

// Beta/alpha/alpha-bar tables over timesteps 1..n_steps, with the r=0
// boundary fixed at alpha_bar(0) = 1.
struct VarianceSchedule {
    int n_steps = 0;
    std::vector<double> betas;       // beta_r at index r-1
    std::vector<double> alphas;      // 1 - beta_r
    std::vector<double> alpha_bars;  // prod of alphas up to r

    static VarianceSchedule linear(int n_steps, double beta_start, double beta_end);
    static VarianceSchedule from_betas(std::vector<double> betas);

    double beta(int r) const;
    double alpha(int r) const;
    double alpha_bar(int r) const;  // alpha_bar(0) == 1
};

// Strictly increasing subset of 1..n_steps, traversed high-to-low at
// inference time.
struct DdimSubsequence {
    std::vector<int> steps;

    int size() const { return static_cast<int>(steps.size()); }
    // Predecessor of steps[i] within the subsequence, 0 for the first entry.
    int prev(int index) const { return index == 0 ? 0 : steps[static_cast<std::size_t>(index) - 1]; }
};

DdimSubsequence make_ddim_subsequence(int n_steps, int m);

// z_r = sqrt(abar_r) z0 + sqrt(1 - abar_r) xi
Tensor q_sample(const Tensor& z0, int r, const Tensor& xi, const VarianceSchedule& sched);

// sigma between r and its immediate predecessor r-1.
double sigma(int r, const VarianceSchedule& sched);
// Generalized to an arbitrary earlier timestep (0 allowed), as used when
// stepping along a DDIM subsequence.
double sigma_between(int r, int r_prev, const VarianceSchedule& sched);

// One reverse step: from z at timestep r to the latent at r_prev. `noise` is
// consumed only when sigma > 0; pass std::nullopt for deterministic steps.
Tensor ddim_step(const Tensor& eps_theta, const Tensor& z, int r, int r_prev,
                 const std::optional<Tensor>& noise, const VarianceSchedule& sched);

// Tape version used inside the attack loop, differentiable w.r.t. eps_theta.
Var ddim_step_var(Tape& tape, Var eps_theta, Var z, int r, int r_prev,
                  const std::optional<Tensor>& noise, const VarianceSchedule& sched);

// Sinusoidal timestep encoding; `dim` must be even and >= 2.
Tensor time_embed(int r, int dim);

}  // namespace advrestore
