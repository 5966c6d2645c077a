#include "advrestore/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace advrestore {

namespace {

void validate_schedule(const VarianceSchedule& s) {
    if (s.n_steps < 1) throw std::invalid_argument("variance schedule: need at least one timestep");
    double prev_bar = 1.0;
    for (int r = 1; r <= s.n_steps; ++r) {
        const double b = s.betas[static_cast<std::size_t>(r - 1)];
        if (!(b > 0.0 && b < 1.0)) {
            throw std::invalid_argument("variance schedule: beta_" + std::to_string(r) + " = " +
                                        std::to_string(b) + " outside (0,1)");
        }
        const double bar = s.alpha_bars[static_cast<std::size_t>(r - 1)];
        if (!(bar < prev_bar)) {
            throw std::invalid_argument("variance schedule: alpha_bar not strictly decreasing at r=" +
                                        std::to_string(r));
        }
        prev_bar = bar;
    }
}

void check_timestep(const char* op, int r, const VarianceSchedule& sched) {
    if (r < 1 || r > sched.n_steps) {
        throw std::invalid_argument(std::string(op) + ": timestep " + std::to_string(r) +
                                    " outside 1.." + std::to_string(sched.n_steps));
    }
}

}  // namespace

VarianceSchedule VarianceSchedule::linear(int n_steps, double beta_start, double beta_end) {
    if (n_steps < 1) throw std::invalid_argument("linear schedule: n_steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("linear schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(n_steps));
    for (int i = 0; i < n_steps; ++i) {
        betas[static_cast<std::size_t>(i)] =
            n_steps == 1 ? beta_start
                         : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                               static_cast<double>(n_steps - 1);
    }
    return from_betas(std::move(betas));
}

VarianceSchedule VarianceSchedule::from_betas(std::vector<double> betas) {
    VarianceSchedule s;
    s.n_steps = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double bar = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        bar *= s.alphas[i];
        s.alpha_bars[i] = bar;
    }
    validate_schedule(s);
    return s;
}

double VarianceSchedule::beta(int r) const {
    check_timestep("beta", r, *this);
    return betas[static_cast<std::size_t>(r - 1)];
}

double VarianceSchedule::alpha(int r) const {
    check_timestep("alpha", r, *this);
    return alphas[static_cast<std::size_t>(r - 1)];
}

double VarianceSchedule::alpha_bar(int r) const {
    if (r == 0) return 1.0;
    check_timestep("alpha_bar", r, *this);
    return alpha_bars[static_cast<std::size_t>(r - 1)];
}

DdimSubsequence make_ddim_subsequence(int n_steps, int m) {
    if (m < 1 || m > n_steps) {
        throw std::invalid_argument("ddim subsequence: m = " + std::to_string(m) + " outside 1.." +
                                    std::to_string(n_steps));
    }
    DdimSubsequence sub;
    sub.steps.resize(static_cast<std::size_t>(m));
    int prev = 0;
    for (int i = 1; i <= m; ++i) {
        int s = static_cast<int>(std::floor(static_cast<double>(n_steps) * i / m + 0.5));
        if (s <= prev) s = prev + 1;  // guard rounding collisions on short schedules
        sub.steps[static_cast<std::size_t>(i - 1)] = s;
        prev = s;
    }
    sub.steps.back() = n_steps;
    return sub;
}

Tensor q_sample(const Tensor& z0, int r, const Tensor& xi, const VarianceSchedule& sched) {
    check_timestep("q_sample", r, sched);
    require_same_shape("q_sample", z0, xi);
    const double bar = sched.alpha_bar(r);
    const double a = std::sqrt(bar);
    const double b = std::sqrt(1.0 - bar);
    Tensor out = z0;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * xi.data[i];
    return out;
}

double sigma(int r, const VarianceSchedule& sched) { return sigma_between(r, r - 1, sched); }

double sigma_between(int r, int r_prev, const VarianceSchedule& sched) {
    check_timestep("sigma", r, sched);
    if (r_prev < 0 || r_prev >= r) {
        throw std::invalid_argument("sigma: r_prev " + std::to_string(r_prev) + " must lie in [0, r)");
    }
    const double bar_r = sched.alpha_bar(r);
    const double bar_p = sched.alpha_bar(r_prev);
    if (bar_r >= 1.0) return 0.0;  // degenerate no-noise step
    const double v = ((1.0 - bar_p) / (1.0 - bar_r)) * (1.0 - bar_r / bar_p);
    return std::sqrt(std::max(v, 0.0));
}

namespace {

struct DdimCoeffs {
    double z_coeff;    // sqrt(abar_prev) / sqrt(abar_r)
    double eps_coeff;  // combined eps_theta coefficient
    double sig;
};

DdimCoeffs ddim_coeffs(int r, int r_prev, const VarianceSchedule& sched) {
    check_timestep("ddim_step", r, sched);
    if (r_prev < 0 || r_prev >= r) {
        throw std::invalid_argument("ddim_step: r_prev " + std::to_string(r_prev) + " must lie in [0, r)");
    }
    const double bar_r = sched.alpha_bar(r);
    const double bar_p = sched.alpha_bar(r_prev);
    const double sig = sigma_between(r, r_prev, sched);
    const double resid = 1.0 - bar_p - sig * sig;
    constexpr double kTol = 1e-12;
    if (resid < -kTol) {
        throw std::runtime_error("ddim_step: inconsistent schedule, 1 - alpha_bar_prev - sigma^2 = " +
                                 std::to_string(resid));
    }
    DdimCoeffs c{};
    c.sig = sig;
    c.z_coeff = std::sqrt(bar_p) / std::sqrt(bar_r);
    // sqrt(abar_prev) * (-sqrt(1-abar_r)/sqrt(abar_r)) + sqrt(1-abar_prev-sigma^2)
    c.eps_coeff = std::sqrt(std::max(resid, 0.0)) - c.z_coeff * std::sqrt(1.0 - bar_r);
    return c;
}

}  // namespace

Tensor ddim_step(const Tensor& eps_theta, const Tensor& z, int r, int r_prev,
                 const std::optional<Tensor>& noise, const VarianceSchedule& sched) {
    require_same_shape("ddim_step", eps_theta, z);
    const DdimCoeffs c = ddim_coeffs(r, r_prev, sched);
    Tensor out = z;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = c.z_coeff * z.data[i] + c.eps_coeff * eps_theta.data[i];
    }
    if (c.sig > 0.0) {
        if (!noise.has_value()) {
            throw std::invalid_argument("ddim_step: sigma > 0 requires a noise tensor");
        }
        require_same_shape("ddim_step", z, *noise);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.sig * noise->data[i];
    }
    return out;
}

Var ddim_step_var(Tape& tape, Var eps_theta, Var z, int r, int r_prev,
                  const std::optional<Tensor>& noise, const VarianceSchedule& sched) {
    require_same_shape("ddim_step", eps_theta.value(), z.value());
    const DdimCoeffs c = ddim_coeffs(r, r_prev, sched);
    Var out = tape.add(tape.scale(z, c.z_coeff), tape.scale(eps_theta, c.eps_coeff));
    if (c.sig > 0.0) {
        if (!noise.has_value()) {
            throw std::invalid_argument("ddim_step: sigma > 0 requires a noise tensor");
        }
        Tensor scaled = *noise;
        for (double& v : scaled.data) v *= c.sig;
        out = tape.add(out, tape.constant(std::move(scaled)));
    }
    return out;
}

Tensor time_embed(int r, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("time_embed: dimension must be even and >= 2, got " + std::to_string(dim));
    }
    const int half = dim / 2;
    Tensor out = Tensor::zeros({dim});
    for (int i = 0; i < half; ++i) {
        const double freq =
            half == 1 ? 1.0 : std::exp(-std::log(10000.0) * static_cast<double>(i) / (half - 1));
        out.data[static_cast<std::size_t>(i)] = std::sin(r * freq);
        out.data[static_cast<std::size_t>(half + i)] = std::cos(r * freq);
    }
    return out;
}

}  // namespace advrestore
