#include "advrestore/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace advrestore {

namespace {

void require_finite_grad(const Parameter& p) {
    if (!p.grad.all_finite()) {
        throw std::runtime_error("optimizer: non-finite gradient for parameter '" + p.name + "'");
    }
}

}  // namespace

void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

void sgd_step(const std::vector<Parameter*>& params, double lr) {
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        require_finite_grad(*p);
        for (std::size_t i = 0; i < p->value.data.size(); ++i) p->value.data[i] -= lr * p->grad.data[i];
    }
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    moments_.reserve(params_.size());
    for (Parameter* p : params_) {
        moments_.push_back({Tensor::zeros(p->value.shape), Tensor::zeros(p->value.shape)});
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter* p = params_[pi];
        if (!p->trainable) continue;
        require_finite_grad(*p);
        Moments& mo = moments_[pi];
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double g = p->grad.data[i];
            mo.m.data[i] = beta1_ * mo.m.data[i] + (1.0 - beta1_) * g;
            mo.v.data[i] = beta2_ * mo.v.data[i] + (1.0 - beta2_) * g * g;
            const double mhat = mo.m.data[i] / bc1;
            const double vhat = mo.v.data[i] / bc2;
            p->value.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

}  // namespace advrestore
