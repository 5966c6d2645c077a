#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "advrestore/autodiff.hpp"
#include "advrestore/tensor.hpp"

namespace advrestore {

// A named trainable tensor. `trainable=false` freezes it: optimizers must
// leave the value bit-identical.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_)
        : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros(value.shape)) {}

    void zero_grad() { grad = Tensor::zeros(value.shape); }
};

// Binds Parameters to tape leaves for one forward pass and routes tape
// gradients back into Parameter::grad afterwards. With `as_constants` every
// parameter enters the graph as a constant (inference / attack passes that
// only need input gradients).
class BoundParams {
  public:
    BoundParams() = default;
    explicit BoundParams(bool as_constants) : as_constants_(as_constants) {}

    Var bind(Tape& tape, Parameter& p) {
        if (as_constants_) return tape.constant(p.value);
        Var v = tape.leaf(p.value);
        bound_.emplace_back(&p, v);
        return v;
    }

    // Frozen parameters enter as constants: backward skips their subtrees.
    Var bind_const(Tape& tape, Parameter& p) { return tape.constant(p.value); }

    Var bind_auto(Tape& tape, Parameter& p) {
        return (p.trainable && !as_constants_) ? bind(tape, p) : bind_const(tape, p);
    }

    void accumulate_grads(Tape& tape) {
        for (auto& [param, var] : bound_) {
            const Tensor g = tape.grad(var);
            for (std::size_t i = 0; i < g.data.size(); ++i) param->grad.data[i] += g.data[i];
        }
    }

  private:
    bool as_constants_ = false;
    std::vector<std::pair<Parameter*, Var>> bound_;
};

void zero_grads(const std::vector<Parameter*>& params);

// w <- w - lr * grad for trainable parameters; throws on non-finite grads.
void sgd_step(const std::vector<Parameter*>& params, double lr);

class Adam {
  public:
    explicit Adam(std::vector<Parameter*> params, double lr = 1e-3, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);

    void step();
    void zero_grad();
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    struct Moments {
        Tensor m;
        Tensor v;
    };
    std::vector<Parameter*> params_;
    std::vector<Moments> moments_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace advrestore
