#pragma once

#include <functional>
#include <string>
#include <vector>

#include "advrestore/tensor.hpp"

namespace advrestore {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }
    const Tensor& value() const;
    const std::vector<int>& shape() const;

  private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

enum class ClampGrad {
    Exact,          // zero gradient outside the clamp box
    StraightThrough // identity gradient everywhere
};

// Dynamic reverse-mode tape. Rebuilt per forward pass; nodes are appended in
// topological order so backward is a single reverse sweep.
class Tape {
  public:
    // Leaves. `leaf` participates in differentiation, `constant` does not.
    Var leaf(Tensor value);
    Var constant(Tensor value);

    // Elementwise / structural ops.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var silu(Var a);
    Var reshape(Var a, std::vector<int> shape);
    Var sum(Var a);

    // Linear algebra and convolutions.
    Var matmul(Var a, Var b);  // [m,k] x [k,n] -> [m,n]
    Var conv2d(Var x, Var w, Var bias, int stride, int pad);            // x [C,H,W], w [OC,IC,K,K]
    Var conv2d_transpose(Var x, Var w, Var bias, int stride, int pad);  // w [IC,OC,K,K]
    Var bias_add(Var x, Var bias);  // bias [C] broadcast over [C,H,W]
    Var concat_channels(Var a, Var b);
    Var group_norm(Var x, Var gamma, Var beta, int groups);
    Var upsample_nearest(Var x, int factor);
    Var downsample_nearest(Var x, int factor);

    // Reductions and losses.
    Var mse(Var a, Var b);
    Var softmax_cross_entropy(Var logits, int label);

    // Attack-path ops.
    Var clamp(Var x, double lo, double hi, ClampGrad mode);
    Var clamp_box(Var x, const Tensor& lo, const Tensor& hi, ClampGrad mode);
    Var l2_normalize(Var v);
    Var squared_distance(Var a, Var b);

    // Reverse sweep from a scalar node. Gradients for leaves that the loss
    // does not reach stay zero.
    void backward(Var loss);

    // Gradient of `v` from the last backward() call (zeros if unreachable).
    Tensor grad(Var v) const;

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t size() const { return nodes_.size(); }

  private:
    friend class Var;

    struct Node {
        Tensor value;
        bool needs_grad = false;
        // Accumulates parent gradients given this node's upstream gradient.
        std::function<void(Tape&, const Tensor&)> backward;
    };

    int push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> backward);
    void accumulate(int id, const Tensor& g);
    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }
    void check_owned(Var v, const char* op) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

// Finite-difference gradient of `f` w.r.t. `x`, central differences at `step`.
// Independent oracle used by the gradient test suites.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step = 1e-5);

}  // namespace advrestore
