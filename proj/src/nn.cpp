#include "advrestore/nn.hpp"

#include <cmath>
#include <cstring>

namespace advrestore {

namespace {

Tensor he_init(const std::vector<int>& shape, int fan_in, Rng& rng) {
    return rng.normal_tensor(shape, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace

Conv2dLayer::Conv2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
                         int pad_, Rng& rng)
    : w(name + ".w", he_init({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng)),
      b(name + ".b", Tensor::zeros({out_ch})),
      stride(stride_),
      pad(pad_) {}

Var Conv2dLayer::forward(Tape& tape, BoundParams& bp, Var x) {
    return tape.conv2d(x, bp.bind_auto(tape, w), bp.bind_auto(tape, b), stride, pad);
}

void Conv2dLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

ConvT2dLayer::ConvT2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
                           int pad_, Rng& rng)
    : w(name + ".w", he_init({in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel, rng)),
      b(name + ".b", Tensor::zeros({out_ch})),
      stride(stride_),
      pad(pad_) {}

Var ConvT2dLayer::forward(Tape& tape, BoundParams& bp, Var x) {
    return tape.conv2d_transpose(x, bp.bind_auto(tape, w), bp.bind_auto(tape, b), stride, pad);
}

void ConvT2dLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

LinearLayer::LinearLayer(const std::string& name, int in_dim, int out_dim, Rng& rng)
    : w(name + ".w", he_init({out_dim, in_dim}, in_dim, rng)), b(name + ".b", Tensor::zeros({out_dim})) {}

Var LinearLayer::forward(Tape& tape, BoundParams& bp, Var x) {
    const int in_dim = w.value.shape[1];
    const int out_dim = w.value.shape[0];
    Var col = tape.reshape(x, {in_dim, 1});
    Var y = tape.matmul(bp.bind_auto(tape, w), col);
    y = tape.reshape(y, {out_dim});
    // Vector bias: reuse the elementwise add.
    return tape.add(y, bp.bind_auto(tape, b));
}

void LinearLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

GroupNormLayer::GroupNormLayer(const std::string& name, int channels, int groups_)
    : gamma(name + ".gamma", Tensor::full({channels}, 1.0)),
      beta(name + ".beta", Tensor::zeros({channels})),
      groups(groups_) {}

Var GroupNormLayer::forward(Tape& tape, BoundParams& bp, Var x) {
    return tape.group_norm(x, bp.bind_auto(tape, gamma), bp.bind_auto(tape, beta), groups);
}

void GroupNormLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

Var global_avg_pool(Tape& tape, Var x) {
    const auto& shape = x.value().shape;
    const int c = shape[0], hw = shape[1] * shape[2];
    Var flat = tape.reshape(x, {c, hw});
    Var avg = tape.matmul(flat, tape.constant(Tensor::full({hw, 1}, 1.0 / hw)));
    return tape.reshape(avg, {c});
}

void set_trainable(const std::vector<Parameter*>& params, bool trainable) {
    for (Parameter* p : params) p->trainable = trainable;
}

bool all_frozen(const std::vector<Parameter*>& params) {
    for (const Parameter* p : params) {
        if (p->trainable) return false;
    }
    return true;
}

std::uint64_t parameters_digest(const std::vector<Parameter*>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Parameter* p : params) {
        for (double v : p->value.data) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char byte : bytes) {
                h ^= byte;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

}  // namespace advrestore
