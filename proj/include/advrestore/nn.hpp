#pragma once

#include <string>
#include <vector>

#include "advrestore/autodiff.hpp"
#include "advrestore/optim.hpp"
#include "advrestore/rng.hpp"

namespace advrestore {

struct Conv2dLayer {
    Parameter w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);
    Var forward(Tape& tape, BoundParams& bp, Var x);
    void collect(std::vector<Parameter*>& out);
};

struct ConvT2dLayer {
    Parameter w, b;  // w [IC,OC,K,K]
    int stride = 1, pad = 0;

    ConvT2dLayer() = default;
    ConvT2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);
    Var forward(Tape& tape, BoundParams& bp, Var x);
    void collect(std::vector<Parameter*>& out);
};

struct LinearLayer {
    Parameter w, b;  // w [out,in]

    LinearLayer() = default;
    LinearLayer(const std::string& name, int in_dim, int out_dim, Rng& rng);
    Var forward(Tape& tape, BoundParams& bp, Var x);  // x [in] -> [out]
    void collect(std::vector<Parameter*>& out);
};

struct GroupNormLayer {
    Parameter gamma, beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(const std::string& name, int channels, int groups);
    Var forward(Tape& tape, BoundParams& bp, Var x);
    void collect(std::vector<Parameter*>& out);
};

// Mean over the spatial extent: [C,H,W] -> [C]. Composed from reshape and a
// constant averaging matmul, so it needs no dedicated backward rule.
Var global_avg_pool(Tape& tape, Var x);

void set_trainable(const std::vector<Parameter*>& params, bool trainable);
bool all_frozen(const std::vector<Parameter*>& params);

// FNV-1a over the raw parameter bytes; used by freeze-contract checks.
std::uint64_t parameters_digest(const std::vector<Parameter*>& params);

}  // namespace advrestore
