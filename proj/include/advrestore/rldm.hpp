#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advrestore/dataio.hpp"
#include "advrestore/diffusion.hpp"
#include "advrestore/nn.hpp"

namespace advrestore {

struct AutoencoderConfig {
    int image_size = 32;
    int base_ch = 16;
    int mid_ch = 20;
    int latent_ch = 4;
    int factor = 4;  // spatial downsampling, fixed by the two stride-2 stages
    int gn_groups = 4;
};

// Frozen-after-training encoder/decoder pair. Latents are shifted/scaled to
// roughly unit variance so the diffusion prior N(0,I) is a sensible start.
struct Autoencoder {
    AutoencoderConfig cfg;
    Conv2dLayer enc1, enc2, enc3, enc4;
    GroupNormLayer egn1, egn2, egn3;
    Conv2dLayer dec1;
    ConvT2dLayer dec2;
    Conv2dLayer dec2b;
    ConvT2dLayer dec3;
    Conv2dLayer dec4;
    GroupNormLayer dgn1, dgn2, dgn2b, dgn3;
    double latent_shift = 0.0;
    double latent_scale = 1.0;
    mutable long encode_calls = 0;
    mutable long decode_calls = 0;

    static Autoencoder create(const AutoencoderConfig& cfg, Rng& rng);

    std::vector<Parameter*> params();
    bool frozen();
    void freeze();

    std::vector<int> latent_shape() const;

    Var encode_var(Tape& tape, BoundParams& bp, Var image);
    // `clamp_output` applies the [0,1] pixel clamp (inference contract);
    // training leaves the output linear.
    Var decode_var(Tape& tape, BoundParams& bp, Var latent, ClampGrad clamp_mode = ClampGrad::Exact,
                   bool clamp_output = true);

    Tensor encode(const Tensor& image);
    Tensor decode(const Tensor& latent);
};

struct UNetConfig {
    int latent_ch = 4;
    int base_ch = 16;
    int mid_ch = 24;
    int time_dim = 32;
    int time_hidden = 48;
    int gn_groups = 4;
};

// epsilon-prediction UNet conditioned by channel concatenation of the
// degraded-image latent, two resolution levels.
struct ConditionalUNet {
    UNetConfig cfg;
    LinearLayer time_mlp;
    Conv2dLayer conv_in;
    GroupNormLayer gn1;
    Conv2dLayer conv1;
    LinearLayer time1;
    Conv2dLayer down;
    GroupNormLayer gn2;
    Conv2dLayer conv2;
    LinearLayer time2;
    GroupNormLayer gn3;
    Conv2dLayer conv3;
    LinearLayer time3;
    ConvT2dLayer up;
    GroupNormLayer gn4;
    Conv2dLayer conv4;
    LinearLayer time4;
    GroupNormLayer gn_out;
    Conv2dLayer conv_out;
    mutable long forward_calls = 0;

    static ConditionalUNet create(const UNetConfig& cfg, Rng& rng);

    std::vector<Parameter*> params();

    Var forward_var(Tape& tape, BoundParams& bp, Var z_cond, Var z_noisy, int r);
    Tensor forward(const Tensor& z_cond, const Tensor& z_noisy, int r);
};

struct RLDMModel {
    Autoencoder ae;
    ConditionalUNet unet;
    VarianceSchedule sched;
    DdimSubsequence sub;

    std::vector<int> latent_shape() const { return ae.latent_shape(); }
};

struct AutoencoderTrainConfig {
    int steps = 1600;
    int batch = 16;
    double lr = 2e-3;
    // Denoising term: latent perturbation stddev as a fraction of the
    // latent RMS. Widens the decoder's useful neighborhood around the
    // manifold, which both the DDIM latents and the attack rely on.
    double latent_noise = 0.15;
};

struct RldmTrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 2e-3;
};

// Reconstruction training on the dataset's train split (HQ and degraded
// images), then latent normalization and freezing.
Autoencoder train_autoencoder(const Dataset& ds, const AutoencoderConfig& cfg,
                              const AutoencoderTrainConfig& tcfg, Rng& rng);

// Mean reconstruction PSNR of Dec(Enc(x)) over held-out HQ images.
double autoencoder_test_psnr(Autoencoder& ae, const Dataset& ds);

// One denoising-objective step over a batch of (hq, degraded) records.
// Throws if the autoencoder is not frozen.
double train_rldm_step(RLDMModel& model, const std::vector<const ImageRecord*>& batch, Adam& opt,
                       Rng& rng);

// Full UNet training loop; returns the per-step loss trace.
std::vector<double> train_rldm(RLDMModel& model, const Dataset& ds, const RldmTrainConfig& tcfg,
                               Rng& rng);

struct RestoreResult {
    Tensor x_restored;   // decoded, clamped to [0,1]
    Tensor eps_final;    // UNet output at the last (lowest) timestep
    Tensor z_prefinal;   // latent fed into the last reverse step
    Tensor z_final;      // latent after the last reverse step
    int r_final = 0;     // the last timestep (its predecessor is 0)
};

// Algorithm lines 1-6: encode the input as the condition, start from seeded
// Gaussian noise and walk the DDIM subsequence down to timestep zero.
RestoreResult restore(const Tensor& x_in, RLDMModel& model, std::uint64_t seed);

void save_rldm(const std::string& path, RLDMModel& model);
RLDMModel load_rldm(const std::string& path);

}  // namespace advrestore
