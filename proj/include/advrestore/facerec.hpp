#pragma once

#include <string>
#include <vector>

#include "advrestore/dataio.hpp"
#include "advrestore/nn.hpp"

namespace advrestore {

enum class ModelRole { Surrogate, Victim };

// Architecture knobs derived deterministically from an arch seed, so victims
// genuinely differ from the surrogate in depth/width/kernels.
struct EmbeddingArch {
    int n_blocks = 2;       // 2 or 3 stride-2 conv blocks
    int base_ch = 12;
    int kernel = 3;         // 3 or 5
    int embed_dim = 16;
    int gn_groups = 2;

    static EmbeddingArch from_seed(std::uint64_t arch_seed);
};

// Per-iteration feature dropout used by the DFANet-style attack variant.
// Inference-time victims never see dropout.
struct DropoutSpec {
    double probability = 0.0;
    Rng* rng = nullptr;
};

struct EmbeddingModel {
    ModelRole role = ModelRole::Surrogate;
    std::uint64_t arch_seed = 0;
    EmbeddingArch arch;
    int image_size = 32;
    std::vector<Conv2dLayer> convs;
    std::vector<GroupNormLayer> norms;
    LinearLayer head;        // pooled features -> embedding
    LinearLayer classifier;  // embedding -> identity logits (training only)
    int n_classes = 0;

    static EmbeddingModel create(ModelRole role, std::uint64_t arch_seed, int n_classes, int image_size,
                                 Rng& rng);

    std::vector<Parameter*> params();           // backbone + head
    std::vector<Parameter*> all_params();       // + classifier

    Var embed_var(Tape& tape, BoundParams& bp, Var image, const DropoutSpec* dropout = nullptr);
    Var logits_var(Tape& tape, BoundParams& bp, Var image);
    Tensor embed(const Tensor& image);
};

// L2 normalization; the embedding-space map phi.
Tensor normalize_phi(const Tensor& v);

// || phi(a) - phi(b) ||^2, in [0,4].
double embedding_distance(const Tensor& a, const Tensor& b);

struct VerificationThreshold {
    double threshold = 0.0;
    double far_target = 0.0;
    int n_pairs = 0;
};

// Distance quantile over impostor pairs hitting the FAR target.
VerificationThreshold calibrate_threshold(const std::vector<double>& impostor_distances,
                                          double far_target);

struct FrTrainConfig {
    int steps = 1200;
    int batch = 16;
    double lr = 2e-3;
    double far_target = 0.01;
};

struct FrEvalReport {
    double verification_accuracy = 0.0;  // balanced genuine/impostor accuracy
    double threshold = 0.0;
    double mean_genuine_distance = 0.0;
    double mean_impostor_distance = 0.0;
};

// Identity-classification training, evaluated on held-out genuine/impostor
// pairs at the calibrated threshold.
EmbeddingModel train_fr_model(const Dataset& ds, ModelRole role, std::uint64_t arch_seed,
                              const FrTrainConfig& cfg, Rng& rng);

FrEvalReport evaluate_fr_model(EmbeddingModel& model, const Dataset& ds, double far_target);

std::vector<double> impostor_distances(EmbeddingModel& model, const Dataset& ds);

struct AdversarialFinetuneConfig {
    int steps = 500;
    int batch = 16;
    double lr = 1e-3;
    double budget = 8.0 / 255.0;  // single-step sign-gradient training budget
};

// Single-step sign-gradient adversarial training on top of a trained model.
EmbeddingModel adversarial_finetune(const EmbeddingModel& model, const Dataset& ds,
                                    const AdversarialFinetuneConfig& cfg, Rng& rng);

void save_embedding_model(const std::string& path, EmbeddingModel& model);
EmbeddingModel load_embedding_model(const std::string& path);

}  // namespace advrestore
