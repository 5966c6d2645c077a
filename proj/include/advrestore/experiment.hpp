#pragma once

#include <map>
#include <string>
#include <vector>

#include "advrestore/attack.hpp"
#include "advrestore/dataio.hpp"
#include "advrestore/facerec.hpp"
#include "advrestore/metrics.hpp"
#include "advrestore/rldm.hpp"

namespace advrestore {

struct ExperimentConfig {
    std::uint64_t seed = 7;

    int n_identities = 12;
    int n_variants = 12;
    DegradeParams degrade;

    int n_timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int ddim_steps = 8;

    AutoencoderConfig ae;
    UNetConfig unet;
    AutoencoderTrainConfig ae_train;
    RldmTrainConfig rldm_train;
    FrTrainConfig fr_train;
    AdversarialFinetuneConfig adv_finetune;

    std::uint64_t surrogate_arch_seed = 101;
    std::vector<std::uint64_t> victim_arch_seeds = {202, 303};
    std::string surrogate_ckpt_path;  // empty: <out_dir>/checkpoints/surrogate.ckpt

    AttackConfig attack;
    int n_attack_pairs = 50;

    std::string out_dir = "out";

    // Parses strictly: unknown keys anywhere are an error.
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string to_json_text() const;
};

// Everything the attack stage needs, trained in dependency order.
struct PipelineArtifacts {
    Dataset dataset;
    RLDMModel rldm;
    EmbeddingModel surrogate;
    std::vector<EmbeddingModel> victims;
    std::vector<EmbeddingModel> robust_victims;
    double surrogate_threshold = 0.0;
    std::vector<double> victim_thresholds;
    std::vector<double> robust_thresholds;
    FrEvalReport surrogate_eval;
    std::vector<FrEvalReport> victim_evals;
    std::vector<FrEvalReport> robust_evals;
    std::vector<double> rldm_loss_trace;
};

PipelineArtifacts train_pipeline(const ExperimentConfig& cfg);

// Per-variant evaluation over the attack pairs.
struct VariantEvaluation {
    AttackVariant variant = AttackVariant::Fim;
    std::vector<AttackResult> results;
    QualityReport quality_vs_hq;      // against the attacker's HQ ground truth
    QualityReport quality_vs_source;  // against the attacker input x_s
    AsrReport white_box;
    std::vector<AsrReport> per_victim;
    std::vector<AsrReport> per_robust_victim;
    std::vector<int> curve_iters;
    std::vector<double> curve_success;  // white-box success fraction per curve point
    double max_budget_linf = 0.0;
};

struct ModelSummary {
    std::string name;
    double verification_accuracy = 0.0;
    double threshold = 0.0;
    double mean_genuine_distance = 0.0;
    double mean_impostor_distance = 0.0;
};

struct ExperimentReport {
    ExperimentConfig config;
    QualityReport benign_vs_hq;
    QualityReport benign_vs_source;
    std::vector<VariantEvaluation> variants;  // fixed order: fim, advrestore-fim, dfanet, advrestore-dfanet
    double restored_mean_psnr = 0.0;   // restore() output vs HQ over attack sources
    double degraded_mean_psnr = 0.0;   // x_s (degraded) vs HQ over the same images
    double ae_test_psnr = 0.0;         // Dec(Enc(x)) on held-out HQ images
    std::vector<ModelSummary> models;  // surrogate, victims, robust victims
};

ExperimentReport evaluate_pipeline(PipelineArtifacts& art, const ExperimentConfig& cfg);

// Plain-text tables in the published row order plus the success-vs-iteration
// table.
std::string render_report_text(const ExperimentReport& report);
// Machine-readable manifest with the resolved config and input digests.
std::string render_report_json(const ExperimentReport& report,
                               const std::map<std::string, std::string>& input_digests);

// Stage runners used by the CLI; all outputs land under cfg.out_dir.
void stage_gen_data(const ExperimentConfig& cfg);
void stage_train_autoencoder(const ExperimentConfig& cfg);
void stage_train_rldm(const ExperimentConfig& cfg);
void stage_train_fr(const ExperimentConfig& cfg);
void stage_attack(const ExperimentConfig& cfg, AttackVariant variant);
void stage_evaluate(const ExperimentConfig& cfg);
void stage_reproduce_report(const ExperimentConfig& cfg);

// Regenerates the dataset recorded in out_dir's manifest and verifies its
// digest; throws if the manifest is missing or stale.
Dataset load_stage_dataset(const ExperimentConfig& cfg);

std::string dataset_digest(const Dataset& ds);

}  // namespace advrestore
