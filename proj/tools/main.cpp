// Command-line front end: dataset generation, training stages, attacks and
// report reproduction. Every command is deterministic given --seed.

#include <cstdio>
#include <exception>
#include <functional>
#include <string>

#include <CLI11.hpp>

#include "advrestore/experiment.hpp"

namespace {

// Exit codes: 0 ok, 2 config/usage error, 3 missing upstream artifact,
// 4 stage failure.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitStage = 4;

struct CliOptions {
    std::string config_path;
    std::string out_dir;
    std::string variant;
    bool has_seed = false;
    std::uint64_t seed = 0;
    bool has_rho = false, has_beta = false;
    double rho = 0.0, beta = 0.0;
    bool has_n_max = false, has_ddim = false;
    int n_max = 0, ddim_steps = 0;
};

advrestore::ExperimentConfig resolve_config(const CliOptions& opt) {
    advrestore::ExperimentConfig cfg;
    if (!opt.config_path.empty()) cfg = advrestore::ExperimentConfig::from_file(opt.config_path);
    // Flags override config-file keys; the resolved union is what stages record.
    if (opt.has_seed) cfg.seed = opt.seed;
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    if (!opt.variant.empty()) cfg.attack.variant = advrestore::variant_from_name(opt.variant);
    if (opt.has_rho) cfg.attack.budget = opt.rho;
    if (opt.has_beta) cfg.attack.step_size = opt.beta;
    if (opt.has_n_max) cfg.attack.max_iters = opt.n_max;
    if (opt.has_ddim) cfg.ddim_steps = opt.ddim_steps;
    return cfg;
}

int run_guarded(const char* stage, const std::function<void()>& body) {
    try {
        body();
        return kExitOk;
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        const bool missing = msg.find("missing") != std::string::npos ||
                             msg.find("cannot open") != std::string::npos;
        std::fprintf(stderr, "error code=%d stage=%s msg=\"%s\"\n", missing ? kExitMissing : kExitStage,
                     stage, msg.c_str());
        return missing ? kExitMissing : kExitStage;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"AdvRestore pipeline: restoration-diffusion training and adversarial face attacks"};
    app.require_subcommand(1);

    CliOptions opt;
    app.add_option("--config", opt.config_path, "JSON experiment config");
    app.add_option("--out", opt.out_dir, "output directory");
    app.add_option("--seed", opt.seed, "master seed")->each([&](const std::string&) { opt.has_seed = true; });
    app.add_option("--rho", opt.rho, "L-inf pixel budget")
        ->each([&](const std::string&) { opt.has_rho = true; });
    app.add_option("--beta", opt.beta, "attack step size")
        ->each([&](const std::string&) { opt.has_beta = true; });
    app.add_option("--n-max", opt.n_max, "attack iterations")
        ->each([&](const std::string&) { opt.has_n_max = true; });
    app.add_option("--ddim-steps", opt.ddim_steps, "DDIM subsequence length")
        ->each([&](const std::string&) { opt.has_ddim = true; });
    app.add_option("--variant", opt.variant,
                   "attack variant: fim|dfanet|advrestore-fim|advrestore-dfanet");
    std::string surrogate_path, victims_spec;
    app.add_option("--surrogate", surrogate_path, "surrogate checkpoint path override");
    app.add_option("--victims", victims_spec, "comma-separated victim arch seeds");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic identity dataset");
    auto* tae = app.add_subcommand("train-autoencoder", "train and freeze the autoencoder");
    auto* trl = app.add_subcommand("train-rldm", "train the conditional diffusion UNet");
    auto* tfr = app.add_subcommand("train-fr", "train surrogate, victim and robust victim models");
    auto* att = app.add_subcommand("attack", "craft adversarial examples for one variant");
    auto* eva = app.add_subcommand("evaluate", "compute quality/ASR tables from attack outputs");
    auto* rep = app.add_subcommand("reproduce-report", "run every stage and emit the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::fprintf(stderr, "error code=%d stage=cli msg=\"%s\"\n", kExitConfig, e.what());
        return kExitConfig;
    }

    advrestore::ExperimentConfig cfg;
    try {
        cfg = resolve_config(opt);
        if (!surrogate_path.empty()) cfg.surrogate_ckpt_path = surrogate_path;
        if (!victims_spec.empty()) {
            cfg.victim_arch_seeds.clear();
            std::size_t pos = 0;
            while (pos < victims_spec.size()) {
                const std::size_t comma = victims_spec.find(',', pos);
                const std::string tok = victims_spec.substr(
                    pos, comma == std::string::npos ? std::string::npos : comma - pos);
                cfg.victim_arch_seeds.push_back(std::stoull(tok));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error code=%d stage=config msg=\"%s\"\n", kExitConfig, e.what());
        return kExitConfig;
    }

    if (gen->parsed()) return run_guarded("gen-data", [&] { advrestore::stage_gen_data(cfg); });
    if (tae->parsed()) {
        return run_guarded("train-autoencoder", [&] { advrestore::stage_train_autoencoder(cfg); });
    }
    if (trl->parsed()) return run_guarded("train-rldm", [&] { advrestore::stage_train_rldm(cfg); });
    if (tfr->parsed()) return run_guarded("train-fr", [&] { advrestore::stage_train_fr(cfg); });
    if (att->parsed()) {
        return run_guarded("attack",
                           [&] { advrestore::stage_attack(cfg, cfg.attack.variant); });
    }
    if (eva->parsed()) return run_guarded("evaluate", [&] { advrestore::stage_evaluate(cfg); });
    if (rep->parsed()) {
        return run_guarded("reproduce-report", [&] { advrestore::stage_reproduce_report(cfg); });
    }
    std::fprintf(stderr, "error code=%d stage=cli msg=\"no subcommand\"\n", kExitConfig);
    return kExitConfig;
}
