#include "advrestore/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "advrestore/sha256.hpp"

namespace advrestore {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* k) { return key == k; }) == allowed.end()) {
            throw std::invalid_argument("config: unknown key '" + where + key + "'");
        }
    }
}

template <typename T>
void maybe(const json& obj, const char* key, T& target) {
    if (obj.contains(key)) target = obj.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json root = json::parse(text);
    ExperimentConfig cfg;
    check_keys(root, "", {"seed", "dataset", "schedule", "autoencoder", "unet", "facerec", "attack",
                          "out_dir"});
    maybe(root, "seed", cfg.seed);
    maybe(root, "out_dir", cfg.out_dir);
    if (root.contains("dataset")) {
        const json& d = root["dataset"];
        check_keys(d, "dataset.", {"n_identities", "n_variants", "blur_sigma", "down_factor",
                                   "noise_sigma"});
        maybe(d, "n_identities", cfg.n_identities);
        maybe(d, "n_variants", cfg.n_variants);
        maybe(d, "blur_sigma", cfg.degrade.blur_sigma);
        maybe(d, "down_factor", cfg.degrade.down_factor);
        maybe(d, "noise_sigma", cfg.degrade.noise_sigma);
    }
    if (root.contains("schedule")) {
        const json& s = root["schedule"];
        check_keys(s, "schedule.", {"n_timesteps", "beta_start", "beta_end", "ddim_steps"});
        maybe(s, "n_timesteps", cfg.n_timesteps);
        maybe(s, "beta_start", cfg.beta_start);
        maybe(s, "beta_end", cfg.beta_end);
        maybe(s, "ddim_steps", cfg.ddim_steps);
    }
    if (root.contains("autoencoder")) {
        const json& a = root["autoencoder"];
        check_keys(a, "autoencoder.",
                   {"base_ch", "mid_ch", "latent_ch", "gn_groups", "steps", "batch", "lr",
                    "latent_noise"});
        maybe(a, "base_ch", cfg.ae.base_ch);
        maybe(a, "mid_ch", cfg.ae.mid_ch);
        maybe(a, "latent_ch", cfg.ae.latent_ch);
        maybe(a, "gn_groups", cfg.ae.gn_groups);
        maybe(a, "steps", cfg.ae_train.steps);
        maybe(a, "batch", cfg.ae_train.batch);
        maybe(a, "lr", cfg.ae_train.lr);
        maybe(a, "latent_noise", cfg.ae_train.latent_noise);
    }
    if (root.contains("unet")) {
        const json& u = root["unet"];
        check_keys(u, "unet.",
                   {"base_ch", "mid_ch", "time_dim", "time_hidden", "gn_groups", "steps", "batch", "lr"});
        maybe(u, "base_ch", cfg.unet.base_ch);
        maybe(u, "mid_ch", cfg.unet.mid_ch);
        maybe(u, "time_dim", cfg.unet.time_dim);
        maybe(u, "time_hidden", cfg.unet.time_hidden);
        maybe(u, "gn_groups", cfg.unet.gn_groups);
        maybe(u, "steps", cfg.rldm_train.steps);
        maybe(u, "batch", cfg.rldm_train.batch);
        maybe(u, "lr", cfg.rldm_train.lr);
    }
    if (root.contains("facerec")) {
        const json& f = root["facerec"];
        check_keys(f, "facerec.",
                   {"surrogate_arch_seed", "victim_arch_seeds", "surrogate_path", "steps", "batch",
                    "lr", "far_target", "finetune_steps", "finetune_batch", "finetune_lr",
                    "finetune_budget"});
        maybe(f, "surrogate_path", cfg.surrogate_ckpt_path);
        maybe(f, "surrogate_arch_seed", cfg.surrogate_arch_seed);
        maybe(f, "victim_arch_seeds", cfg.victim_arch_seeds);
        maybe(f, "steps", cfg.fr_train.steps);
        maybe(f, "batch", cfg.fr_train.batch);
        maybe(f, "lr", cfg.fr_train.lr);
        maybe(f, "far_target", cfg.fr_train.far_target);
        maybe(f, "finetune_steps", cfg.adv_finetune.steps);
        maybe(f, "finetune_batch", cfg.adv_finetune.batch);
        maybe(f, "finetune_lr", cfg.adv_finetune.lr);
        maybe(f, "finetune_budget", cfg.adv_finetune.budget);
    }
    if (root.contains("attack")) {
        const json& a = root["attack"];
        check_keys(a, "attack.",
                   {"variant", "step_size", "max_iters", "budget", "dropout_probability",
                    "curve_stride", "n_pairs"});
        if (a.contains("variant")) cfg.attack.variant = variant_from_name(a["variant"].get<std::string>());
        maybe(a, "step_size", cfg.attack.step_size);
        maybe(a, "max_iters", cfg.attack.max_iters);
        maybe(a, "budget", cfg.attack.budget);
        maybe(a, "dropout_probability", cfg.attack.dropout_probability);
        maybe(a, "curve_stride", cfg.attack.curve_stride);
        maybe(a, "n_pairs", cfg.n_attack_pairs);
    }
    cfg.unet.latent_ch = cfg.ae.latent_ch;
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string ExperimentConfig::to_json_text() const {
    ordered_json root;
    root["seed"] = seed;
    root["dataset"] = {{"n_identities", n_identities},
                       {"n_variants", n_variants},
                       {"blur_sigma", degrade.blur_sigma},
                       {"down_factor", degrade.down_factor},
                       {"noise_sigma", degrade.noise_sigma}};
    root["schedule"] = {{"n_timesteps", n_timesteps},
                        {"beta_start", beta_start},
                        {"beta_end", beta_end},
                        {"ddim_steps", ddim_steps}};
    root["autoencoder"] = {{"base_ch", ae.base_ch},   {"mid_ch", ae.mid_ch},
                           {"latent_ch", ae.latent_ch}, {"gn_groups", ae.gn_groups},
                           {"steps", ae_train.steps},  {"batch", ae_train.batch},
                           {"lr", ae_train.lr},        {"latent_noise", ae_train.latent_noise}};
    root["unet"] = {{"base_ch", unet.base_ch},       {"mid_ch", unet.mid_ch},
                    {"time_dim", unet.time_dim},     {"time_hidden", unet.time_hidden},
                    {"gn_groups", unet.gn_groups},   {"steps", rldm_train.steps},
                    {"batch", rldm_train.batch},     {"lr", rldm_train.lr}};
    root["facerec"] = {{"surrogate_arch_seed", surrogate_arch_seed},
                       {"victim_arch_seeds", victim_arch_seeds},
                       {"surrogate_path", surrogate_ckpt_path},
                       {"steps", fr_train.steps},
                       {"batch", fr_train.batch},
                       {"lr", fr_train.lr},
                       {"far_target", fr_train.far_target},
                       {"finetune_steps", adv_finetune.steps},
                       {"finetune_batch", adv_finetune.batch},
                       {"finetune_lr", adv_finetune.lr},
                       {"finetune_budget", adv_finetune.budget}};
    root["attack"] = {{"variant", variant_name(attack.variant)},
                      {"step_size", attack.step_size},
                      {"max_iters", attack.max_iters},
                      {"budget", attack.budget},
                      {"dropout_probability", attack.dropout_probability},
                      {"curve_stride", attack.curve_stride},
                      {"n_pairs", n_attack_pairs}};
    root["out_dir"] = out_dir;
    return root.dump(2);
}

std::string dataset_digest(const Dataset& ds) {
    Sha256 h;
    for (const ImageRecord& rec : ds.records) {
        h.update(rec.hq.data.data(), rec.hq.data.size() * sizeof(double));
        h.update(rec.degraded.data.data(), rec.degraded.data.size() * sizeof(double));
    }
    return h.hex_digest();
}

PipelineArtifacts train_pipeline(const ExperimentConfig& cfg) {
    PipelineArtifacts art;
    art.dataset = generate_synthetic_faces(cfg.seed, cfg.n_identities, cfg.n_variants, cfg.degrade);
    Rng root(cfg.seed);

    Rng ae_rng = root.fork("autoencoder");
    art.rldm.ae = train_autoencoder(art.dataset, cfg.ae, cfg.ae_train, ae_rng);
    UNetConfig ucfg = cfg.unet;
    ucfg.latent_ch = cfg.ae.latent_ch;
    Rng unet_rng = root.fork("unet-init");
    art.rldm.unet = ConditionalUNet::create(ucfg, unet_rng);
    art.rldm.sched = VarianceSchedule::linear(cfg.n_timesteps, cfg.beta_start, cfg.beta_end);
    art.rldm.sub = make_ddim_subsequence(cfg.n_timesteps, cfg.ddim_steps);
    Rng rldm_rng = root.fork("rldm-train");
    art.rldm_loss_trace = train_rldm(art.rldm, art.dataset, cfg.rldm_train, rldm_rng);

    Rng sur_rng = root.fork("fr-surrogate");
    art.surrogate = train_fr_model(art.dataset, ModelRole::Surrogate, cfg.surrogate_arch_seed,
                                   cfg.fr_train, sur_rng);
    art.surrogate_eval = evaluate_fr_model(art.surrogate, art.dataset, cfg.fr_train.far_target);
    art.surrogate_threshold = art.surrogate_eval.threshold;
    for (std::size_t vi = 0; vi < cfg.victim_arch_seeds.size(); ++vi) {
        Rng vic_rng = root.fork("fr-victim-" + std::to_string(vi));
        art.victims.push_back(train_fr_model(art.dataset, ModelRole::Victim,
                                             cfg.victim_arch_seeds[vi], cfg.fr_train, vic_rng));
        art.victim_evals.push_back(
            evaluate_fr_model(art.victims.back(), art.dataset, cfg.fr_train.far_target));
        art.victim_thresholds.push_back(art.victim_evals.back().threshold);
        Rng rob_rng = root.fork("fr-robust-" + std::to_string(vi));
        art.robust_victims.push_back(
            adversarial_finetune(art.victims.back(), art.dataset, cfg.adv_finetune, rob_rng));
        art.robust_evals.push_back(
            evaluate_fr_model(art.robust_victims.back(), art.dataset, cfg.fr_train.far_target));
        art.robust_thresholds.push_back(art.robust_evals.back().threshold);
    }
    return art;
}

namespace {

const std::vector<AttackVariant> kVariantOrder = {AttackVariant::Fim, AttackVariant::AdvRestoreFim,
                                                  AttackVariant::Dfanet,
                                                  AttackVariant::AdvRestoreDfanet};

std::vector<FacePair> attack_pair_slice(const Dataset& ds, int n) {
    if (static_cast<int>(ds.attack_pairs.size()) < n) {
        throw std::runtime_error("evaluate: dataset provides " + std::to_string(ds.attack_pairs.size()) +
                                 " attack pairs, need " + std::to_string(n));
    }
    return {ds.attack_pairs.begin(), ds.attack_pairs.begin() + n};
}

VariantEvaluation evaluate_variant(PipelineArtifacts& art, const ExperimentConfig& cfg,
                                   AttackVariant variant) {
    VariantEvaluation ev;
    ev.variant = variant;
    const auto pairs = attack_pair_slice(art.dataset, cfg.n_attack_pairs);
    Rng seed_rng = Rng(cfg.seed).fork("attack-seeds-" + variant_name(variant));
    ev.quality_vs_hq.anchor = "attacker_hq";
    ev.quality_vs_source.anchor = "attacker_input";
    std::vector<double> white_distances;
    std::vector<std::vector<double>> victim_distances(art.victims.size());
    std::vector<std::vector<double>> robust_distances(art.robust_victims.size());
    std::vector<double> curve_success;
    std::vector<int> curve_iters;
    for (const FacePair& pair : pairs) {
        const ImageRecord& src = art.dataset.record(pair.a);
        const ImageRecord& tgt = art.dataset.record(pair.b);
        AttackConfig acfg = cfg.attack;
        acfg.variant = variant;
        acfg.seed = seed_rng.next_u64();
        AttackResult result = run_attack(src.degraded, tgt.hq, art.rldm, art.surrogate, acfg);
        ev.max_budget_linf = std::max(ev.max_budget_linf, result.budget_linf);
        ev.quality_vs_hq.add(result.x_adv, src.hq);
        ev.quality_vs_source.add(result.x_adv, src.degraded);
        white_distances.push_back(
            embedding_distance(art.surrogate.embed(result.x_adv), art.surrogate.embed(tgt.hq)));
        for (std::size_t vi = 0; vi < art.victims.size(); ++vi) {
            victim_distances[vi].push_back(embedding_distance(art.victims[vi].embed(result.x_adv),
                                                              art.victims[vi].embed(tgt.hq)));
        }
        for (std::size_t vi = 0; vi < art.robust_victims.size(); ++vi) {
            robust_distances[vi].push_back(embedding_distance(
                art.robust_victims[vi].embed(result.x_adv), art.robust_victims[vi].embed(tgt.hq)));
        }
        if (curve_iters.empty()) {
            curve_iters = result.curve_iters;
            curve_success.assign(curve_iters.size(), 0.0);
        }
        for (std::size_t ci = 0; ci < result.curve_distance.size(); ++ci) {
            if (result.curve_distance[ci] < art.surrogate_threshold) curve_success[ci] += 1.0;
        }
        ev.results.push_back(std::move(result));
    }
    for (double& v : curve_success) v /= static_cast<double>(pairs.size());
    ev.curve_iters = curve_iters;
    ev.curve_success = curve_success;
    ev.white_box = attack_success_rate(white_distances, "surrogate", art.surrogate_threshold);
    for (std::size_t vi = 0; vi < art.victims.size(); ++vi) {
        ev.per_victim.push_back(attack_success_rate(
            victim_distances[vi], "victim-" + std::to_string(cfg.victim_arch_seeds[vi]),
            art.victim_thresholds[vi]));
    }
    for (std::size_t vi = 0; vi < art.robust_victims.size(); ++vi) {
        ev.per_robust_victim.push_back(attack_success_rate(
            robust_distances[vi], "victim-" + std::to_string(cfg.victim_arch_seeds[vi]) + "-robust",
            art.robust_thresholds[vi]));
    }
    return ev;
}

}  // namespace

ExperimentReport evaluate_pipeline(PipelineArtifacts& art, const ExperimentConfig& cfg) {
    ExperimentReport report;
    report.config = cfg;
    const auto pairs = attack_pair_slice(art.dataset, cfg.n_attack_pairs);
    report.benign_vs_hq.anchor = "attacker_hq";
    report.benign_vs_source.anchor = "attacker_input";
    for (const FacePair& pair : pairs) {
        const ImageRecord& src = art.dataset.record(pair.a);
        report.benign_vs_hq.add(src.degraded, src.hq);
        report.benign_vs_source.add(src.degraded, src.degraded);
    }
    for (AttackVariant variant : kVariantOrder) {
        report.variants.push_back(evaluate_variant(art, cfg, variant));
    }
    // Restoration-vs-degradation comparison on the attack sources, using the
    // restored anchors already produced by the advrestore-fim run.
    const VariantEvaluation& adv_fim = report.variants[1];
    double restored = 0.0, degraded_q = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const ImageRecord& src = art.dataset.record(pairs[i].a);
        restored += psnr(adv_fim.results[i].x_ref, src.hq);
        degraded_q += psnr(src.degraded, src.hq);
    }
    report.restored_mean_psnr = restored / static_cast<double>(pairs.size());
    report.degraded_mean_psnr = degraded_q / static_cast<double>(pairs.size());
    report.ae_test_psnr = autoencoder_test_psnr(art.rldm.ae, art.dataset);
    auto summary = [](const std::string& name, const FrEvalReport& ev) {
        return ModelSummary{name, ev.verification_accuracy, ev.threshold, ev.mean_genuine_distance,
                            ev.mean_impostor_distance};
    };
    report.models.push_back(summary("surrogate", art.surrogate_eval));
    for (std::size_t vi = 0; vi < art.victim_evals.size(); ++vi) {
        report.models.push_back(summary(
            "victim-" + std::to_string(cfg.victim_arch_seeds[vi]), art.victim_evals[vi]));
        report.models.push_back(summary(
            "victim-" + std::to_string(cfg.victim_arch_seeds[vi]) + "-robust", art.robust_evals[vi]));
    }
    return report;
}

namespace {

std::string row_label(AttackVariant v) {
    switch (v) {
        case AttackVariant::Fim: return "FIM";
        case AttackVariant::AdvRestoreFim: return "FIM+AdvRestore";
        case AttackVariant::Dfanet: return "DFANet";
        case AttackVariant::AdvRestoreDfanet: return "DFANet+AdvRestore";
    }
    return "?";
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

}  // namespace

std::string render_report_text(const ExperimentReport& report) {
    std::string out;
    out += "== Visual quality of adversarial images ==\n";
    out += "image                 ssim_hq  psnr_hq  ssim_xs  psnr_xs\n";
    auto quality_row = [&](const std::string& label, const QualityReport& hq, const QualityReport& xs) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-21s %7.3f %8.1f %8.3f %8.1f\n", label.c_str(),
                      hq.mean_ssim(), hq.mean_psnr(), xs.mean_ssim(), xs.mean_psnr());
        out += buf;
    };
    quality_row("Benign", report.benign_vs_hq, report.benign_vs_source);
    for (const auto& ev : report.variants) {
        quality_row(row_label(ev.variant), ev.quality_vs_hq, ev.quality_vs_source);
    }
    out += "(hq: attacker ground truth; xs: attacker input)\n";
    out += "\n== Restoration quality over attack sources ==\n";
    out += "mean PSNR restored vs hq: " + fmt("%.2f", report.restored_mean_psnr) + " dB\n";
    out += "mean PSNR degraded vs hq: " + fmt("%.2f", report.degraded_mean_psnr) + " dB\n";
    out += "autoencoder reconstruction PSNR (test split): " + fmt("%.2f", report.ae_test_psnr) + " dB\n";

    out += "\n== Embedding models ==\n";
    out += "model                     accuracy  threshold  genuine  impostor\n";
    for (const auto& m : report.models) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-25s %8.3f %10.4f %8.4f %9.4f\n", m.name.c_str(),
                      m.verification_accuracy, m.threshold, m.mean_genuine_distance,
                      m.mean_impostor_distance);
        out += buf;
    }

    out += "\n== Attack success rate (%), normally trained victims ==\n";
    std::string header = "attack               ";
    if (!report.variants.empty()) {
        for (const auto& rep : report.variants.front().per_victim) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), " %16s", rep.victim.c_str());
            header += buf;
        }
        header += "        white-box";
    }
    out += header + "\n";
    for (const auto& ev : report.variants) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%-21s", row_label(ev.variant).c_str());
        out += buf;
        for (const auto& rep : ev.per_victim) {
            std::snprintf(buf, sizeof(buf), " %16.1f", rep.asr_percent());
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), " %16.1f", ev.white_box.asr_percent());
        out += buf;
        out += "\n";
    }

    out += "\n== Attack success rate (%), adversarially robust victims ==\n";
    header = "attack               ";
    if (!report.variants.empty()) {
        for (const auto& rep : report.variants.front().per_robust_victim) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), " %16s", rep.victim.c_str());
            header += buf;
        }
    }
    out += header + "\n";
    for (const auto& ev : report.variants) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%-21s", row_label(ev.variant).c_str());
        out += buf;
        for (const auto& rep : ev.per_robust_victim) {
            std::snprintf(buf, sizeof(buf), " %16.1f", rep.asr_percent());
            out += buf;
        }
        out += "\n";
    }

    out += "\n== White-box success vs iteration ==\n";
    out += "iteration";
    for (const auto& ev : report.variants) out += " " + variant_name(ev.variant);
    out += "\n";
    if (!report.variants.empty()) {
        const auto& iters = report.variants.front().curve_iters;
        for (std::size_t ci = 0; ci < iters.size(); ++ci) {
            out += std::to_string(iters[ci]);
            for (const auto& ev : report.variants) {
                out += " " + fmt("%.3f", ev.curve_success[ci]);
            }
            out += "\n";
        }
    }
    return out;
}

std::string render_report_json(const ExperimentReport& report,
                               const std::map<std::string, std::string>& input_digests) {
    ordered_json root;
    root["config"] = json::parse(report.config.to_json_text());
    ordered_json digests;
    for (const auto& [name, digest] : input_digests) digests[name] = digest;
    root["input_digests"] = digests;
    auto quality = [&](const QualityReport& q) {
        return ordered_json{{"anchor", q.anchor},
                            {"mean_ssim", q.mean_ssim()},
                            {"mean_psnr", q.mean_psnr()},
                            {"ssim", q.ssim_values},
                            {"psnr", q.psnr_values}};
    };
    root["benign"] = {{"vs_hq", quality(report.benign_vs_hq)},
                      {"vs_source", quality(report.benign_vs_source)}};
    root["restored_mean_psnr"] = report.restored_mean_psnr;
    root["degraded_mean_psnr"] = report.degraded_mean_psnr;
    root["ae_test_psnr"] = report.ae_test_psnr;
    ordered_json models = ordered_json::array();
    for (const auto& m : report.models) {
        models.push_back({{"name", m.name},
                          {"verification_accuracy", m.verification_accuracy},
                          {"threshold", m.threshold},
                          {"mean_genuine_distance", m.mean_genuine_distance},
                          {"mean_impostor_distance", m.mean_impostor_distance}});
    }
    root["models"] = models;
    ordered_json variants = ordered_json::array();
    for (const auto& ev : report.variants) {
        ordered_json v;
        v["variant"] = variant_name(ev.variant);
        v["row"] = row_label(ev.variant);
        v["quality_vs_hq"] = quality(ev.quality_vs_hq);
        v["quality_vs_source"] = quality(ev.quality_vs_source);
        v["max_budget_linf"] = ev.max_budget_linf;
        ordered_json asr;
        asr["white_box"] = {{"victim", ev.white_box.victim},
                            {"threshold", ev.white_box.threshold},
                            {"successes", ev.white_box.successes},
                            {"total", ev.white_box.total},
                            {"asr_percent", ev.white_box.asr_percent()}};
        ordered_json normal = ordered_json::array();
        for (const auto& rep : ev.per_victim) {
            normal.push_back({{"victim", rep.victim},
                              {"threshold", rep.threshold},
                              {"successes", rep.successes},
                              {"total", rep.total},
                              {"asr_percent", rep.asr_percent()}});
        }
        asr["victims"] = normal;
        ordered_json robust = ordered_json::array();
        for (const auto& rep : ev.per_robust_victim) {
            robust.push_back({{"victim", rep.victim},
                              {"threshold", rep.threshold},
                              {"successes", rep.successes},
                              {"total", rep.total},
                              {"asr_percent", rep.asr_percent()}});
        }
        asr["robust_victims"] = robust;
        v["asr"] = asr;
        v["curve_iters"] = ev.curve_iters;
        v["curve_success"] = ev.curve_success;
        variants.push_back(v);
    }
    root["variants"] = variants;
    return root.dump(2);
}

// ---------------------------------------------------------------------------
// File-based stages.
// ---------------------------------------------------------------------------

namespace {

struct DirLock {
    fs::path path;
    explicit DirLock(const fs::path& dir) : path(dir / ".lock") {
        fs::create_directories(dir);
        std::ifstream probe(path);
        if (probe.good()) {
            throw std::runtime_error("output directory " + dir.string() +
                                     " is locked by another invocation (stale .lock?)");
        }
        std::ofstream out(path);
        out << "locked\n";
    }
    ~DirLock() { std::error_code ec; fs::remove(path, ec); }
};

std::string read_text_file(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing " + what + ": " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

fs::path dataset_manifest_path(const ExperimentConfig& cfg) {
    return fs::path(cfg.out_dir) / "dataset" / "manifest.json";
}

fs::path ckpt_path(const ExperimentConfig& cfg, const std::string& name) {
    return fs::path(cfg.out_dir) / "checkpoints" / (name + ".ckpt");
}

fs::path surrogate_ckpt(const ExperimentConfig& cfg) {
    if (!cfg.surrogate_ckpt_path.empty()) return fs::path(cfg.surrogate_ckpt_path);
    return ckpt_path(cfg, "surrogate");
}

fs::path attacks_dir(const ExperimentConfig& cfg, AttackVariant variant) {
    return fs::path(cfg.out_dir) / "attacks" / variant_name(variant);
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) {
        throw std::runtime_error("missing " + what + ": " + path.string() +
                                 " (run the upstream stage first)");
    }
}

std::string pair_file(int index, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "pair_%04d%s", index, suffix);
    return buf;
}

}  // namespace

void stage_gen_data(const ExperimentConfig& cfg) {
    DirLock lock(fs::path(cfg.out_dir));
    const Dataset ds = generate_synthetic_faces(cfg.seed, cfg.n_identities, cfg.n_variants, cfg.degrade);
    const fs::path dir = fs::path(cfg.out_dir) / "dataset";
    fs::create_directories(dir / "images");
    ordered_json manifest;
    manifest["config"] = json::parse(cfg.to_json_text());
    manifest["digest"] = dataset_digest(ds);
    manifest["n_records"] = ds.records.size();
    manifest["train_indices"] = ds.train_indices;
    manifest["test_indices"] = ds.test_indices;
    ordered_json pairs = ordered_json::array();
    for (const FacePair& p : ds.attack_pairs) pairs.push_back({{"source", p.a}, {"target", p.b}});
    manifest["attack_pairs"] = pairs;
    manifest["n_genuine_pairs"] = ds.genuine_pairs.size();
    manifest["n_impostor_pairs"] = ds.impostor_pairs.size();
    write_text_file(dir / "manifest.json", manifest.dump(2));
    char name[64];
    for (const ImageRecord& rec : ds.records) {
        std::snprintf(name, sizeof(name), "id%02d_var%02d_hq.pgm", rec.identity, rec.variant);
        save_pgm((dir / "images" / name).string(), rec.hq);
        std::snprintf(name, sizeof(name), "id%02d_var%02d_deg.pgm", rec.identity, rec.variant);
        save_pgm((dir / "images" / name).string(), rec.degraded);
    }
}

Dataset load_stage_dataset(const ExperimentConfig& cfg) {
    const fs::path path = dataset_manifest_path(cfg);
    require_file(path, "dataset manifest");
    const json manifest = json::parse(read_text_file(path, "dataset manifest"));
    const json recorded = manifest["config"]["dataset"];
    const json expected = json::parse(cfg.to_json_text())["dataset"];
    if (recorded != expected || manifest["config"]["seed"] != cfg.seed) {
        throw std::runtime_error("dataset manifest at " + path.string() +
                                 " was generated with a different config/seed; rerun gen-data");
    }
    Dataset ds = generate_synthetic_faces(cfg.seed, cfg.n_identities, cfg.n_variants, cfg.degrade);
    if (dataset_digest(ds) != manifest["digest"].get<std::string>()) {
        throw std::runtime_error("dataset digest mismatch for " + path.string() +
                                 "; generator and manifest disagree");
    }
    return ds;
}

void stage_train_autoencoder(const ExperimentConfig& cfg) {
    Dataset ds = load_stage_dataset(cfg);
    DirLock lock(fs::path(cfg.out_dir));
    fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
    Rng rng = Rng(cfg.seed).fork("autoencoder");
    Autoencoder ae = train_autoencoder(ds, cfg.ae, cfg.ae_train, rng);
    RLDMModel shell;
    shell.ae = std::move(ae);
    // The autoencoder rides in an RLDM container with an untrained UNet so a
    // single checkpoint format covers both stages.
    UNetConfig ucfg = cfg.unet;
    ucfg.latent_ch = cfg.ae.latent_ch;
    Rng unet_rng = Rng(cfg.seed).fork("unet-init");
    shell.unet = ConditionalUNet::create(ucfg, unet_rng);
    shell.sched = VarianceSchedule::linear(cfg.n_timesteps, cfg.beta_start, cfg.beta_end);
    shell.sub = make_ddim_subsequence(cfg.n_timesteps, cfg.ddim_steps);
    save_rldm(ckpt_path(cfg, "autoencoder").string(), shell);
}

void stage_train_rldm(const ExperimentConfig& cfg) {
    Dataset ds = load_stage_dataset(cfg);
    require_file(ckpt_path(cfg, "autoencoder"), "autoencoder checkpoint");
    DirLock lock(fs::path(cfg.out_dir));
    RLDMModel model = load_rldm(ckpt_path(cfg, "autoencoder").string());
    Rng rng = Rng(cfg.seed).fork("rldm-train");
    train_rldm(model, ds, cfg.rldm_train, rng);
    save_rldm(ckpt_path(cfg, "rldm").string(), model);
}

void stage_train_fr(const ExperimentConfig& cfg) {
    Dataset ds = load_stage_dataset(cfg);
    DirLock lock(fs::path(cfg.out_dir));
    fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
    Rng sur_rng = Rng(cfg.seed).fork("fr-surrogate");
    EmbeddingModel surrogate =
        train_fr_model(ds, ModelRole::Surrogate, cfg.surrogate_arch_seed, cfg.fr_train, sur_rng);
    save_embedding_model(ckpt_path(cfg, "surrogate").string(), surrogate);
    for (std::size_t vi = 0; vi < cfg.victim_arch_seeds.size(); ++vi) {
        Rng vic_rng = Rng(cfg.seed).fork("fr-victim-" + std::to_string(vi));
        EmbeddingModel victim = train_fr_model(ds, ModelRole::Victim, cfg.victim_arch_seeds[vi],
                                               cfg.fr_train, vic_rng);
        save_embedding_model(ckpt_path(cfg, "victim" + std::to_string(vi)).string(), victim);
        Rng rob_rng = Rng(cfg.seed).fork("fr-robust-" + std::to_string(vi));
        EmbeddingModel robust = adversarial_finetune(victim, ds, cfg.adv_finetune, rob_rng);
        save_embedding_model(ckpt_path(cfg, "victim" + std::to_string(vi) + "_robust").string(), robust);
    }
}

void stage_attack(const ExperimentConfig& cfg, AttackVariant variant) {
    Dataset ds = load_stage_dataset(cfg);
    require_file(ckpt_path(cfg, "rldm"), "rldm checkpoint");
    require_file(surrogate_ckpt(cfg), "surrogate checkpoint");
    DirLock lock(fs::path(cfg.out_dir));
    RLDMModel rldm = load_rldm(ckpt_path(cfg, "rldm").string());
    EmbeddingModel surrogate = load_embedding_model(surrogate_ckpt(cfg).string());
    const fs::path dir = attacks_dir(cfg, variant);
    fs::create_directories(dir);
    const auto pairs = attack_pair_slice(ds, cfg.n_attack_pairs);
    Rng seed_rng = Rng(cfg.seed).fork("attack-seeds-" + variant_name(variant));
    ordered_json results;
    results["config"] = json::parse(cfg.to_json_text());
    results["variant"] = variant_name(variant);
    results["input_digests"] = {
        {"rldm.ckpt", Sha256::of_file(ckpt_path(cfg, "rldm").string())},
        {"surrogate.ckpt", Sha256::of_file(surrogate_ckpt(cfg).string())},
        {"dataset", dataset_digest(ds)}};
    ordered_json rows = ordered_json::array();
    std::string traces = "pair,iteration,loss\n";
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        const ImageRecord& src = ds.record(pairs[pi].a);
        const ImageRecord& tgt = ds.record(pairs[pi].b);
        AttackConfig acfg = cfg.attack;
        acfg.variant = variant;
        acfg.seed = seed_rng.next_u64();
        AttackResult result = run_attack(src.degraded, tgt.hq, rldm, surrogate, acfg);
        const int index = static_cast<int>(pi);
        save_pgm((dir / pair_file(index, "_adv.pgm")).string(), result.x_adv);
        save_tensor((dir / pair_file(index, "_adv.t64")).string(), result.x_adv);
        save_tensor((dir / pair_file(index, "_ref.t64")).string(), result.x_ref);
        ordered_json row;
        row["pair"] = index;
        row["source"] = pairs[pi].a;
        row["target"] = pairs[pi].b;
        row["seed"] = acfg.seed;
        row["budget_linf"] = result.budget_linf;
        row["iterations"] = result.iterations_run;
        row["final_loss"] = result.loss_trace.back();
        row["curve_iters"] = result.curve_iters;
        row["curve_distance"] = result.curve_distance;
        rows.push_back(row);
        for (std::size_t ti = 0; ti < result.loss_trace.size(); ++ti) {
            traces += std::to_string(index) + "," + std::to_string(ti) + "," +
                      fmt("%.12g", result.loss_trace[ti]) + "\n";
        }
    }
    results["pairs"] = rows;
    write_text_file(dir / "results.json", results.dump(2));
    write_text_file(dir / "loss_traces.csv", traces);
}

void stage_evaluate(const ExperimentConfig& cfg) {
    Dataset ds = load_stage_dataset(cfg);
    require_file(ckpt_path(cfg, "rldm"), "rldm checkpoint");
    require_file(surrogate_ckpt(cfg), "surrogate checkpoint");
    std::map<std::string, std::string> digests;
    digests["dataset"] = dataset_digest(ds);
    digests["rldm.ckpt"] = Sha256::of_file(ckpt_path(cfg, "rldm").string());
    digests["surrogate.ckpt"] = Sha256::of_file(surrogate_ckpt(cfg).string());
    EmbeddingModel surrogate = load_embedding_model(surrogate_ckpt(cfg).string());
    std::vector<EmbeddingModel> victims, robust;
    for (std::size_t vi = 0; vi < cfg.victim_arch_seeds.size(); ++vi) {
        const fs::path vpath = ckpt_path(cfg, "victim" + std::to_string(vi));
        const fs::path rpath = ckpt_path(cfg, "victim" + std::to_string(vi) + "_robust");
        require_file(vpath, "victim checkpoint");
        require_file(rpath, "robust victim checkpoint");
        digests[vpath.filename().string()] = Sha256::of_file(vpath.string());
        digests[rpath.filename().string()] = Sha256::of_file(rpath.string());
        victims.push_back(load_embedding_model(vpath.string()));
        robust.push_back(load_embedding_model(rpath.string()));
    }
    for (AttackVariant variant : kVariantOrder) {
        require_file(attacks_dir(cfg, variant) / "results.json", "attack results for " +
                                                                      variant_name(variant));
    }
    DirLock lock(fs::path(cfg.out_dir));

    const double far = cfg.fr_train.far_target;
    const FrEvalReport sur_eval = evaluate_fr_model(surrogate, ds, far);
    const double sur_thr = sur_eval.threshold;
    std::vector<FrEvalReport> victim_evals, robust_evals;
    std::vector<double> victim_thr, robust_thr;
    for (auto& v : victims) {
        victim_evals.push_back(evaluate_fr_model(v, ds, far));
        victim_thr.push_back(victim_evals.back().threshold);
    }
    for (auto& v : robust) {
        robust_evals.push_back(evaluate_fr_model(v, ds, far));
        robust_thr.push_back(robust_evals.back().threshold);
    }

    ExperimentReport report;
    report.config = cfg;
    {
        RLDMModel rldm_for_ae = load_rldm(ckpt_path(cfg, "rldm").string());
        report.ae_test_psnr = autoencoder_test_psnr(rldm_for_ae.ae, ds);
    }
    auto summary = [](const std::string& name, const FrEvalReport& ev) {
        return ModelSummary{name, ev.verification_accuracy, ev.threshold, ev.mean_genuine_distance,
                            ev.mean_impostor_distance};
    };
    report.models.push_back(summary("surrogate", sur_eval));
    for (std::size_t vi = 0; vi < victims.size(); ++vi) {
        report.models.push_back(summary(
            "victim-" + std::to_string(cfg.victim_arch_seeds[vi]), victim_evals[vi]));
        report.models.push_back(summary(
            "victim-" + std::to_string(cfg.victim_arch_seeds[vi]) + "-robust", robust_evals[vi]));
    }
    const auto pairs = attack_pair_slice(ds, cfg.n_attack_pairs);
    report.benign_vs_hq.anchor = "attacker_hq";
    report.benign_vs_source.anchor = "attacker_input";
    for (const FacePair& pair : pairs) {
        const ImageRecord& src = ds.record(pair.a);
        report.benign_vs_hq.add(src.degraded, src.hq);
        report.benign_vs_source.add(src.degraded, src.degraded);
    }
    double restored_acc = 0.0, degraded_acc = 0.0;
    for (AttackVariant variant : kVariantOrder) {
        const fs::path dir = attacks_dir(cfg, variant);
        const json results = json::parse(read_text_file(dir / "results.json", "attack results"));
        VariantEvaluation ev;
        ev.variant = variant;
        ev.quality_vs_hq.anchor = "attacker_hq";
        ev.quality_vs_source.anchor = "attacker_input";
        std::vector<double> white;
        std::vector<std::vector<double>> vdist(victims.size()), rdist(robust.size());
        std::vector<double> curve_success;
        for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
            const ImageRecord& src = ds.record(pairs[pi].a);
            const ImageRecord& tgt = ds.record(pairs[pi].b);
            const int index = static_cast<int>(pi);
            const Tensor x_adv = load_tensor((dir / pair_file(index, "_adv.t64")).string());
            const Tensor x_ref = load_tensor((dir / pair_file(index, "_ref.t64")).string());
            const double linf = x_adv.max_abs_diff(x_ref);
            ev.max_budget_linf = std::max(ev.max_budget_linf, linf);
            ev.quality_vs_hq.add(x_adv, src.hq);
            ev.quality_vs_source.add(x_adv, src.degraded);
            white.push_back(embedding_distance(surrogate.embed(x_adv), surrogate.embed(tgt.hq)));
            for (std::size_t vi = 0; vi < victims.size(); ++vi) {
                vdist[vi].push_back(
                    embedding_distance(victims[vi].embed(x_adv), victims[vi].embed(tgt.hq)));
            }
            for (std::size_t vi = 0; vi < robust.size(); ++vi) {
                rdist[vi].push_back(
                    embedding_distance(robust[vi].embed(x_adv), robust[vi].embed(tgt.hq)));
            }
            const json& row = results["pairs"][pi];
            if (ev.curve_iters.empty()) {
                ev.curve_iters = row["curve_iters"].get<std::vector<int>>();
                curve_success.assign(ev.curve_iters.size(), 0.0);
            }
            const auto curve_distance = row["curve_distance"].get<std::vector<double>>();
            for (std::size_t ci = 0; ci < curve_distance.size(); ++ci) {
                if (curve_distance[ci] < sur_thr) curve_success[ci] += 1.0;
            }
            if (variant == AttackVariant::AdvRestoreFim) {
                restored_acc += psnr(x_ref, src.hq);
                degraded_acc += psnr(src.degraded, src.hq);
            }
        }
        for (double& v : curve_success) v /= static_cast<double>(pairs.size());
        ev.curve_success = curve_success;
        ev.white_box = attack_success_rate(white, "surrogate", sur_thr);
        for (std::size_t vi = 0; vi < victims.size(); ++vi) {
            ev.per_victim.push_back(attack_success_rate(
                vdist[vi], "victim-" + std::to_string(cfg.victim_arch_seeds[vi]), victim_thr[vi]));
        }
        for (std::size_t vi = 0; vi < robust.size(); ++vi) {
            ev.per_robust_victim.push_back(attack_success_rate(
                rdist[vi], "victim-" + std::to_string(cfg.victim_arch_seeds[vi]) + "-robust",
                robust_thr[vi]));
        }
        report.variants.push_back(std::move(ev));
    }
    report.restored_mean_psnr = restored_acc / static_cast<double>(pairs.size());
    report.degraded_mean_psnr = degraded_acc / static_cast<double>(pairs.size());

    write_text_file(fs::path(cfg.out_dir) / "report.txt", render_report_text(report));
    write_text_file(fs::path(cfg.out_dir) / "report.json", render_report_json(report, digests));
    // Standalone success-vs-iteration table for external plotting.
    std::string curve = "iteration";
    for (const auto& ev : report.variants) curve += "," + variant_name(ev.variant);
    curve += "\n";
    if (!report.variants.empty()) {
        const auto& iters = report.variants.front().curve_iters;
        for (std::size_t ci = 0; ci < iters.size(); ++ci) {
            curve += std::to_string(iters[ci]);
            for (const auto& ev : report.variants) curve += "," + fmt("%.6f", ev.curve_success[ci]);
            curve += "\n";
        }
    }
    write_text_file(fs::path(cfg.out_dir) / "asr_curve.csv", curve);
}

void stage_reproduce_report(const ExperimentConfig& cfg) {
    stage_gen_data(cfg);
    stage_train_autoencoder(cfg);
    stage_train_rldm(cfg);
    stage_train_fr(cfg);
    for (AttackVariant variant : kVariantOrder) stage_attack(cfg, variant);
    stage_evaluate(cfg);
}

}  // namespace advrestore
