#include "advrestore/rldm.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace advrestore {

Autoencoder Autoencoder::create(const AutoencoderConfig& cfg, Rng& rng) {
    Autoencoder ae;
    ae.cfg = cfg;
    const int b = cfg.base_ch, m = cfg.mid_ch, l = cfg.latent_ch;
    ae.enc1 = Conv2dLayer("ae.enc1", 1, b, 3, 1, 1, rng);
    ae.egn1 = GroupNormLayer("ae.egn1", b, cfg.gn_groups);
    ae.enc2 = Conv2dLayer("ae.enc2", b, m, 2, 2, 0, rng);
    ae.egn2 = GroupNormLayer("ae.egn2", m, cfg.gn_groups);
    ae.enc3 = Conv2dLayer("ae.enc3", m, m, 2, 2, 0, rng);
    ae.egn3 = GroupNormLayer("ae.egn3", m, cfg.gn_groups);
    ae.enc4 = Conv2dLayer("ae.enc4", m, l, 3, 1, 1, rng);
    ae.dec1 = Conv2dLayer("ae.dec1", l, m, 3, 1, 1, rng);
    ae.dgn1 = GroupNormLayer("ae.dgn1", m, cfg.gn_groups);
    ae.dec2 = ConvT2dLayer("ae.dec2", m, m, 2, 2, 0, rng);
    ae.dgn2 = GroupNormLayer("ae.dgn2", m, cfg.gn_groups);
    ae.dec2b = Conv2dLayer("ae.dec2b", m, b, 3, 1, 1, rng);
    ae.dgn2b = GroupNormLayer("ae.dgn2b", b, cfg.gn_groups);
    ae.dec3 = ConvT2dLayer("ae.dec3", b, b, 2, 2, 0, rng);
    ae.dgn3 = GroupNormLayer("ae.dgn3", b, cfg.gn_groups);
    ae.dec4 = Conv2dLayer("ae.dec4", b, 1, 3, 1, 1, rng);
    return ae;
}

std::vector<Parameter*> Autoencoder::params() {
    std::vector<Parameter*> out;
    enc1.collect(out);
    egn1.collect(out);
    enc2.collect(out);
    egn2.collect(out);
    enc3.collect(out);
    egn3.collect(out);
    enc4.collect(out);
    dec1.collect(out);
    dgn1.collect(out);
    dec2.collect(out);
    dgn2.collect(out);
    dec2b.collect(out);
    dgn2b.collect(out);
    dec3.collect(out);
    dgn3.collect(out);
    dec4.collect(out);
    return out;
}

bool Autoencoder::frozen() { return all_frozen(params()); }

void Autoencoder::freeze() { set_trainable(params(), false); }

std::vector<int> Autoencoder::latent_shape() const {
    return {cfg.latent_ch, cfg.image_size / cfg.factor, cfg.image_size / cfg.factor};
}

Var Autoencoder::encode_var(Tape& tape, BoundParams& bp, Var image) {
    const auto& shape = image.value().shape;
    if (shape != std::vector<int>{1, cfg.image_size, cfg.image_size}) {
        throw std::invalid_argument("encode: image " + shape_str(shape) + " does not match configured [1," +
                                    std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) + "]");
    }
    Var h = tape.silu(egn1.forward(tape, bp, enc1.forward(tape, bp, image)));
    h = tape.silu(egn2.forward(tape, bp, enc2.forward(tape, bp, h)));
    h = tape.silu(egn3.forward(tape, bp, enc3.forward(tape, bp, h)));
    h = enc4.forward(tape, bp, h);
    // Normalized latent: (raw - shift) * scale.
    return tape.scale(tape.add_scalar(h, -latent_shift), latent_scale);
}

Var Autoencoder::decode_var(Tape& tape, BoundParams& bp, Var latent, ClampGrad clamp_mode,
                            bool clamp_output) {
    if (latent.value().shape != latent_shape()) {
        throw std::invalid_argument("decode: latent " + shape_str(latent.value().shape) +
                                    " does not match " + shape_str(latent_shape()));
    }
    Var h = tape.add_scalar(tape.scale(latent, 1.0 / latent_scale), latent_shift);
    h = tape.silu(dgn1.forward(tape, bp, dec1.forward(tape, bp, h)));
    h = tape.silu(dgn2.forward(tape, bp, dec2.forward(tape, bp, h)));
    h = tape.silu(dgn2b.forward(tape, bp, dec2b.forward(tape, bp, h)));
    h = tape.silu(dgn3.forward(tape, bp, dec3.forward(tape, bp, h)));
    h = dec4.forward(tape, bp, h);
    if (clamp_output) h = tape.clamp(h, 0.0, 1.0, clamp_mode);
    return h;
}

Tensor Autoencoder::encode(const Tensor& image) {
    ++encode_calls;
    Tape tape;
    BoundParams bp;
    return encode_var(tape, bp, tape.constant(image)).value();
}

Tensor Autoencoder::decode(const Tensor& latent) {
    ++decode_calls;
    Tape tape;
    BoundParams bp;
    return decode_var(tape, bp, tape.constant(latent)).value();
}

ConditionalUNet ConditionalUNet::create(const UNetConfig& cfg, Rng& rng) {
    ConditionalUNet u;
    u.cfg = cfg;
    const int b = cfg.base_ch, m = cfg.mid_ch, l = cfg.latent_ch, th = cfg.time_hidden;
    u.time_mlp = LinearLayer("unet.time_mlp", cfg.time_dim, th, rng);
    u.conv_in = Conv2dLayer("unet.conv_in", 2 * l, b, 3, 1, 1, rng);
    u.gn1 = GroupNormLayer("unet.gn1", b, cfg.gn_groups);
    u.conv1 = Conv2dLayer("unet.conv1", b, b, 3, 1, 1, rng);
    u.time1 = LinearLayer("unet.time1", th, b, rng);
    u.down = Conv2dLayer("unet.down", b, m, 2, 2, 0, rng);
    u.gn2 = GroupNormLayer("unet.gn2", m, cfg.gn_groups);
    u.conv2 = Conv2dLayer("unet.conv2", m, m, 3, 1, 1, rng);
    u.time2 = LinearLayer("unet.time2", th, m, rng);
    u.gn3 = GroupNormLayer("unet.gn3", m, cfg.gn_groups);
    u.conv3 = Conv2dLayer("unet.conv3", m, m, 3, 1, 1, rng);
    u.time3 = LinearLayer("unet.time3", th, m, rng);
    u.up = ConvT2dLayer("unet.up", m, b, 2, 2, 0, rng);
    u.gn4 = GroupNormLayer("unet.gn4", 2 * b, cfg.gn_groups);
    u.conv4 = Conv2dLayer("unet.conv4", 2 * b, b, 3, 1, 1, rng);
    u.time4 = LinearLayer("unet.time4", th, b, rng);
    u.gn_out = GroupNormLayer("unet.gn_out", b, cfg.gn_groups);
    u.conv_out = Conv2dLayer("unet.conv_out", b, l, 3, 1, 1, rng);
    return u;
}

std::vector<Parameter*> ConditionalUNet::params() {
    std::vector<Parameter*> out;
    time_mlp.collect(out);
    conv_in.collect(out);
    gn1.collect(out);
    conv1.collect(out);
    time1.collect(out);
    down.collect(out);
    gn2.collect(out);
    conv2.collect(out);
    time2.collect(out);
    gn3.collect(out);
    conv3.collect(out);
    time3.collect(out);
    up.collect(out);
    gn4.collect(out);
    conv4.collect(out);
    time4.collect(out);
    gn_out.collect(out);
    conv_out.collect(out);
    return out;
}

Var ConditionalUNet::forward_var(Tape& tape, BoundParams& bp, Var z_cond, Var z_noisy, int r) {
    require_same_shape("unet_forward", z_cond.value(), z_noisy.value());
    ++forward_calls;
    Var temb = tape.silu(time_mlp.forward(tape, bp, tape.constant(time_embed(r, cfg.time_dim))));
    Var h0 = conv_in.forward(tape, bp, tape.concat_channels(z_cond, z_noisy));
    Var h1 = conv1.forward(tape, bp, tape.silu(gn1.forward(tape, bp, h0)));
    h1 = tape.add(tape.bias_add(h1, time1.forward(tape, bp, temb)), h0);
    Var d = down.forward(tape, bp, h1);
    Var h2 = conv2.forward(tape, bp, tape.silu(gn2.forward(tape, bp, d)));
    h2 = tape.add(tape.bias_add(h2, time2.forward(tape, bp, temb)), d);
    Var h3 = conv3.forward(tape, bp, tape.silu(gn3.forward(tape, bp, h2)));
    h3 = tape.add(tape.bias_add(h3, time3.forward(tape, bp, temb)), h2);
    Var u = up.forward(tape, bp, h3);
    Var c = tape.concat_channels(u, h1);
    Var h4 = conv4.forward(tape, bp, tape.silu(gn4.forward(tape, bp, c)));
    h4 = tape.bias_add(h4, time4.forward(tape, bp, temb));
    return conv_out.forward(tape, bp, tape.silu(gn_out.forward(tape, bp, h4)));
}

Tensor ConditionalUNet::forward(const Tensor& z_cond, const Tensor& z_noisy, int r) {
    Tape tape;
    BoundParams bp;
    return forward_var(tape, bp, tape.constant(z_cond), tape.constant(z_noisy), r).value();
}

namespace {

std::vector<const ImageRecord*> training_pool(const Dataset& ds) {
    std::vector<const ImageRecord*> pool;
    for (int idx : ds.train_indices) pool.push_back(&ds.record(idx));
    if (pool.empty()) throw std::invalid_argument("training: empty train split");
    return pool;
}

}  // namespace

Autoencoder train_autoencoder(const Dataset& ds, const AutoencoderConfig& cfg,
                              const AutoencoderTrainConfig& tcfg, Rng& rng) {
    Rng init = rng.fork("ae-init");
    Autoencoder ae = Autoencoder::create(cfg, init);
    const auto pool = training_pool(ds);
    Adam opt(ae.params(), tcfg.lr);
    Rng order = rng.fork("ae-batches");
    for (int step = 0; step < tcfg.steps; ++step) {
        opt.zero_grad();
        double loss_acc = 0.0;
        for (int bi = 0; bi < tcfg.batch; ++bi) {
            const ImageRecord* rec = pool[static_cast<std::size_t>(
                order.uniform_int(0, static_cast<int>(pool.size()) - 1))];
            // Alternate HQ and degraded targets so the encoder covers both
            // input distributions seen later (z_hq and the condition z_d).
            const Tensor& img = (bi % 2 == 0) ? rec->hq : rec->degraded;
            Tape tape;
            BoundParams bp;
            Var x = tape.constant(img);
            Var z = ae.encode_var(tape, bp, x);
            if (tcfg.latent_noise > 0.0) {
                double rms = 0.0;
                for (double v : z.value().data) rms += v * v;
                rms = std::sqrt(rms / static_cast<double>(z.value().numel()));
                Tensor noise = order.normal_tensor(z.value().shape, tcfg.latent_noise * rms);
                z = tape.add(z, tape.constant(std::move(noise)));
            }
            Var y = ae.decode_var(tape, bp, z, ClampGrad::Exact, /*clamp_output=*/false);
            Var loss = tape.scale(tape.mse(y, x), 1.0 / tcfg.batch);
            tape.backward(loss);
            bp.accumulate_grads(tape);
            loss_acc += loss.value().item() * tcfg.batch;
        }
        if (!std::isfinite(loss_acc)) {
            throw std::runtime_error("train_autoencoder: non-finite loss at step " + std::to_string(step));
        }
        opt.step();
    }
    // Latent normalization over the train split, then freeze.
    double mean = 0.0, var = 0.0;
    long count = 0;
    std::vector<Tensor> latents;
    for (const ImageRecord* rec : pool) {
        latents.push_back(ae.encode(rec->hq));
        latents.push_back(ae.encode(rec->degraded));
    }
    for (const Tensor& z : latents) {
        for (double v : z.data) {
            mean += v;
            ++count;
        }
    }
    mean /= static_cast<double>(count);
    for (const Tensor& z : latents) {
        for (double v : z.data) var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(count);
    ae.latent_shift = mean;
    ae.latent_scale = 1.0 / std::sqrt(std::max(var, 1e-12));
    ae.freeze();
    return ae;
}

double autoencoder_test_psnr(Autoencoder& ae, const Dataset& ds) {
    if (ds.test_indices.empty()) throw std::invalid_argument("autoencoder_test_psnr: empty test split");
    double acc = 0.0;
    for (int idx : ds.test_indices) {
        const Tensor& x = ds.record(idx).hq;
        const Tensor y = ae.decode(ae.encode(x));
        const double mse = mean_squared_error(y, x);
        acc += mse == 0.0 ? 99.0 : std::min(10.0 * std::log10(1.0 / mse), 99.0);
    }
    return acc / static_cast<double>(ds.test_indices.size());
}

namespace {

double rldm_sample_step(RLDMModel& model, const Tensor& z_d, const Tensor& z_hq, BoundParams& bp,
                        Tape& tape, Rng& rng, double loss_scale) {
    const int r = rng.uniform_int(1, model.sched.n_steps);
    const Tensor xi = rng.normal_tensor(z_hq.shape);
    const Tensor z_noisy = q_sample(z_hq, r, xi, model.sched);
    Var eps = model.unet.forward_var(tape, bp, tape.constant(z_d), tape.constant(z_noisy), r);
    Var loss = tape.scale(tape.mse(eps, tape.constant(xi)), loss_scale);
    tape.backward(loss);
    bp.accumulate_grads(tape);
    return loss.value().item() / loss_scale;
}

}  // namespace

double train_rldm_step(RLDMModel& model, const std::vector<const ImageRecord*>& batch, Adam& opt,
                       Rng& rng) {
    if (!model.ae.frozen()) {
        throw std::runtime_error("train_rldm_step: autoencoder must be frozen before RLDM training");
    }
    if (batch.empty()) throw std::invalid_argument("train_rldm_step: empty batch");
    opt.zero_grad();
    double loss_acc = 0.0;
    for (const ImageRecord* rec : batch) {
        const Tensor z_hq = model.ae.encode(rec->hq);
        const Tensor z_d = model.ae.encode(rec->degraded);
        Tape tape;
        BoundParams bp;
        loss_acc += rldm_sample_step(model, z_d, z_hq, bp, tape, rng, 1.0 / batch.size());
    }
    if (!std::isfinite(loss_acc)) throw std::runtime_error("train_rldm_step: non-finite loss");
    opt.step();
    return loss_acc / static_cast<double>(batch.size());
}

std::vector<double> train_rldm(RLDMModel& model, const Dataset& ds, const RldmTrainConfig& tcfg,
                               Rng& rng) {
    if (!model.ae.frozen()) {
        throw std::runtime_error("train_rldm: autoencoder must be frozen before RLDM training");
    }
    const auto pool = training_pool(ds);
    // Enc is frozen: cache all latents once.
    std::vector<Tensor> z_hq, z_d;
    z_hq.reserve(pool.size());
    z_d.reserve(pool.size());
    for (const ImageRecord* rec : pool) {
        z_hq.push_back(model.ae.encode(rec->hq));
        z_d.push_back(model.ae.encode(rec->degraded));
    }
    Adam opt(model.unet.params(), tcfg.lr);
    Rng order = rng.fork("rldm-batches");
    Rng noise = rng.fork("rldm-noise");
    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(tcfg.steps));
    for (int step = 0; step < tcfg.steps; ++step) {
        opt.zero_grad();
        double loss_acc = 0.0;
        for (int bi = 0; bi < tcfg.batch; ++bi) {
            const int pick = order.uniform_int(0, static_cast<int>(pool.size()) - 1);
            Tape tape;
            BoundParams bp;
            loss_acc += rldm_sample_step(model, z_d[static_cast<std::size_t>(pick)],
                                         z_hq[static_cast<std::size_t>(pick)], bp, tape, noise,
                                         1.0 / tcfg.batch);
        }
        if (!std::isfinite(loss_acc)) {
            throw std::runtime_error("train_rldm: non-finite loss at step " + std::to_string(step));
        }
        opt.step();
        trace.push_back(loss_acc / static_cast<double>(tcfg.batch));
    }
    return trace;
}

RestoreResult restore(const Tensor& x_in, RLDMModel& model, std::uint64_t seed) {
    if (model.sub.steps.empty()) throw std::invalid_argument("restore: empty DDIM subsequence");
    const Tensor z_cond = model.ae.encode(x_in);
    Rng rng = Rng(seed).fork("restore");
    RestoreResult res;
    Tensor z = rng.normal_tensor(model.latent_shape());
    for (int i = model.sub.size() - 1; i >= 0; --i) {
        const int r = model.sub.steps[static_cast<std::size_t>(i)];
        const int r_prev = model.sub.prev(i);
        const Tensor eps = model.unet.forward(z_cond, z, r);
        if (i == 0) {
            res.z_prefinal = z;
            res.eps_final = eps;
            res.r_final = r;
        }
        std::optional<Tensor> noise;
        if (sigma_between(r, r_prev, model.sched) > 0.0) {
            noise = rng.normal_tensor(z.shape);
        }
        z = ddim_step(eps, z, r, r_prev, noise, model.sched);
    }
    res.z_final = z;
    res.x_restored = model.ae.decode(z);
    return res;
}

namespace {

void blobs_from_params(std::vector<CheckpointBlob>& blobs, const std::vector<Parameter*>& params) {
    for (const Parameter* p : params) blobs.push_back({p->name, p->value});
}

void params_from_blobs(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        const Tensor& t = ckpt.find(p->name);
        if (t.shape != p->value.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "': " +
                                     shape_str(t.shape) + " vs " + shape_str(p->value.shape));
        }
        p->value = t;
        p->zero_grad();
    }
}

}  // namespace

void save_rldm(const std::string& path, RLDMModel& model) {
    nlohmann::ordered_json cfg;
    cfg["ae"] = {{"image_size", model.ae.cfg.image_size}, {"base_ch", model.ae.cfg.base_ch},
                 {"mid_ch", model.ae.cfg.mid_ch},         {"latent_ch", model.ae.cfg.latent_ch},
                 {"factor", model.ae.cfg.factor},         {"gn_groups", model.ae.cfg.gn_groups}};
    cfg["unet"] = {{"latent_ch", model.unet.cfg.latent_ch}, {"base_ch", model.unet.cfg.base_ch},
                   {"mid_ch", model.unet.cfg.mid_ch},       {"time_dim", model.unet.cfg.time_dim},
                   {"time_hidden", model.unet.cfg.time_hidden}, {"gn_groups", model.unet.cfg.gn_groups}};
    cfg["latent_shift"] = model.ae.latent_shift;
    cfg["latent_scale"] = model.ae.latent_scale;
    cfg["ae_frozen"] = model.ae.frozen();
    Checkpoint ckpt;
    ckpt.kind = "rldm";
    ckpt.config_json = cfg.dump();
    blobs_from_params(ckpt.blobs, model.ae.params());
    blobs_from_params(ckpt.blobs, model.unet.params());
    std::vector<double> betas(model.sched.betas.begin(), model.sched.betas.end());
    ckpt.blobs.push_back({"schedule.betas", Tensor({model.sched.n_steps}, std::move(betas))});
    std::vector<double> steps;
    for (int s : model.sub.steps) steps.push_back(static_cast<double>(s));
    ckpt.blobs.push_back({"schedule.ddim_steps", Tensor({model.sub.size()}, std::move(steps))});
    save_checkpoint(path, ckpt);
}

RLDMModel load_rldm(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path, "rldm");
    const auto cfg = nlohmann::json::parse(ckpt.config_json);
    AutoencoderConfig acfg;
    acfg.image_size = cfg["ae"]["image_size"];
    acfg.base_ch = cfg["ae"]["base_ch"];
    acfg.mid_ch = cfg["ae"]["mid_ch"];
    acfg.latent_ch = cfg["ae"]["latent_ch"];
    acfg.factor = cfg["ae"]["factor"];
    acfg.gn_groups = cfg["ae"]["gn_groups"];
    UNetConfig ucfg;
    ucfg.latent_ch = cfg["unet"]["latent_ch"];
    ucfg.base_ch = cfg["unet"]["base_ch"];
    ucfg.mid_ch = cfg["unet"]["mid_ch"];
    ucfg.time_dim = cfg["unet"]["time_dim"];
    ucfg.time_hidden = cfg["unet"]["time_hidden"];
    ucfg.gn_groups = cfg["unet"]["gn_groups"];
    Rng init(0);
    RLDMModel model{Autoencoder::create(acfg, init), ConditionalUNet::create(ucfg, init),
                    VarianceSchedule{}, DdimSubsequence{}};
    model.ae.latent_shift = cfg["latent_shift"];
    model.ae.latent_scale = cfg["latent_scale"];
    params_from_blobs(ckpt, model.ae.params());
    params_from_blobs(ckpt, model.unet.params());
    if (cfg.value("ae_frozen", false)) model.ae.freeze();
    model.sched = VarianceSchedule::from_betas(ckpt.find("schedule.betas").data);
    DdimSubsequence sub;
    for (double s : ckpt.find("schedule.ddim_steps").data) sub.steps.push_back(static_cast<int>(s));
    model.sub = sub;
    return model;
}

}  // namespace advrestore
