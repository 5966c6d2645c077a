#include "advrestore/facerec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace advrestore {

EmbeddingArch EmbeddingArch::from_seed(std::uint64_t arch_seed) {
    Rng rng(arch_seed ^ 0x9d2c5680u);
    EmbeddingArch a;
    a.n_blocks = rng.uniform_int(2, 3);
    a.base_ch = 2 * rng.uniform_int(5, 8);  // 10..16 even
    a.kernel = rng.uniform_int(0, 1) == 0 ? 3 : 5;
    a.embed_dim = 4 * rng.uniform_int(3, 5);  // 12..20
    a.gn_groups = 2;
    return a;
}

EmbeddingModel EmbeddingModel::create(ModelRole role, std::uint64_t arch_seed, int n_classes,
                                      int image_size, Rng& rng) {
    EmbeddingModel m;
    m.role = role;
    m.arch_seed = arch_seed;
    m.arch = EmbeddingArch::from_seed(arch_seed);
    m.image_size = image_size;
    m.n_classes = n_classes;
    const std::string prefix = role == ModelRole::Surrogate ? "fr.surrogate" : "fr.victim";
    int ch = 1;
    int out_ch = m.arch.base_ch;
    for (int bi = 0; bi < m.arch.n_blocks; ++bi) {
        m.convs.emplace_back(prefix + ".conv" + std::to_string(bi), ch, out_ch, m.arch.kernel, 2,
                             m.arch.kernel / 2, rng);
        m.norms.emplace_back(prefix + ".gn" + std::to_string(bi), out_ch, m.arch.gn_groups);
        ch = out_ch;
        out_ch = std::min(2 * out_ch, 4 * m.arch.base_ch);
    }
    m.head = LinearLayer(prefix + ".head", ch, m.arch.embed_dim, rng);
    m.classifier = LinearLayer(prefix + ".classifier", m.arch.embed_dim, n_classes, rng);
    return m;
}

std::vector<Parameter*> EmbeddingModel::params() {
    std::vector<Parameter*> out;
    for (auto& c : convs) c.collect(out);
    for (auto& n : norms) n.collect(out);
    head.collect(out);
    return out;
}

std::vector<Parameter*> EmbeddingModel::all_params() {
    std::vector<Parameter*> out = params();
    classifier.collect(out);
    return out;
}

Var EmbeddingModel::embed_var(Tape& tape, BoundParams& bp, Var image, const DropoutSpec* dropout) {
    const auto& shape = image.value().shape;
    if (shape != std::vector<int>{1, image_size, image_size}) {
        throw std::invalid_argument("embed: image " + shape_str(shape) + " does not match configured [1," +
                                    std::to_string(image_size) + "," + std::to_string(image_size) + "]");
    }
    if (dropout != nullptr && (dropout->probability < 0.0 || dropout->probability >= 1.0)) {
        throw std::invalid_argument("embed: dropout probability must lie in [0,1)");
    }
    Var h = image;
    for (std::size_t bi = 0; bi < convs.size(); ++bi) {
        h = tape.silu(norms[bi].forward(tape, bp, convs[bi].forward(tape, bp, h)));
        if (dropout != nullptr && dropout->probability > 0.0) {
            // Inverted dropout on the block's feature map, fresh mask per call.
            const double keep = 1.0 - dropout->probability;
            Tensor mask = Tensor::zeros(h.value().shape);
            for (double& v : mask.data) v = dropout->rng->uniform() < keep ? 1.0 / keep : 0.0;
            h = tape.mul(h, tape.constant(std::move(mask)));
        }
    }
    return head.forward(tape, bp, global_avg_pool(tape, h));
}

Var EmbeddingModel::logits_var(Tape& tape, BoundParams& bp, Var image) {
    return classifier.forward(tape, bp, embed_var(tape, bp, image));
}

Tensor EmbeddingModel::embed(const Tensor& image) {
    Tape tape;
    BoundParams bp;
    return embed_var(tape, bp, tape.constant(image)).value();
}

Tensor normalize_phi(const Tensor& v) {
    double norm_sq = 0.0;
    for (double x : v.data) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    if (norm <= 0.0) throw std::invalid_argument("normalize_phi: zero vector");
    Tensor out = v;
    for (double& x : out.data) x /= norm;
    return out;
}

double embedding_distance(const Tensor& a, const Tensor& b) {
    require_same_shape("embedding_distance", a, b);
    const Tensor pa = normalize_phi(a);
    const Tensor pb = normalize_phi(b);
    double acc = 0.0;
    for (std::size_t i = 0; i < pa.data.size(); ++i) {
        const double d = pa.data[i] - pb.data[i];
        acc += d * d;
    }
    return acc;
}

VerificationThreshold calibrate_threshold(const std::vector<double>& impostor_distances,
                                          double far_target) {
    if (impostor_distances.size() < 100) {
        throw std::invalid_argument("calibrate_threshold: need >= 100 impostor pairs, got " +
                                    std::to_string(impostor_distances.size()));
    }
    if (far_target < 0.0 || far_target > 1.0) {
        throw std::invalid_argument("calibrate_threshold: far target outside [0,1]");
    }
    std::vector<double> sorted = impostor_distances;
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<std::int64_t>(sorted.size());
    std::int64_t k = static_cast<std::int64_t>(std::floor(far_target * static_cast<double>(n)));
    VerificationThreshold t;
    t.far_target = far_target;
    t.n_pairs = static_cast<int>(n);
    t.threshold = sorted[static_cast<std::size_t>(std::min(k, n - 1))];
    return t;
}

namespace {

struct PairDistances {
    std::vector<double> genuine;
    std::vector<double> impostor;
};

PairDistances pair_distances(EmbeddingModel& model, const Dataset& ds) {
    PairDistances pd;
    // Embeddings of the HQ test images, computed once.
    std::vector<Tensor> cache(ds.records.size());
    std::vector<bool> have(ds.records.size(), false);
    auto embed_of = [&](int idx) -> const Tensor& {
        if (!have[static_cast<std::size_t>(idx)]) {
            cache[static_cast<std::size_t>(idx)] = model.embed(ds.record(idx).hq);
            have[static_cast<std::size_t>(idx)] = true;
        }
        return cache[static_cast<std::size_t>(idx)];
    };
    for (const FacePair& p : ds.genuine_pairs) {
        pd.genuine.push_back(embedding_distance(embed_of(p.a), embed_of(p.b)));
    }
    for (const FacePair& p : ds.impostor_pairs) {
        pd.impostor.push_back(embedding_distance(embed_of(p.a), embed_of(p.b)));
    }
    return pd;
}

}  // namespace

std::vector<double> impostor_distances(EmbeddingModel& model, const Dataset& ds) {
    return pair_distances(model, ds).impostor;
}

FrEvalReport evaluate_fr_model(EmbeddingModel& model, const Dataset& ds, double far_target) {
    const PairDistances pd = pair_distances(model, ds);
    if (pd.genuine.empty() || pd.impostor.empty()) {
        throw std::invalid_argument("evaluate_fr_model: need genuine and impostor pairs");
    }
    const VerificationThreshold thr = calibrate_threshold(pd.impostor, far_target);
    int genuine_ok = 0, impostor_ok = 0;
    double mg = 0.0, mi = 0.0;
    for (double d : pd.genuine) {
        if (d < thr.threshold) ++genuine_ok;
        mg += d;
    }
    for (double d : pd.impostor) {
        if (d >= thr.threshold) ++impostor_ok;
        mi += d;
    }
    FrEvalReport rep;
    rep.threshold = thr.threshold;
    rep.mean_genuine_distance = mg / static_cast<double>(pd.genuine.size());
    rep.mean_impostor_distance = mi / static_cast<double>(pd.impostor.size());
    // Balanced accuracy: genuine and impostor sides weighted equally.
    rep.verification_accuracy = 0.5 * (static_cast<double>(genuine_ok) / pd.genuine.size() +
                                       static_cast<double>(impostor_ok) / pd.impostor.size());
    return rep;
}

namespace {

double classification_step(EmbeddingModel& model, const std::vector<std::pair<const Tensor*, int>>& batch,
                           Adam& opt) {
    opt.zero_grad();
    double loss_acc = 0.0;
    for (const auto& [img, label] : batch) {
        Tape tape;
        BoundParams bp;
        Var logits = model.logits_var(tape, bp, tape.constant(*img));
        Var loss = tape.scale(tape.softmax_cross_entropy(logits, label), 1.0 / batch.size());
        tape.backward(loss);
        bp.accumulate_grads(tape);
        loss_acc += loss.value().item() * static_cast<double>(batch.size());
    }
    if (!std::isfinite(loss_acc)) throw std::runtime_error("train_fr_model: non-finite loss");
    opt.step();
    return loss_acc / static_cast<double>(batch.size());
}

}  // namespace

EmbeddingModel train_fr_model(const Dataset& ds, ModelRole role, std::uint64_t arch_seed,
                              const FrTrainConfig& cfg, Rng& rng) {
    if (ds.n_identities < 2) throw std::invalid_argument("train_fr_model: need >= 2 identities");
    Rng init = rng.fork("fr-init");
    EmbeddingModel model = EmbeddingModel::create(role, arch_seed, ds.n_identities, ds.resolution, init);
    Adam opt(model.all_params(), cfg.lr);
    Rng order = rng.fork("fr-batches");
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::pair<const Tensor*, int>> batch;
        for (int bi = 0; bi < cfg.batch; ++bi) {
            const int idx = ds.train_indices[static_cast<std::size_t>(
                order.uniform_int(0, static_cast<int>(ds.train_indices.size()) - 1))];
            const ImageRecord& rec = ds.record(idx);
            // Mix HQ and degraded views so embeddings tolerate both.
            batch.emplace_back(bi % 2 == 1 ? &rec.degraded : &rec.hq, rec.identity);
        }
        classification_step(model, batch, opt);
    }
    return model;
}

EmbeddingModel adversarial_finetune(const EmbeddingModel& model, const Dataset& ds,
                                    const AdversarialFinetuneConfig& cfg, Rng& rng) {
    EmbeddingModel tuned = model;  // deep copy: layers hold values
    Adam opt(tuned.all_params(), cfg.lr);
    Rng order = rng.fork("advtrain-batches");
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> adv_storage;
        adv_storage.reserve(static_cast<std::size_t>(cfg.batch));
        std::vector<std::pair<const Tensor*, int>> batch;
        for (int bi = 0; bi < cfg.batch; ++bi) {
            const int idx = ds.train_indices[static_cast<std::size_t>(
                order.uniform_int(0, static_cast<int>(ds.train_indices.size()) - 1))];
            const ImageRecord& rec = ds.record(idx);
            if (bi % 2 == 0) {
                batch.emplace_back(&rec.hq, rec.identity);
                continue;
            }
            // Single-step sign-gradient example on the current weights.
            Tape tape;
            BoundParams bp;
            Var x = tape.leaf(rec.hq);
            Var loss = tape.softmax_cross_entropy(tuned.classifier.forward(
                                                      tape, bp, tuned.embed_var(tape, bp, x)),
                                                  rec.identity);
            tape.backward(loss);
            const Tensor gx = tape.grad(x);
            Tensor adv = rec.hq;
            for (std::size_t i = 0; i < adv.data.size(); ++i) {
                adv.data[i] += cfg.budget * (gx.data[i] > 0.0 ? 1.0 : (gx.data[i] < 0.0 ? -1.0 : 0.0));
            }
            adv_storage.push_back(clamp01(adv));
            batch.emplace_back(&adv_storage.back(), rec.identity);
        }
        classification_step(tuned, batch, opt);
    }
    return tuned;
}

void save_embedding_model(const std::string& path, EmbeddingModel& model) {
    nlohmann::ordered_json cfg;
    cfg["role"] = model.role == ModelRole::Surrogate ? "surrogate" : "victim";
    cfg["arch_seed"] = model.arch_seed;
    cfg["image_size"] = model.image_size;
    cfg["n_classes"] = model.n_classes;
    Checkpoint ckpt;
    ckpt.kind = "embedding";
    ckpt.config_json = cfg.dump();
    for (const Parameter* p : model.all_params()) ckpt.blobs.push_back({p->name, p->value});
    save_checkpoint(path, ckpt);
}

EmbeddingModel load_embedding_model(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path, "embedding");
    const auto cfg = nlohmann::json::parse(ckpt.config_json);
    Rng init(0);
    EmbeddingModel model = EmbeddingModel::create(
        cfg["role"] == "surrogate" ? ModelRole::Surrogate : ModelRole::Victim, cfg["arch_seed"],
        cfg["n_classes"], cfg["image_size"], init);
    for (Parameter* p : model.all_params()) {
        const Tensor& t = ckpt.find(p->name);
        if (t.shape != p->value.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "'");
        }
        p->value = t;
        p->zero_grad();
    }
    return model;
}

}  // namespace advrestore
