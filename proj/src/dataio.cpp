#include "advrestore/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "advrestore/sha256.hpp"

namespace advrestore {

namespace {

double smoothstep(double edge0, double edge1, double x) {
    const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Anti-aliased ellipse coverage: 1 inside, 0 outside, soft rim.
double ellipse(double px, double py, double cx, double cy, double rx, double ry, double soft = 0.8) {
    const double dx = (px - cx) / rx, dy = (py - cy) / ry;
    const double d = std::sqrt(dx * dx + dy * dy);
    return 1.0 - smoothstep(1.0 - soft / std::min(rx, ry), 1.0 + soft / std::min(rx, ry), d);
}

struct IdentityParams {
    double cx, cy, rx, ry;
    double skin, background, bg_tilt;
    double eye_y, eye_dx, eye_r, eye_v;
    double brow_dy, brow_h, brow_v;
    double nose_len, nose_v;
    double mouth_y, mouth_w, mouth_h, mouth_curve, mouth_v;
    double hair_depth, hair_v;
    double tex_amp, tex_freq, tex_angle, tex_phase;
};

// Latin-hypercube draw across identities: every geometric parameter is
// stratified so no two identities land in the same stratum. Random iid draws
// at n=10..20 routinely produce near-duplicate identities, which collapses
// the impostor distance left tail (and with it any FAR-calibrated threshold).
struct IdentitySampler {
    int n;
    Rng& rng;
    std::vector<std::vector<int>> perms;
    int next_param = 0;
    int identity = 0;

    IdentitySampler(int n_identities, int n_params, Rng& rng_) : n(n_identities), rng(rng_) {
        perms.resize(static_cast<std::size_t>(n_params));
        for (auto& perm : perms) {
            perm.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
            for (int i = n - 1; i > 0; --i) {
                std::swap(perm[static_cast<std::size_t>(i)],
                          perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
            }
        }
    }

    void begin_identity(int id) {
        identity = id;
        next_param = 0;
    }

    double draw(double lo, double hi) {
        const auto& perm = perms[static_cast<std::size_t>(next_param++)];
        const double stratum = perm[static_cast<std::size_t>(identity)] + rng.uniform();
        return lo + (hi - lo) * stratum / n;
    }
};

constexpr int kIdentityParams = 27;

IdentityParams draw_identity(IdentitySampler& s) {
    IdentityParams p{};
    p.cx = 15.5 + s.draw(-1.0, 1.0);
    p.cy = 16.5 + s.draw(-1.0, 1.0);
    p.rx = s.draw(8.5, 11.5);
    p.ry = s.draw(10.5, 13.5);
    p.skin = s.draw(0.55, 0.82);
    p.background = s.draw(0.06, 0.28);
    p.bg_tilt = s.draw(-0.06, 0.06);
    p.eye_y = s.draw(12.0, 14.5);
    p.eye_dx = s.draw(3.6, 6.2);
    p.eye_r = s.draw(1.1, 2.2);
    p.eye_v = s.draw(0.04, 0.26);
    p.brow_dy = s.draw(2.0, 3.4);
    p.brow_h = s.draw(0.5, 1.1);
    p.brow_v = s.draw(0.18, 0.45);
    p.nose_len = s.draw(2.0, 4.6);
    p.nose_v = p.skin - s.draw(0.08, 0.2);
    p.mouth_y = s.draw(21.0, 24.0);
    p.mouth_w = s.draw(2.6, 5.2);
    p.mouth_h = s.draw(0.6, 1.3);
    p.mouth_curve = s.draw(-1.4, 1.4);
    p.mouth_v = s.draw(0.14, 0.4);
    p.hair_depth = s.draw(2.0, 6.0);
    p.hair_v = s.draw(0.04, 0.3);
    // Identity-coded skin micro-texture (a stubble/freckle analog): low
    // amplitude, but highly discriminative for the embedding models.
    p.tex_amp = s.draw(0.02, 0.05);
    p.tex_freq = s.draw(5.0, 13.0);
    p.tex_angle = s.draw(0.0, 3.14159265);
    p.tex_phase = s.draw(0.0, 6.28318531);
    return p;
}

struct VariantJitter {
    double dx, dy, gain, bias, tilt;
    double eye_dx_j, mouth_w_j, tex_phase_j;
    std::uint64_t noise_seed;
};

VariantJitter draw_variant(Rng& rng) {
    VariantJitter j{};
    j.dx = rng.uniform(-1.2, 1.2);
    j.dy = rng.uniform(-1.0, 1.0);
    j.gain = rng.uniform(0.92, 1.08);
    j.bias = rng.uniform(-0.04, 0.04);
    j.tilt = rng.uniform(-0.05, 0.05);
    j.eye_dx_j = rng.uniform(-0.2, 0.2);
    j.mouth_w_j = rng.uniform(-0.3, 0.3);
    j.tex_phase_j = rng.uniform(-0.4, 0.4);
    j.noise_seed = rng.next_u64();
    return j;
}

Tensor render_face(const IdentityParams& id, const VariantJitter& j, int res) {
    Tensor img = Tensor::zeros({1, res, res});
    const double cx = id.cx + j.dx, cy = id.cy + j.dy;
    const double eye_dx = id.eye_dx + j.eye_dx_j;
    const double mouth_w = id.mouth_w + j.mouth_w_j;
    Rng noise(j.noise_seed);
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const double fx = x + 0.5, fy = y + 0.5;
            double v = id.background + id.bg_tilt * (fx - res / 2.0) / res;

            const double face = ellipse(fx, fy, cx, cy, id.rx, id.ry);
            // Soft vertical shading over the face.
            const double shade = 1.0 - 0.12 * smoothstep(cy, cy + id.ry, fy);
            v = v * (1.0 - face) + id.skin * shade * face;

            // Hair band hugging the top of the face oval.
            const double hair = ellipse(fx, fy, cx, cy, id.rx * 1.02, id.ry * 1.02) *
                                smoothstep(cy - id.ry + id.hair_depth + 1.0, cy - id.ry + id.hair_depth - 1.0, fy);
            v = v * (1.0 - hair) + id.hair_v * hair;

            // Eyes and brows.
            for (int side = -1; side <= 1; side += 2) {
                const double ex = cx + side * eye_dx;
                const double ey = cy + (id.eye_y - id.cy);
                const double eye = ellipse(fx, fy, ex, ey, id.eye_r, id.eye_r * 0.75, 1.2);
                v = v * (1.0 - eye) + id.eye_v * eye;
                const double brow =
                    ellipse(fx, fy, ex, ey - id.brow_dy, id.eye_r * 1.5, id.brow_h, 1.4);
                v = v * (1.0 - brow) + id.brow_v * brow;
            }

            // Nose: slim vertical wedge below eye line.
            const double nose = ellipse(fx, fy, cx, cy + 1.5, 0.9, id.nose_len, 1.2);
            v = v * (1.0 - nose) + id.nose_v * nose;

            // Mouth with curvature.
            const double mx = (fx - cx) / std::max(mouth_w, 0.5);
            const double my = cy + (id.mouth_y - id.cy) + id.mouth_curve * mx * mx;
            const double mouth = ellipse(fx, fy, cx, my, mouth_w, id.mouth_h, 1.2);
            v = v * (1.0 - mouth) + id.mouth_v * mouth;

            // Identity micro-texture across the face region.
            const double tdir = std::cos(id.tex_angle) * fx + std::sin(id.tex_angle) * fy;
            v += face * id.tex_amp *
                 std::sin(6.28318531 * id.tex_freq * tdir / res + id.tex_phase + j.tex_phase_j);

            v = v * j.gain + j.bias + j.tilt * (fx - res / 2.0) / res;
            v += 0.008 * noise.normal();
            img.at(0, y, x) = std::clamp(v, 0.0, 1.0);
        }
    }
    return img;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : kernel) v /= total;
    const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
    Tensor tmp = Tensor::zeros(img.shape);
    Tensor out = Tensor::zeros(img.shape);
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::clamp(x + i, 0, w - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(ci, y, xx);
                }
                tmp.at(ci, y, x) = acc;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, h - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(ci, yy, x);
                }
                out.at(ci, y, x) = acc;
            }
    }
    return out;
}

}  // namespace

Tensor degrade(const Tensor& hq, const DegradeParams& params, std::uint64_t seed) {
    if (hq.shape.size() != 3) throw std::invalid_argument("degrade: expected [C,H,W]");
    const int c = hq.shape[0], h = hq.shape[1], w = hq.shape[2];
    const int f = params.down_factor;
    if (f < 1 || h % f != 0 || w % f != 0) {
        throw std::invalid_argument("degrade: resolution " + shape_str(hq.shape) +
                                    " not divisible by factor " + std::to_string(f));
    }
    Tensor blurred = gaussian_blur(hq, params.blur_sigma);
    const int lh = h / f, lw = w / f;
    Tensor low = Tensor::zeros({c, lh, lw});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < lh; ++y)
            for (int x = 0; x < lw; ++x) {
                double acc = 0.0;
                for (int yy = 0; yy < f; ++yy)
                    for (int xx = 0; xx < f; ++xx) acc += blurred.at(ci, y * f + yy, x * f + xx);
                low.at(ci, y, x) = acc / (f * f);
            }
    if (params.noise_sigma > 0.0) {
        Rng rng(seed);
        for (double& v : low.data) v += params.noise_sigma * rng.normal();
    }
    Tensor out = Tensor::zeros(hq.shape);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = low.at(ci, y / f, x / f);
    return clamp01(out);
}

Dataset generate_synthetic_faces(std::uint64_t seed, int n_identities, int n_variants,
                                 const DegradeParams& params, int resolution) {
    if (n_identities < 2 || n_variants < 2) {
        throw std::invalid_argument("generate_synthetic_faces: need >= 2 identities and >= 2 variants");
    }
    Dataset ds;
    ds.seed = seed;
    ds.n_identities = n_identities;
    ds.n_variants = n_variants;
    ds.resolution = resolution;
    ds.degrade_params = params;
    Rng root(seed);
    Rng id_rng = root.fork("identities");
    Rng var_rng = root.fork("variants");
    Rng deg_rng = root.fork("degradations");
    IdentitySampler sampler(n_identities, kIdentityParams, id_rng);
    for (int id = 0; id < n_identities; ++id) {
        sampler.begin_identity(id);
        const IdentityParams ip = draw_identity(sampler);
        for (int var = 0; var < n_variants; ++var) {
            const VariantJitter j = draw_variant(var_rng);
            ImageRecord rec;
            rec.identity = id;
            rec.variant = var;
            rec.hq = render_face(ip, j, resolution);
            rec.degraded = degrade(rec.hq, params, deg_rng.next_u64());
            ds.records.push_back(std::move(rec));
        }
    }
    // Last quarter of each identity's variants (at least 2 when possible) is
    // held out.
    const int test_per_id = std::min(n_variants - 1, std::max(2, n_variants / 4));
    for (int id = 0; id < n_identities; ++id) {
        for (int var = 0; var < n_variants; ++var) {
            const int idx = id * n_variants + var;
            if (var >= n_variants - test_per_id) {
                ds.test_indices.push_back(idx);
            } else {
                ds.train_indices.push_back(idx);
            }
        }
    }
    // Genuine pairs: all same-identity combinations within the test split.
    for (int id = 0; id < n_identities; ++id) {
        std::vector<int> own;
        for (int idx : ds.test_indices) {
            if (ds.records[static_cast<std::size_t>(idx)].identity == id) own.push_back(idx);
        }
        for (std::size_t i = 0; i < own.size(); ++i)
            for (std::size_t k = i + 1; k < own.size(); ++k) ds.genuine_pairs.push_back({own[i], own[k]});
    }
    // Impostor pairs: all cross-identity test combinations.
    for (std::size_t i = 0; i < ds.test_indices.size(); ++i) {
        for (std::size_t k = i + 1; k < ds.test_indices.size(); ++k) {
            const int a = ds.test_indices[i], b = ds.test_indices[k];
            if (ds.records[static_cast<std::size_t>(a)].identity !=
                ds.records[static_cast<std::size_t>(b)].identity) {
                ds.impostor_pairs.push_back({a, b});
            }
        }
    }
    // Attack pairs: sampled cross-identity test pairs, never same identity.
    Rng pair_rng = root.fork("attack-pairs");
    const int want = std::min<int>(200, static_cast<int>(ds.impostor_pairs.size()));
    for (int n = 0; n < want; ++n) {
        for (;;) {
            const int a = ds.test_indices[static_cast<std::size_t>(
                pair_rng.uniform_int(0, static_cast<int>(ds.test_indices.size()) - 1))];
            const int b = ds.test_indices[static_cast<std::size_t>(
                pair_rng.uniform_int(0, static_cast<int>(ds.test_indices.size()) - 1))];
            if (ds.records[static_cast<std::size_t>(a)].identity ==
                ds.records[static_cast<std::size_t>(b)].identity) {
                continue;
            }
            ds.attack_pairs.push_back({a, b});
            break;
        }
    }
    return ds;
}

void save_pgm(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 1) {
        throw std::invalid_argument("save_pgm: expected [1,H,W], got " + shape_str(image.shape));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_pgm: cannot open " + path);
    const int h = image.shape[1], w = image.shape[2];
    out << "P5\n" << w << ' ' << h << "\n255\n";
    for (double v : image.data) {
        const int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
        out.put(static_cast<char>(q));
    }
    if (!out) throw std::runtime_error("save_pgm: write failed for " + path);
}

namespace {

int pgm_next_token(const std::string& bytes, std::size_t& pos, const std::string& path) {
    while (pos < bytes.size()) {
        const char c = bytes[pos];
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        throw std::runtime_error("load_pgm: malformed header in " + path + " at byte offset " +
                                 std::to_string(pos));
    }
    int value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        value = value * 10 + (bytes[pos] - '0');
        ++pos;
    }
    return value;
}

}  // namespace

Tensor load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_pgm: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        throw std::runtime_error("load_pgm: unsupported magic in " + path + " at byte offset 0 (want P5)");
    }
    std::size_t pos = 2;
    const int w = pgm_next_token(bytes, pos, path);
    const int h = pgm_next_token(bytes, pos, path);
    const int maxval = pgm_next_token(bytes, pos, path);
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw std::runtime_error("load_pgm: unsupported geometry/maxval in " + path + " at byte offset " +
                                 std::to_string(pos));
    }
    if (pos >= bytes.size()) {
        throw std::runtime_error("load_pgm: truncated header in " + path + " at byte offset " +
                                 std::to_string(pos));
    }
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() - pos < static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
        throw std::runtime_error("load_pgm: truncated pixel data in " + path + " at byte offset " +
                                 std::to_string(bytes.size()));
    }
    Tensor img = Tensor::zeros({1, h, w});
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * static_cast<std::size_t>(h); ++i) {
        img.data[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
    }
    return img;
}

namespace {

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("read: truncated file " + path);
    return v;
}

constexpr char kTensorMagic[4] = {'T', '6', '4', '\x01'};

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensor: cannot open " + path);
    out.write(kTensorMagic, 4);
    write_raw(out, static_cast<std::int32_t>(t.shape.size()));
    for (int d : t.shape) write_raw(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensor: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw std::runtime_error("load_tensor: bad magic in " + path);
    }
    const auto ndim = read_raw<std::int32_t>(in, path);
    if (ndim < 1 || ndim > 8) throw std::runtime_error("load_tensor: bad rank in " + path);
    std::vector<int> shape(static_cast<std::size_t>(ndim));
    for (auto& d : shape) d = read_raw<std::int32_t>(in, path);
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_tensor: truncated data in " + path);
    return t;
}

namespace {

constexpr char kCkptMagic[4] = {'A', 'R', 'C', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_str(std::string& buf, const std::string& s) {
    append_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf.append(s);
}

std::uint32_t take_u32(const std::string& buf, std::size_t& pos, const std::string& path) {
    if (pos + 4 > buf.size()) throw std::runtime_error("load_checkpoint: truncated file " + path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

std::string take_str(const std::string& buf, std::size_t& pos, const std::string& path) {
    const std::uint32_t len = take_u32(buf, pos, path);
    if (pos + len > buf.size()) throw std::runtime_error("load_checkpoint: truncated file " + path);
    std::string s = buf.substr(pos, len);
    pos += len;
    return s;
}

}  // namespace

const Tensor& Checkpoint::find(const std::string& name) const {
    for (const auto& blob : blobs) {
        if (blob.name == name) return blob.tensor;
    }
    throw std::runtime_error("checkpoint: missing blob '" + name + "' in kind '" + kind + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string payload;
    payload.append(kCkptMagic, 4);
    append_u32(payload, kCkptVersion);
    append_str(payload, ckpt.kind);
    append_str(payload, ckpt.config_json);
    append_u32(payload, static_cast<std::uint32_t>(ckpt.blobs.size()));
    for (const auto& blob : ckpt.blobs) {
        append_str(payload, blob.name);
        append_u32(payload, static_cast<std::uint32_t>(blob.tensor.shape.size()));
        for (int d : blob.tensor.shape) append_u32(payload, static_cast<std::uint32_t>(d));
        const std::size_t old = payload.size();
        payload.resize(old + blob.tensor.data.size() * sizeof(double));
        std::memcpy(payload.data() + old, blob.tensor.data.data(),
                    blob.tensor.data.size() * sizeof(double));
    }
    const std::string digest = Sha256::of(payload.data(), payload.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(digest.data(), static_cast<std::streamsize>(digest.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 64 + 8) throw std::runtime_error("load_checkpoint: truncated file " + path);
    const std::string digest = bytes.substr(bytes.size() - 64);
    const std::string payload = bytes.substr(0, bytes.size() - 64);
    if (Sha256::of(payload.data(), payload.size()) != digest) {
        throw std::runtime_error("load_checkpoint: digest mismatch in " + path);
    }
    std::size_t pos = 0;
    if (payload.compare(0, 4, kCkptMagic, 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    pos = 4;
    const std::uint32_t version = take_u32(payload, pos, path);
    if (version != kCkptVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version) +
                                 " in " + path);
    }
    Checkpoint ckpt;
    ckpt.kind = take_str(payload, pos, path);
    if (!expected_kind.empty() && ckpt.kind != expected_kind) {
        throw std::runtime_error("load_checkpoint: kind '" + ckpt.kind + "' in " + path +
                                 ", expected '" + expected_kind + "'");
    }
    ckpt.config_json = take_str(payload, pos, path);
    const std::uint32_t n_blobs = take_u32(payload, pos, path);
    for (std::uint32_t bi = 0; bi < n_blobs; ++bi) {
        CheckpointBlob blob;
        blob.name = take_str(payload, pos, path);
        const std::uint32_t ndim = take_u32(payload, pos, path);
        if (ndim < 1 || ndim > 8) throw std::runtime_error("load_checkpoint: bad rank in " + path);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(take_u32(payload, pos, path));
        Tensor t = Tensor::zeros(shape);
        const std::size_t nbytes = t.data.size() * sizeof(double);
        if (pos + nbytes > payload.size()) throw std::runtime_error("load_checkpoint: truncated file " + path);
        std::memcpy(t.data.data(), payload.data() + pos, nbytes);
        pos += nbytes;
        blob.tensor = std::move(t);
        ckpt.blobs.push_back(std::move(blob));
    }
    return ckpt;
}

}  // namespace advrestore
