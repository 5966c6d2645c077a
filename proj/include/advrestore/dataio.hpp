#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advrestore/rng.hpp"
#include "advrestore/tensor.hpp"

namespace advrestore {

struct DegradeParams {
    double blur_sigma = 1.0;
    int down_factor = 4;
    double noise_sigma = 0.02;
};

struct ImageRecord {
    int identity = 0;
    int variant = 0;
    Tensor hq;        // [1,H,W] in [0,1]
    Tensor degraded;  // same shape, produced by degrade()
};

struct FacePair {
    int a = 0;  // record index (attack pairs: source / attacker)
    int b = 0;  // record index (attack pairs: target, distinct identity)
};

struct Dataset {
    std::uint64_t seed = 0;
    int n_identities = 0;
    int n_variants = 0;
    int resolution = 32;
    DegradeParams degrade_params;
    std::vector<ImageRecord> records;
    std::vector<int> train_indices;
    std::vector<int> test_indices;
    std::vector<FacePair> genuine_pairs;   // test split, same identity
    std::vector<FacePair> impostor_pairs;  // test split, distinct identities
    std::vector<FacePair> attack_pairs;    // test split, distinct identities

    const ImageRecord& record(int index) const { return records[static_cast<std::size_t>(index)]; }
};

// Procedural face-like images: identity fixes the geometry, variants jitter
// pose/illumination/noise. Pure function of its arguments.
Dataset generate_synthetic_faces(std::uint64_t seed, int n_identities, int n_variants,
                                 const DegradeParams& params = {}, int resolution = 32);

// Blur -> box downsample -> additive noise -> nearest upsample -> clamp.
Tensor degrade(const Tensor& hq, const DegradeParams& params, std::uint64_t seed);

// 8-bit binary PGM (P5). Values are quantized to 1/255 steps.
void save_pgm(const std::string& path, const Tensor& image);
Tensor load_pgm(const std::string& path);

// Lossless raw tensor dump for exactness-critical fixtures.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Named-blob checkpoint container with an integrity digest.
struct CheckpointBlob {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    std::string kind;
    std::string config_json;
    std::vector<CheckpointBlob> blobs;

    const Tensor& find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind = "");

}  // namespace advrestore
