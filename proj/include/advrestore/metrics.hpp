#pragma once

#include <string>
#include <vector>

#include "advrestore/tensor.hpp"

namespace advrestore {

// Images are [C,H,W] in [0,1]. PSNR of identical images saturates at the
// 99 dB sentinel.
inline constexpr double kPsnrSentinel = 99.0;

double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1=(0.01L)^2,
// C2=(0.03L)^2 with L=1, averaged over valid window positions.
double ssim(const Tensor& a, const Tensor& b);

struct QualityReport {
    std::string anchor;  // what the images were compared against
    std::vector<double> ssim_values;
    std::vector<double> psnr_values;

    double mean_ssim() const;
    double mean_psnr() const;
    void add(const Tensor& image, const Tensor& reference);
};

struct AsrReport {
    std::string victim;
    double threshold = 0.0;
    int successes = 0;
    int total = 0;

    double asr_percent() const { return total == 0 ? 0.0 : 100.0 * successes / total; }
};

// ASR = share of pairs whose embedding distance to the target is strictly
// below the calibrated threshold.
AsrReport attack_success_rate(const std::vector<double>& distances, const std::string& victim,
                              double threshold);

}  // namespace advrestore
