#include "advrestore/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace advrestore {

double psnr(const Tensor& a, const Tensor& b, double max_val) {
    require_same_shape("psnr", a, b);
    const double mse = mean_squared_error(a, b);
    if (mse == 0.0) return kPsnrSentinel;
    const double value = 10.0 * std::log10(max_val * max_val / mse);
    return std::min(value, kPsnrSentinel);
}

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_window() {
    static const std::vector<double> window = [] {
        std::vector<double> w(kWindow * kWindow);
        double total = 0.0;
        for (int y = 0; y < kWindow; ++y) {
            for (int x = 0; x < kWindow; ++x) {
                const double dy = y - kWindow / 2, dx = x - kWindow / 2;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kWindowSigma * kWindowSigma));
                w[static_cast<std::size_t>(y * kWindow + x)] = v;
                total += v;
            }
        }
        for (double& v : w) v /= total;
        return w;
    }();
    return window;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape("ssim", a, b);
    if (a.shape.size() != 3) throw std::invalid_argument("ssim: expected [C,H,W], got " + shape_str(a.shape));
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2];
    if (h < kWindow || w < kWindow) {
        throw std::invalid_argument("ssim: image " + shape_str(a.shape) + " smaller than the 11x11 window");
    }
    const auto& win = gaussian_window();
    double acc = 0.0;
    long count = 0;
    for (int ci = 0; ci < c; ++ci) {
        for (int oy = 0; oy + kWindow <= h; ++oy) {
            for (int ox = 0; ox + kWindow <= w; ++ox) {
                double mu_a = 0.0, mu_b = 0.0;
                for (int y = 0; y < kWindow; ++y) {
                    for (int x = 0; x < kWindow; ++x) {
                        const double wv = win[static_cast<std::size_t>(y * kWindow + x)];
                        mu_a += wv * a.at(ci, oy + y, ox + x);
                        mu_b += wv * b.at(ci, oy + y, ox + x);
                    }
                }
                double var_a = 0.0, var_b = 0.0, cov = 0.0;
                for (int y = 0; y < kWindow; ++y) {
                    for (int x = 0; x < kWindow; ++x) {
                        const double wv = win[static_cast<std::size_t>(y * kWindow + x)];
                        const double da = a.at(ci, oy + y, ox + x) - mu_a;
                        const double db = b.at(ci, oy + y, ox + x) - mu_b;
                        var_a += wv * da * da;
                        var_b += wv * db * db;
                        cov += wv * da * db;
                    }
                }
                const double num = (2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2);
                const double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
                acc += num / den;
                ++count;
            }
        }
    }
    return acc / static_cast<double>(count);
}

double QualityReport::mean_ssim() const {
    double acc = 0.0;
    for (double v : ssim_values) acc += v;
    return ssim_values.empty() ? 0.0 : acc / static_cast<double>(ssim_values.size());
}

double QualityReport::mean_psnr() const {
    double acc = 0.0;
    for (double v : psnr_values) acc += v;
    return psnr_values.empty() ? 0.0 : acc / static_cast<double>(psnr_values.size());
}

void QualityReport::add(const Tensor& image, const Tensor& reference) {
    ssim_values.push_back(ssim(image, reference));
    psnr_values.push_back(psnr(image, reference));
}

AsrReport attack_success_rate(const std::vector<double>& distances, const std::string& victim,
                              double threshold) {
    if (distances.empty()) throw std::invalid_argument("attack_success_rate: empty result set");
    AsrReport report;
    report.victim = victim;
    report.threshold = threshold;
    report.total = static_cast<int>(distances.size());
    for (double d : distances) {
        if (d < threshold) ++report.successes;
    }
    return report;
}

}  // namespace advrestore
