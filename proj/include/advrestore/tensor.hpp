#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace advrestore {

// Dense row-major n-d array of doubles. The single value type for images,
// latents, embeddings and gradients.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> shape_, std::vector<double> data_);

    static Tensor zeros(const std::vector<int>& shape);
    static Tensor full(const std::vector<int>& shape, double value);
    static Tensor scalar(double value);
    static Tensor from(std::vector<int> shape, std::vector<double> data);

    std::int64_t numel() const;
    bool empty() const { return data.empty(); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 3-d accessors for [C,H,W] layouts.
    double& at(int c, int y, int x);
    double at(int c, int y, int x) const;

    double item() const;  // requires numel()==1

    bool all_finite() const;
    double max_abs() const;
    double max_abs_diff(const Tensor& other) const;
};

std::string shape_str(const std::vector<int>& shape);
std::int64_t shape_numel(const std::vector<int>& shape);

// Throws std::invalid_argument naming `op` and both shapes when they differ.
void require_same_shape(const char* op, const Tensor& a, const Tensor& b);

// Elementwise helpers (value-level, outside the autodiff tape).
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor clamp01(const Tensor& a);

double mean_squared_error(const Tensor& a, const Tensor& b);

}  // namespace advrestore
