#include "advrestore/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace advrestore {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                    std::to_string(data.size()));
    }
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const std::vector<int>& shape, double value) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
    return Tensor(std::move(shape), std::move(data));
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double& Tensor::at(int c, int y, int x) {
    const int h = shape[1], w = shape[2];
    return data[static_cast<std::size_t>((c * h + y) * w + x)];
}

double Tensor::at(int c, int y, int x) const {
    const int h = shape[1], w = shape[2];
    return data[static_cast<std::size_t>((c * h + y) * w + x)];
}

double Tensor::item() const {
    if (data.size() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape) + " is not scalar");
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::max_abs_diff(const Tensor& other) const {
    require_same_shape("max_abs_diff", *this, other);
    double m = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) m = std::max(m, std::fabs(data[i] - other.data[i]));
    return m;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor operator*(double s, const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data) v *= s;
    return out;
}

Tensor clamp01(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return out;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
    require_same_shape("mean_squared_error", a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

}  // namespace advrestore
