#include "qdiff/tensor.hpp"

#include "qdiff/kernels.hpp"

#include <cmath>
#include <numeric>

namespace qdiff {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (auto d : shape_)
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
    if (shape_numel(shape_) != data_.size())
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_string(shape_));
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
    if (shape_.size() == 1) return 1;
    if (shape_.size() != 2) throw std::logic_error("rows() on tensor of shape " + shape_string(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() == 1) return shape_[0];
    if (shape_.size() != 2) throw std::logic_error("cols() on tensor of shape " + shape_string(shape_));
    return shape_[1];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (!same_shape(other))
        throw std::invalid_argument("add: shape " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    if (!same_shape(other))
        throw std::invalid_argument("sub: shape " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const std::size_t batch = x.rows(), in = x.cols(), out = w.rows();
    if (w.cols() != in)
        throw std::invalid_argument("linear: input width " + std::to_string(in) + " vs weight " +
                                    shape_string(w.shape()));
    if (bias && bias->size() != out)
        throw std::invalid_argument("linear: bias length " + std::to_string(bias->size()) +
                                    " vs output width " + std::to_string(out));
    Tensor y({batch, out});
    kernels::matmul_nt(x.values(), w.values(), y.values(), batch, in, out);
    if (bias) {
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < out; ++c) y.at(r, c) += (*bias)[c];
    }
    return y;
}

double sum(const Tensor& x) { return std::accumulate(x.raw().begin(), x.raw().end(), 0.0); }

double sum_squares(const Tensor& x) {
    double s = 0.0;
    for (double v : x.raw()) s += v * v;
    return s;
}

double mse(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mse: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

}  // namespace qdiff
