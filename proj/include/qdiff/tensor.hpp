#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qdiff {

/// Dense row-major array of doubles. Every op in the library works on these;
/// 2-D tensors are treated as [rows, cols] batches.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor from(std::initializer_list<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }
    std::span<double> row(std::size_t r) {
        return std::span<double>(data_).subspan(r * cols(), cols());
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

std::string shape_string(const std::vector<std::size_t>& shape);
std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// y = x * w^T (+ bias), x: [B, in], w: [out, in], bias: [out] or empty.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);

double sum(const Tensor& x);
double sum_squares(const Tensor& x);

/// Mean of squared elementwise differences. Throws on shape mismatch.
double mse(const Tensor& a, const Tensor& b);

}  // namespace qdiff
