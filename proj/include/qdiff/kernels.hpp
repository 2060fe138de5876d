#pragma once

// Hot loops, each with a serial reference and an OpenMP version. The parallel
// versions partition work so every output element is produced by the same
// serial inner loop as the reference, so results are bitwise identical for any
// thread count.

#include <cstddef>
#include <span>
#include <vector>

namespace qdiff::kernels {

/// y[b, o] = sum_i x[b, i] * w[o, i]
void matmul_nt_serial(std::span<const double> x, std::span<const double> w, std::span<double> y,
                      std::size_t batch, std::size_t in, std::size_t out);
void matmul_nt_omp(std::span<const double> x, std::span<const double> w, std::span<double> y,
                   std::size_t batch, std::size_t in, std::size_t out);
void matmul_nt(std::span<const double> x, std::span<const double> w, std::span<double> y,
               std::size_t batch, std::size_t in, std::size_t out);

/// dx[b, i] = sum_o dy[b, o] * w[o, i]
void matmul_nn(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
               std::size_t batch, std::size_t in, std::size_t out);

/// dw[o, i] += sum_b dy[b, o] * x[b, i]
void matmul_tn_acc(std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                   std::size_t batch, std::size_t in, std::size_t out);

/// Nearest grid value for one input. `grid` sorted ascending, non-empty.
/// Ties go to the value of smaller magnitude, then to the smaller value.
double nearest(std::span<const double> grid, double x);

void quantize_serial(std::span<const double> grid, std::span<const double> x, std::span<double> out);
void quantize_omp(std::span<const double> grid, std::span<const double> x, std::span<double> out);
void quantize(std::span<const double> grid, std::span<const double> x, std::span<double> out);

/// Samples prepared once for many quantization-error evaluations.
struct SortedSamples {
    std::vector<double> values;             // original order
    std::vector<double> sorted;             // ascending
    std::vector<std::size_t> order;         // sorted[i] == values[order[i]]

    explicit SortedSamples(std::vector<double> samples);
};

/// mean((x - q(x))^2) evaluated directly in original sample order.
double quant_mse_serial(std::span<const double> grid, std::span<const double> x);

/// Same value, bit for bit, using a merge walk over the pre-sorted samples.
/// `scratch` must hold values.size() doubles.
double quant_mse_sorted(std::span<const double> grid, const SortedSamples& samples, std::span<double> scratch);

/// Quantization MSE for each candidate grid. Reference version loops serially.
std::vector<double> candidate_mse_serial(const std::vector<std::vector<double>>& grids, std::span<const double> x);
std::vector<double> candidate_mse_omp(const std::vector<std::vector<double>>& grids, const SortedSamples& samples);

}  // namespace qdiff::kernels
