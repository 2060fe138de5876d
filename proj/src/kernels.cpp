#include "qdiff/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <omp.h>

namespace qdiff::kernels {

namespace {
// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 16;

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// y[o0..o0+3] of one batch row. Four independent chains, each summed in the
// same order as dot(), so results are bitwise equal to it.
inline void dot4(const double* x, const double* w, std::size_t in, double* y) {
    const double *w0 = w, *w1 = w + in, *w2 = w + 2 * in, *w3 = w + 3 * in;
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
        const double v = x[i];
        s0 += v * w0[i];
        s1 += v * w1[i];
        s2 += v * w2[i];
        s3 += v * w3[i];
    }
    y[0] = s0;
    y[1] = s1;
    y[2] = s2;
    y[3] = s3;
}

inline void matmul_row(const double* x, const double* w, double* y, std::size_t in, std::size_t out) {
    std::size_t o = 0;
    for (; o + 4 <= out; o += 4) dot4(x, w + o * in, in, y + o);
    for (; o < out; ++o) y[o] = dot(x, w + o * in, in);
}
}  // namespace

void matmul_nt_serial(std::span<const double> x, std::span<const double> w, std::span<double> y,
                      std::size_t batch, std::size_t in, std::size_t out) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o) y[b * out + o] = dot(&x[b * in], &w[o * in], in);
}

void matmul_nt_omp(std::span<const double> x, std::span<const double> w, std::span<double> y,
                   std::size_t batch, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
    for (long long b = 0; b < static_cast<long long>(batch); ++b)
        matmul_row(&x[b * in], w.data(), &y[b * out], in, out);
}

void matmul_nt(std::span<const double> x, std::span<const double> w, std::span<double> y,
               std::size_t batch, std::size_t in, std::size_t out) {
    if (batch * in * out >= kParallelWork && omp_get_max_threads() > 1) {
        matmul_nt_omp(x, w, y, batch, in, out);
        return;
    }
    for (std::size_t b = 0; b < batch; ++b) matmul_row(&x[b * in], w.data(), &y[b * out], in, out);
}

void matmul_nn(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
               std::size_t batch, std::size_t in, std::size_t out) {
    const bool par = batch * in * out >= kParallelWork && omp_get_max_threads() > 1;
#pragma omp parallel for schedule(static) if (par)
    for (long long b = 0; b < static_cast<long long>(batch); ++b) {
        double* row = &dx[b * in];
        std::fill(row, row + in, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[b * out + o];
            const double* wr = &w[o * in];
            for (std::size_t i = 0; i < in; ++i) row[i] += g * wr[i];
        }
    }
}

void matmul_tn_acc(std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                   std::size_t batch, std::size_t in, std::size_t out) {
    const bool par = batch * in * out >= kParallelWork && omp_get_max_threads() > 1;
#pragma omp parallel for schedule(static) if (par)
    for (long long o = 0; o < static_cast<long long>(out); ++o) {
        double* row = &dw[o * in];
        for (std::size_t b = 0; b < batch; ++b) {
            const double g = dy[b * out + o];
            const double* xr = &x[b * in];
            for (std::size_t i = 0; i < in; ++i) row[i] += g * xr[i];
        }
    }
}

namespace {
// a - b as rounded value plus exact rounding error (Knuth two-sum).
inline double diff_err(double a, double b, double& err) {
    const double r = a - b;
    const double bb = a - r;
    err = (a - (r + bb)) + (bb - b);
    return r;
}

// lo <= x < hi. Distances are compared exactly: when the rounded differences
// agree, their rounding errors decide.
inline double pick(double lo, double hi, double x) {
    double el = 0.0, eh = 0.0;
    const double dl = diff_err(x, lo, el), dh = diff_err(hi, x, eh);
    if (dl < dh || (dl == dh && el < eh)) return lo;
    if (dh < dl || (dl == dh && eh < el)) return hi;
    const double al = std::fabs(lo), ah = std::fabs(hi);
    if (al < ah) return lo;
    if (ah < al) return hi;
    return lo;
}
}  // namespace

double nearest(std::span<const double> grid, double x) {
    auto it = std::upper_bound(grid.begin(), grid.end(), x);
    if (it == grid.begin()) return grid.front();
    if (it == grid.end()) return grid.back();
    return pick(*(it - 1), *it, x);
}

void quantize_serial(std::span<const double> grid, std::span<const double> x, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = nearest(grid, x[i]);
}

void quantize_omp(std::span<const double> grid, std::span<const double> x, std::span<double> out) {
    const auto n = static_cast<long long>(x.size());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < n; ++i) out[i] = nearest(grid, x[i]);
}

void quantize(std::span<const double> grid, std::span<const double> x, std::span<double> out) {
    if (x.size() * 8 >= kParallelWork && omp_get_max_threads() > 1)
        quantize_omp(grid, x, out);
    else
        quantize_serial(grid, x, out);
}

SortedSamples::SortedSamples(std::vector<double> samples) : values(std::move(samples)) {
    order.resize(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    sorted.resize(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = values[order[i]];
}

double quant_mse_serial(std::span<const double> grid, std::span<const double> x) {
    if (x.empty()) return 0.0;
    double s = 0.0;
    for (double v : x) {
        const double d = v - nearest(grid, v);
        s += d * d;
    }
    return s / static_cast<double>(x.size());
}

double quant_mse_sorted(std::span<const double> grid, const SortedSamples& samples, std::span<double> scratch) {
    const std::size_t n = samples.values.size();
    if (n == 0) return 0.0;
    // Walk sorted samples alongside the grid; `j` is the first grid index with
    // grid[j] > x, exactly what upper_bound yields in nearest().
    std::size_t j = 0;
    const std::size_t g = grid.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = samples.sorted[i];
        while (j < g && grid[j] <= x) ++j;
        double q;
        if (j == 0)
            q = grid.front();
        else if (j == g)
            q = grid.back();
        else
            q = pick(grid[j - 1], grid[j], x);
        scratch[samples.order[i]] = q;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = samples.values[i] - scratch[i];
        s += d * d;
    }
    return s / static_cast<double>(n);
}

std::vector<double> candidate_mse_serial(const std::vector<std::vector<double>>& grids, std::span<const double> x) {
    std::vector<double> out(grids.size());
    for (std::size_t c = 0; c < grids.size(); ++c) out[c] = quant_mse_serial(grids[c], x);
    return out;
}

std::vector<double> candidate_mse_omp(const std::vector<std::vector<double>>& grids, const SortedSamples& samples) {
    std::vector<double> out(grids.size());
    const auto n = static_cast<long long>(grids.size());
#pragma omp parallel
    {
        std::vector<double> scratch(samples.values.size());
#pragma omp for schedule(dynamic, 4)
        for (long long c = 0; c < n; ++c) out[c] = quant_mse_sorted(grids[c], samples, scratch);
    }
    return out;
}

}  // namespace qdiff::kernels
