// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include "qdiff/calib.hpp"
#include "qdiff/fpq.hpp"
#include "qdiff/kernels.hpp"
#include "qdiff/rng.hpp"

#include <benchmark/benchmark.h>

using namespace qdiff;

namespace {

void matmul_args(benchmark::internal::Benchmark* b) {
    for (long batch : {256, 4096}) b->Args({batch, 64, 64});
    b->Args({4096, 2, 64});
}

template <auto Fn>
void BM_matmul(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0)), in = static_cast<std::size_t>(state.range(1)),
               out = static_cast<std::size_t>(state.range(2));
    Rng rng = stream(1, "bench/matmul");
    const Tensor x = randn(rng, {batch, in}), w = randn(rng, {out, in});
    std::vector<double> y(batch * out);
    for (auto _ : state) {
        Fn(x.values(), w.values(), y, batch, in, out);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(static_cast<long>(state.iterations() * batch * in * out));
}
BENCHMARK(BM_matmul<kernels::matmul_nt_serial>)->Name("matmul_nt/serial")->Apply(matmul_args);
BENCHMARK(BM_matmul<kernels::matmul_nt_omp>)->Name("matmul_nt/omp")->Apply(matmul_args);
BENCHMARK(BM_matmul<kernels::matmul_nt>)->Name("matmul_nt/dispatch")->Apply(matmul_args);

template <auto Fn>
void BM_quantize(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng = stream(2, "bench/quantize");
    const Tensor x = randn(rng, {n});
    const auto grid = fp_grid({{4, 3, false}, 3.0, -0.12});
    std::vector<double> out(n);
    for (auto _ : state) {
        Fn(grid, x.values(), out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<long>(state.iterations() * n));
}
BENCHMARK(BM_quantize<kernels::quantize_serial>)->Name("quantize/serial")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_quantize<kernels::quantize_omp>)->Name("quantize/omp")->Arg(1 << 12)->Arg(1 << 18);

// One activation-site search worth of candidate grids.
std::vector<std::vector<double>> candidate_grids() {
    const auto space = build_search_space(4, TensorRole::activation, false, 4.0);
    std::vector<std::vector<double>> grids;
    for (const auto& f : space.formats)
        for (double m : space.maxvals)
            for (double z : space.zero_points) grids.push_back(fp_grid({f, m, z}));
    return grids;
}

void BM_candidates_serial(benchmark::State& state) {
    Rng rng = stream(3, "bench/candidates");
    const Tensor x = randn(rng, {static_cast<std::size_t>(state.range(0))});
    const auto grids = candidate_grids();
    for (auto _ : state) benchmark::DoNotOptimize(kernels::candidate_mse_serial(grids, x.values()));
    state.SetItemsProcessed(static_cast<long>(state.iterations() * grids.size()));
}
BENCHMARK(BM_candidates_serial)->Name("candidate_mse/serial")->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_candidates_omp(benchmark::State& state) {
    Rng rng = stream(3, "bench/candidates");
    const Tensor x = randn(rng, {static_cast<std::size_t>(state.range(0))});
    const auto grids = candidate_grids();
    for (auto _ : state) {
        const kernels::SortedSamples sorted(x.raw());
        benchmark::DoNotOptimize(kernels::candidate_mse_omp(grids, sorted));
    }
    state.SetItemsProcessed(static_cast<long>(state.iterations() * grids.size()));
}
BENCHMARK(BM_candidates_omp)->Name("candidate_mse/omp")->Arg(4096)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
