#include <benchmark/benchmark.h>

#include <random>

#include "ofq/quantizers.hpp"

using namespace ofq;

namespace {

Tensor uniform(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Tensor t(Shape{r, c});
    for (double& v : t.data()) v = d(rng);
    return t;
}

void BM_LsqQuantize(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor w = uniform(n, n, 1);
    const QuantSpec spec = QuantSpec::lsq(2, Granularity::LastDim);
    const Tensor scale = lsq_init_scale(w, spec);
    for (auto _ : state) benchmark::DoNotOptimize(lsq_quantize(w, scale, spec));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_LsqQuantize)->Arg(32)->Arg(128)->Arg(512);

void BM_StatsqQuantize(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor w = uniform(n, n, 2);
    const QuantSpec spec = QuantSpec::statsq(2, Granularity::LastDim);
    for (auto _ : state) benchmark::DoNotOptimize(statsq_quantize(w, spec));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_StatsqQuantize)->Arg(32)->Arg(128)->Arg(512);

// Integer-code matmul vs. the float product of the dequantized operands.
void BM_QuantizedMatmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const QuantSpec spec = QuantSpec::statsq(4, Granularity::LastDim);
    const QuantizedTensor x = statsq_quantize(uniform(n, n, 3), spec);
    const QuantizedTensor y = statsq_quantize(uniform(n, n, 4), spec);
    for (auto _ : state) benchmark::DoNotOptimize(quantized_matmul(x, y));
}
BENCHMARK(BM_QuantizedMatmul)->Arg(32)->Arg(128);

}  // namespace
