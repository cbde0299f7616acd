#include <benchmark/benchmark.h>

#include <random>

#include "ofq/qvit.hpp"

using namespace ofq;

namespace {

ModelConfig desk(AttentionMode mode) {
    ModelConfig m;
    m.attention = mode;
    return m;
}

// One forward+backward pass over a single 16×16 image.
void BM_QvitStep(benchmark::State& state) {
    QViT model(desk(state.range(0) ? AttentionMode::Qkr : AttentionMode::Naive), 0);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Tensor image(Shape{1, 16, 16});
    for (double& v : image.data()) v = d(rng);
    for (auto _ : state) {
        Graph g;
        g.backward(sum(model.forward(g, image)));
    }
    state.SetLabel(state.range(0) ? "qkr" : "naive");
}
BENCHMARK(BM_QvitStep)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

}  // namespace
