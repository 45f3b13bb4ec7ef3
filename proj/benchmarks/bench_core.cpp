#include <benchmark/benchmark.h>

#include "losa/config.hpp"
#include "losa/model.hpp"
#include "losa/ops.hpp"
#include "losa/train.hpp"

using namespace losa;

static void BM_Matmul(benchmark::State& state) {
    const std::int64_t n = state.range(0);
    Rng rng(1);
    Tensor a = Tensor::uniform({n, n}, rng, -1, 1);
    Tensor b = Tensor::uniform({n, n}, rng, -1, 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_CrossAttention(benchmark::State& state) {
    const std::int64_t rows = state.range(0);
    Rng rng(2);
    const std::int64_t c = 16;
    Tensor q = Tensor::uniform({rows, c}, rng, -1, 1);
    Tensor kv = Tensor::uniform({rows, c}, rng, -1, 1);
    Tensor w[4];
    for (auto& t : w) t = Tensor::uniform({c, c}, rng, -0.3, 0.3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(multihead_cross_attention(q, kv, kv, w[0], w[1], w[2], w[3], 4));
    }
}
BENCHMARK(BM_CrossAttention)->Arg(32)->Arg(128)->Arg(288);

static void BM_BackboneForward(benchmark::State& state) {
    RunConfig cfg = RunConfig::defaults();
    Backbone bb(cfg.model.backbone, 1);
    Rng rng(3);
    Tensor clip = Tensor::uniform({16, 16, 16, 3}, rng, 0, 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(bb.forward_clip(clip));
    }
}
BENCHMARK(BM_BackboneForward);

static void BM_LosaTrainStep(benchmark::State& state) {
    RunConfig cfg = RunConfig::defaults();
    GeneratorConfig g = split_generator(cfg, "train");
    g.num_videos = 1;
    g.min_len = 160;
    g.max_len = 160;
    const auto ds = generate(g);
    Model model(cfg.model, TrainMode::losa);
    const auto features = model.extract_features(model.make_clips(ds[0].video.frames));
    OptimConfig ocfg;
    AdamW opt(model.learnable_params(), ocfg);
    for (auto _ : state) {
        Tape tape;
        {
            TapeScope scope(tape);
            auto fwd = model.forward_from_features(features);
            Tensor loss = model.loss(fwd, ds[0].annotations, ds[0].video.length());
            backward(loss, tape);
        }
        opt.step(1e-4);
        opt.zero_grad();
    }
}
BENCHMARK(BM_LosaTrainStep);

BENCHMARK_MAIN();
