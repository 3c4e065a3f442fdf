#include <benchmark/benchmark.h>

#include <cstdio>

#include "semicir/gallery.hpp"
#include "semicir/mining.hpp"
#include "semicir/model.hpp"
#include "semicir/training.hpp"

using namespace semicir;

namespace {

EmbeddingGallery random_gallery(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    EmbeddingGallery g(static_cast<std::uint32_t>(d));
    std::vector<double> v(d);
    char id[32];
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& x : v) x = rng.normal();
        std::snprintf(id, sizeof(id), "img%06zu", i);
        g.add(id, std::span<const double>(v));
    }
    return g;
}

void BM_TopK(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto g = random_gallery(n, 256, 1);
    std::size_t a = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(g.top_k(g.id(a), kDefaultTopK));
        a = (a + 1) % n;
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_TopK)->Arg(1000)->Arg(10000)->Arg(100000);

void BM_MineAll(benchmark::State& state) {
    const auto g = random_gallery(static_cast<std::size_t>(state.range(0)), 64, 2);
    const auto threads = static_cast<std::size_t>(state.range(1));
    for (auto _ : state) benchmark::DoNotOptimize(mine_all(g, MiningParams{}, threads));
}
BENCHMARK(BM_MineAll)->Args({2000, 1})->Args({2000, 4})->Args({10000, 4})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    ModelConfig mc;
    mc.image_dim = 23;
    mc.vocab_size = 64;
    FusionModel model(mc);
    Rng rng(3);
    std::vector<TripletFeatures> rows(2 * batch);
    for (auto& t : rows) {
        t.reference.resize(mc.image_dim);
        t.target.resize(mc.image_dim);
        for (auto& x : t.reference) x = rng.normal();
        for (auto& x : t.target) x = rng.normal();
        t.reference = l2_normalize(t.reference);
        t.target = l2_normalize(t.target);
        t.patches = Matrix(4, mc.image_dim);
        for (auto& x : t.patches.values()) x = rng.normal();
        for (int k = 0; k < 12; ++k) t.tokens.push_back(2 + rng.uniform_index(62));
    }
    MixedBatch mb;
    for (std::size_t i = 0; i < batch; ++i) {
        mb.supervised.push_back(&rows[i]);
        mb.pseudo.push_back(&rows[batch + i]);
    }
    TrainConfig tc;
    Gradients grads(model.param_count());
    AdamW opt(tc.adam_beta1, tc.adam_beta2, tc.weight_decay);
    for (auto _ : state) {
        std::fill(grads.begin(), grads.end(), 0.0);
        benchmark::DoNotOptimize(batch_loss(model, mb, tc, rng, &grads));
        opt.step(model.params(), grads, 1e-4);
    }
}
BENCHMARK(BM_TrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
