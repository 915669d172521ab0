#include <benchmark/benchmark.h>

#include "voxelkp/nn_ops.hpp"
#include "voxelkp/point_cloud.hpp"
#include "voxelkp/rng.hpp"
#include "voxelkp/sparse_nn.hpp"

namespace {

vkp::PointCloud<float> synthetic_cloud(int n, vkp::Rng& rng) {
    vkp::PointCloud<float> pc;
    pc.points = vkp::Mat<float>(n, 4);
    for (int i = 0; i < n; ++i) {
        pc.points(i, 0) = static_cast<float>(rng.uniform(-20.0, 20.0));
        pc.points(i, 1) = static_cast<float>(rng.uniform(-20.0, 20.0));
        pc.points(i, 2) = static_cast<float>(rng.uniform(-1.5, 1.5));
        pc.points(i, 3) = static_cast<float>(rng.uniform(0.0, 1.0));
    }
    return pc;
}

vkp::SparseTensor3D<float> bench_tensor(int channels, vkp::Rng& rng) {
    vkp::VoxelGridSpec spec;
    spec.range_min = {-20.0, -20.0, -2.0};
    spec.range_max = {20.0, 20.0, 4.0};
    spec.voxel_size = {0.2, 0.2, 0.2};
    auto t = vkp::voxelize(synthetic_cloud(20000, rng), spec);
    vkp::SparseTensor3D<float> wide;
    wide.indices = t.indices;
    wide.spatial_shape = t.spatial_shape;
    wide.batch_size = t.batch_size;
    wide.features = vkp::Mat<float>(t.features.rows, channels);
    for (size_t i = 0; i < wide.features.size(); ++i)
        wide.features.data[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    return wide;
}

void bm_voxelize(benchmark::State& state) {
    vkp::Rng rng(1);
    auto pc = synthetic_cloud(50000, rng);
    vkp::VoxelGridSpec spec;
    spec.range_min = {-20.0, -20.0, -2.0};
    spec.range_max = {20.0, 20.0, 4.0};
    spec.voxel_size = {0.1, 0.1, 0.1};
    for (auto _ : state) {
        auto t = vkp::voxelize(pc, spec);
        benchmark::DoNotOptimize(t.features.data.data());
    }
}
BENCHMARK(bm_voxelize)->Unit(benchmark::kMillisecond);

void bm_subm_conv_forward(benchmark::State& state) {
    vkp::Rng rng(2);
    const int c = static_cast<int>(state.range(0));
    auto t = bench_tensor(c, rng);
    vkp::VoxelIndex index(t.indices);
    auto rb = std::make_shared<vkp::Rulebook>(
        vkp::build_subm_rulebook3d(t.indices, index, t.spatial_shape, {3, 3, 3}));
    vkp::ParamStore<float> store;
    auto& w = store.create("w", 27 * c, c);
    vkp::init_uniform(w, rng, 27 * c);
    for (auto _ : state) {
        vkp::Tape<float> tape;
        int x = tape.leaf(t.features);
        int y = vkp::ops::rulebook_conv(tape, x, rb, w, static_cast<vkp::Param<float>*>(nullptr));
        benchmark::DoNotOptimize(tape.val(y).data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rb->pair_count()));
}
BENCHMARK(bm_subm_conv_forward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void bm_subm_conv_train_step(benchmark::State& state) {
    vkp::Rng rng(3);
    const int c = static_cast<int>(state.range(0));
    auto t = bench_tensor(c, rng);
    vkp::VoxelIndex index(t.indices);
    auto rb = std::make_shared<vkp::Rulebook>(
        vkp::build_subm_rulebook3d(t.indices, index, t.spatial_shape, {3, 3, 3}));
    vkp::ParamStore<float> store;
    auto& w = store.create("w", 27 * c, c);
    vkp::init_uniform(w, rng, 27 * c);
    for (auto _ : state) {
        vkp::Tape<float> tape;
        int x = tape.leaf(t.features);
        int y = vkp::ops::rulebook_conv(tape, x, rb, w, static_cast<vkp::Param<float>*>(nullptr));
        int loss = vkp::ops::sum_all(tape, vkp::ops::relu(tape, y));
        store.zero_grads();
        tape.backward(loss);
        benchmark::DoNotOptimize(w.grad.data.data());
    }
}
BENCHMARK(bm_subm_conv_train_step)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
