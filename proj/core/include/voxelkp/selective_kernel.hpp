#pragma once

// Selective-kernel block: parallel submanifold convolutions with different
// receptive fields, fused by a squeeze/expand attention path whose softmax
// picks per-(sample, channel) branch weights; the weighted branches are then
// averaged. Active set is unchanged throughout.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "voxelkp/nn_ops.hpp"
#include "voxelkp/rulebook.hpp"
#include "voxelkp/sparse_nn.hpp"
#include "voxelkp/sparse_tensor.hpp"
#include "voxelkp/tape.hpp"

namespace vkp {

struct SskConfig {
    std::vector<int> kernel_sizes{3, 5};
    int channels = 0;

    int squeeze_dim() const { return static_cast<int>(std::lround(0.25 * channels)); }
};

inline void validate_ssk_config(const SskConfig& cfg) {
    if (cfg.kernel_sizes.size() < 2) throw std::invalid_argument("ssk: need at least 2 branches");
    for (int k : cfg.kernel_sizes)
        if (k < 1 || k % 2 == 0) throw std::invalid_argument("ssk: kernel sizes must be odd and positive");
    if (cfg.channels < 1) throw std::invalid_argument("ssk: channels must be positive");
    if (cfg.squeeze_dim() < 1) throw std::invalid_argument("ssk: squeeze dim must be >= 1");
}

template <typename T>
struct SskParams {
    std::vector<Param<T>*> conv_w, conv_b;
    Param<T>* squeeze_w = nullptr;
    Param<T>* squeeze_b = nullptr;
    ops::BatchNormState<T> squeeze_bn;
    std::vector<Param<T>*> expand_w, expand_b;
};

template <typename T>
SskParams<T> make_ssk_params(ParamStore<T>& store, const std::string& name, const SskConfig& cfg, Rng& rng) {
    validate_ssk_config(cfg);
    const int c = cfg.channels;
    const int z = cfg.squeeze_dim();
    SskParams<T> p;
    for (size_t r = 0; r < cfg.kernel_sizes.size(); ++r) {
        const int k = cfg.kernel_sizes[r];
        const int taps = k * k * k;
        auto& w = store.create(name + ".branch" + std::to_string(r) + ".conv.weight", taps * c, c);
        auto& b = store.create(name + ".branch" + std::to_string(r) + ".conv.bias", 1, c);
        init_uniform(w, rng, taps * c);
        init_uniform(b, rng, taps * c);
        p.conv_w.push_back(&w);
        p.conv_b.push_back(&b);
    }
    p.squeeze_w = &store.create(name + ".squeeze.weight", c, z);
    p.squeeze_b = &store.create(name + ".squeeze.bias", 1, z);
    init_uniform(*p.squeeze_w, rng, c);
    init_uniform(*p.squeeze_b, rng, c);
    p.squeeze_bn = ops::make_batch_norm(store, name + ".squeeze_bn", z);
    for (size_t r = 0; r < cfg.kernel_sizes.size(); ++r) {
        auto& w = store.create(name + ".expand" + std::to_string(r) + ".weight", z, c);
        auto& b = store.create(name + ".expand" + std::to_string(r) + ".bias", 1, c);
        init_uniform(w, rng, z);
        init_uniform(b, rng, z);
        p.expand_w.push_back(&w);
        p.expand_b.push_back(&b);
    }
    return p;
}

// Geometry shared by every forward on the same active set.
struct SskPlan {
    std::vector<std::shared_ptr<const Rulebook>> rulebooks;  // one per branch
    std::shared_ptr<const std::vector<int32_t>> row_batch;
    int batch_size = 0;
};

inline SskPlan build_ssk_plan(const std::vector<Coord4>& coords, const VoxelIndex& index,
                              const std::array<int, 3>& spatial_shape, int batch_size,
                              const SskConfig& cfg) {
    SskPlan plan;
    for (int k : cfg.kernel_sizes)
        plan.rulebooks.push_back(std::make_shared<const Rulebook>(
            build_subm_rulebook3d(coords, index, spatial_shape, {k, k, k})));
    plan.row_batch = std::make_shared<const std::vector<int32_t>>(batch_of_rows(coords));
    plan.batch_size = batch_size;
    return plan;
}

template <typename T>
struct SskOut {
    int out = -1;      // V x C, same active set as the input
    int weights = -1;  // (R*B) x C branch-selection weights
};

template <typename T>
SskOut<T> ssk_apply(Tape<T>& tape, int x, const SskPlan& plan, const SskParams<T>& p, bool training) {
    const int R = static_cast<int>(p.conv_w.size());
    const int B = plan.batch_size;
    std::vector<int> branch;
    for (int r = 0; r < R; ++r)
        branch.push_back(ops::rulebook_conv(tape, x, plan.rulebooks[r], *p.conv_w[r], p.conv_b[r]));

    int fused = branch[0];
    for (int r = 1; r < R; ++r) fused = ops::add(tape, fused, branch[r]);
    int gap = ops::sparse_gap(tape, fused, plan.row_batch, B);
    int z = ops::linear(tape, gap, *p.squeeze_w, p.squeeze_b);
    z = ops::batch_norm(tape, z, p.squeeze_bn, training);
    z = ops::relu(tape, z);

    std::vector<int> logits;
    for (int r = 0; r < R; ++r) logits.push_back(ops::linear(tape, z, *p.expand_w[r], p.expand_b[r]));
    SskOut<T> out;
    out.weights = ops::softmax_blocks(tape, logits);

    int acc = -1;
    for (int r = 0; r < R; ++r) {
        int w_r = ops::slice_rows(tape, out.weights, r * B, B);
        int scaled = ops::rows_scale_by_sample(tape, branch[r], w_r, plan.row_batch);
        acc = r == 0 ? scaled : ops::add(tape, acc, scaled);
    }
    out.out = ops::scale(tape, acc, T(1) / static_cast<T>(R));
    return out;
}

// One-shot wrapper over a standalone tensor, for tests and oracles.
template <typename T>
SparseTensor3D<T> ssk_forward(const SparseTensor3D<T>& t, const SskConfig& cfg, const SskParams<T>& p,
                              bool training = true) {
    validate(t);
    if (t.features.cols != cfg.channels) throw std::invalid_argument("ssk: channel mismatch");
    VoxelIndex index(t.indices);
    SskPlan plan = build_ssk_plan(t.indices, index, t.spatial_shape, t.batch_size, cfg);
    Tape<T> tape;
    int x = tape.leaf(t.features);
    SskOut<T> y = ssk_apply(tape, x, plan, p, training);
    SparseTensor3D<T> out;
    out.features = tape.val(y.out);
    out.indices = t.indices;
    out.spatial_shape = t.spatial_shape;
    out.batch_size = t.batch_size;
    return out;
}

}  // namespace vkp
