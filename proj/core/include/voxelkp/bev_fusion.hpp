#pragma once

// Multi-scale bird's-eye-view fusion. Each source stage is compressed along z
// by a per-height kernel into a 2D sparse map, remapped onto a shared lattice
// with the scale-offset trick (x*2^r + r), scaled by its normalized height
// weight, and group-summed where remapped positions coincide. All orders are
// pinned: fused rows are canonical, and each fused row accumulates its
// contributions by ascending (scale, source row).

#include <memory>
#include <string>
#include <vector>

#include "voxelkp/nn_ops.hpp"
#include "voxelkp/rulebook.hpp"
#include "voxelkp/sparse_tensor.hpp"
#include "voxelkp/tape.hpp"

namespace vkp {

struct BevConfig {
    int channels = 384;
    std::vector<int> scale_offsets{0, 1, 2};  // r per source, finest stage first

    int num_scales() const { return static_cast<int>(scale_offsets.size()); }
    // normalized height weight for source r: (r+1)/R, unit max at the top
    double height_weight(int index) const {
        return static_cast<double>(scale_offsets[index] + 1) / static_cast<double>(num_scales());
    }
};

inline void validate_bev_config(const BevConfig& cfg) {
    if (cfg.channels < 1) throw std::invalid_argument("bev: channels must be positive");
    if (cfg.scale_offsets.empty()) throw std::invalid_argument("bev: need at least one source scale");
    for (int r : cfg.scale_offsets)
        if (r < 0) throw std::invalid_argument("bev: scale offsets must be >= 0");
    for (size_t i = 0; i < cfg.scale_offsets.size(); ++i)
        for (size_t j = i + 1; j < cfg.scale_offsets.size(); ++j)
            if (cfg.scale_offsets[i] == cfg.scale_offsets[j])
                throw std::invalid_argument("bev: scale offsets must be distinct");
}

inline std::array<int32_t, 2> scale_offset_map(int32_t x, int32_t y, int r) {
    if (r < 0) throw std::invalid_argument("scale_offset_map: r must be >= 0");
    const int32_t f = int32_t{1} << r;
    return {x * f + r, y * f + r};
}

// ============================================================
// Height encoding: (1,1,h) kernel collapsing each occupied column
// ============================================================

struct HeightEncodePlan {
    std::shared_ptr<const Rulebook> rb;  // one kernel offset per z level
    std::vector<Coord3> out_coords;      // canonical 2D order
};

inline HeightEncodePlan build_height_encode_plan(const std::vector<Coord4>& coords, int z_cells) {
    ColumnPlan cp = build_column_rulebook(coords, z_cells);
    HeightEncodePlan plan;
    plan.rb = std::make_shared<const Rulebook>(std::move(cp.rb));
    plan.out_coords = std::move(cp.out_coords);
    return plan;
}

// weights: (z_cells * C_in) x C_bev, bias 1 x C_bev.
template <typename T>
int height_encode_apply(Tape<T>& tape, int x, const HeightEncodePlan& plan, Param<T>& weights,
                        Param<T>* bias) {
    return ops::rulebook_conv(tape, x, plan.rb, weights, bias);
}

template <typename T>
SparseTensor2D<T> height_encode(const SparseTensor3D<T>& t, const Mat<T>& weights, const Mat<T>& bias) {
    validate(t);
    if (weights.rows != t.spatial_shape[2] * t.features.cols)
        throw std::invalid_argument("height_encode: weight height/channel mismatch");
    HeightEncodePlan plan = build_height_encode_plan(t.indices, t.spatial_shape[2]);
    Param<T> w{"w", weights, Mat<T>(weights.rows, weights.cols), true};
    Param<T> b{"b", bias, Mat<T>(bias.rows, bias.cols), true};
    Tape<T> tape;
    int xi = tape.leaf(t.features);
    int y = height_encode_apply(tape, xi, plan, w, bias.size() ? &b : nullptr);
    SparseTensor2D<T> out;
    out.features = tape.val(y);
    out.indices = std::move(plan.out_coords);
    out.spatial_shape = {t.spatial_shape[0], t.spatial_shape[1]};
    out.batch_size = t.batch_size;
    validate(out);
    return out;
}

// ============================================================
// Scale-offset fusion
// ============================================================

struct FusePlan {
    std::vector<Coord3> out_coords;  // canonical order on the fused lattice
    std::array<int, 2> out_shape{0, 0};
    int batch_size = 0;
    std::vector<std::vector<int32_t>> target;  // per scale: input row -> fused row
    std::vector<double> weight;                // per scale: height weight
};

// Sources are given finest first; source i carries scale offset cfg.scale_offsets[i].
inline FusePlan build_fuse_plan(const std::vector<const std::vector<Coord3>*>& coords,
                                const std::vector<std::array<int, 2>>& shapes, int batch_size,
                                const BevConfig& cfg) {
    validate_bev_config(cfg);
    if (coords.size() != cfg.scale_offsets.size() || shapes.size() != coords.size())
        throw std::invalid_argument("bev fuse: source count does not match configured scales");
    FusePlan plan;
    plan.batch_size = batch_size;

    std::vector<std::vector<Coord3>> mapped(coords.size());
    for (size_t s = 0; s < coords.size(); ++s) {
        const int r = cfg.scale_offsets[s];
        plan.weight.push_back(cfg.height_weight(static_cast<int>(s)));
        mapped[s].reserve(coords[s]->size());
        for (const Coord3& c : *coords[s]) {
            const auto xy = scale_offset_map(c[1], c[2], r);
            mapped[s].push_back(Coord3{c[0], xy[0], xy[1]});
        }
        const auto extent = scale_offset_map(shapes[s][0] - 1, shapes[s][1] - 1, r);
        plan.out_shape[0] = std::max(plan.out_shape[0], extent[0] + 1);
        plan.out_shape[1] = std::max(plan.out_shape[1], extent[1] + 1);
    }

    std::vector<Coord3> all;
    for (const auto& m : mapped) all.insert(all.end(), m.begin(), m.end());
    std::sort(all.begin(), all.end(), [](const Coord3& a, const Coord3& b) { return coord_less(a, b); });
    all.erase(std::unique(all.begin(), all.end()), all.end());
    plan.out_coords = std::move(all);
    VoxelIndex index(plan.out_coords);
    plan.target.resize(mapped.size());
    for (size_t s = 0; s < mapped.size(); ++s) {
        plan.target[s].reserve(mapped[s].size());
        for (const Coord3& c : mapped[s]) plan.target[s].push_back(index.find(c));
    }
    return plan;
}

namespace ops {

// out[target[s][i]] += weight[s] * x_s[i]; contributions to one fused row
// arrive in ascending (scale, row) order because the loops run that way.
template <typename T>
int scale_group_sum(Tape<T>& tape, const std::vector<int>& xs, std::shared_ptr<const FusePlan> plan) {
    if (xs.size() != plan->target.size()) throw std::invalid_argument("scale_group_sum: source count mismatch");
    const int c = tape.val(xs[0]).cols;
    for (size_t s = 1; s < xs.size(); ++s)
        if (tape.val(xs[s]).cols != c) throw std::invalid_argument("scale_group_sum: channel mismatch");

    Mat<T> out(static_cast<int>(plan->out_coords.size()), c);
    for (size_t s = 0; s < xs.size(); ++s) {
        const Mat<T>& in = tape.val(xs[s]);
        if (in.rows != static_cast<int>(plan->target[s].size()))
            throw std::invalid_argument("scale_group_sum: row count mismatch");
        const T w = static_cast<T>(plan->weight[s]);
        for (int i = 0; i < in.rows; ++i) {
            T* dst = out.row(plan->target[s][i]);
            const T* src = in.row(i);
            for (int j = 0; j < c; ++j) dst[j] += w * src[j];
        }
    }
    return tape.emit(std::move(out), [xs, plan](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        for (size_t s = 0; s < xs.size(); ++s) {
            Mat<T>& gx = t.grad(xs[s]);
            const T w = static_cast<T>(plan->weight[s]);
            for (int i = 0; i < gx.rows; ++i) {
                const T* go = g.row(plan->target[s][i]);
                T* dst = gx.row(i);
                for (int j = 0; j < g.cols; ++j) dst[j] += w * go[j];
            }
        }
    });
}

}  // namespace ops

template <typename T>
SparseTensor2D<T> multiscale_fuse(const std::vector<const SparseTensor2D<T>*>& bevs, const BevConfig& cfg) {
    if (bevs.empty()) throw std::invalid_argument("bev fuse: no sources");
    std::vector<const std::vector<Coord3>*> coords;
    std::vector<std::array<int, 2>> shapes;
    for (const auto* b : bevs) {
        validate(*b);
        if (b->features.cols != bevs[0]->features.cols)
            throw std::invalid_argument("bev fuse: channel mismatch");
        if (b->batch_size != bevs[0]->batch_size)
            throw std::invalid_argument("bev fuse: batch size mismatch");
        coords.push_back(&b->indices);
        shapes.push_back(b->spatial_shape);
    }
    auto plan = std::make_shared<const FusePlan>(
        build_fuse_plan(coords, shapes, bevs[0]->batch_size, cfg));
    Tape<T> tape;
    std::vector<int> xs;
    for (const auto* b : bevs) xs.push_back(tape.leaf(b->features));
    int y = ops::scale_group_sum(tape, xs, plan);
    SparseTensor2D<T> out;
    out.features = tape.val(y);
    out.indices = plan->out_coords;
    out.spatial_shape = plan->out_shape;
    out.batch_size = bevs[0]->batch_size;
    validate(out);
    return out;
}

}  // namespace vkp
