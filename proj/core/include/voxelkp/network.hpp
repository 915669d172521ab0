#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "voxelkp/bev_fusion.hpp"
#include "voxelkp/box_attention.hpp"
#include "voxelkp/point_cloud.hpp"
#include "voxelkp/selective_kernel.hpp"

namespace vkp {

struct NetworkConfig {
    std::vector<int> channels{64, 128, 256, 256, 256};  // stem output, then stages 1..4
    std::array<int, 3> grid_shape{480, 480, 60};        // voxel grid extents, fixed at build time
    int input_channels = 4;
    int bev_channels = 384;
    int keypoints = 14;
    int head_hidden = 64;
    int ssk_blocks = 2;
    int attention_blocks = 2;
    int attention_heads = 4;
    std::array<int, 3> box_size{8, 8, 8};
    std::vector<int> ssk_kernels{3, 5};
    double iou_score_weight = 0.5;
    bool direct3d_heads = false;  // ablation: heads on the column-collapsed stage-4 map
};

inline std::array<int, 3> halved_shape(const std::array<int, 3>& s) {
    return {(s[0] + 1) / 2, (s[1] + 1) / 2, (s[2] + 1) / 2};
}

// stage 0 = stem output; stages 1..4 halve once more each.
inline std::array<int, 3> stage_shape(const NetworkConfig& cfg, int stage) {
    std::array<int, 3> s = cfg.grid_shape;
    for (int i = 0; i <= stage; ++i) s = halved_shape(s);
    return s;
}

inline void validate_network_config(const NetworkConfig& cfg) {
    if (cfg.channels.size() != 5)
        throw std::invalid_argument("network: channels needs five entries (stem + four stages)");
    for (int c : cfg.channels)
        if (c < 1) throw std::invalid_argument("network: channel counts must be positive");
    if (cfg.input_channels < 1) throw std::invalid_argument("network: input channels must be positive");
    if (cfg.keypoints < 1) throw std::invalid_argument("network: keypoint count must be positive");
    if (cfg.head_hidden < 1 || cfg.bev_channels < 1)
        throw std::invalid_argument("network: head widths must be positive");
    if (cfg.ssk_blocks < 1 || cfg.attention_blocks < 1)
        throw std::invalid_argument("network: block counts must be positive");
    for (int s : {3, 4})
        if (cfg.channels[s] % cfg.attention_heads != 0)
            throw std::invalid_argument("network: attention stage channels not divisible by head count");
    for (int a = 0; a < 3; ++a)
        if (cfg.grid_shape[a] < 1) throw std::invalid_argument("network: empty grid");
}

// Head groups in emission order: widths depend only on the keypoint count.
inline std::vector<std::pair<std::string, int>> head_layout(int keypoints) {
    const int set = 1 + keypoints;  // center plus one value per keypoint
    return {{"heatmap", 1},  {"size", 3}, {"rotation", 2},           {"xset", set},
            {"yset", set},   {"zset", set}, {"visibility", keypoints}, {"iou", 1}};
}

template <typename T>
struct ConvBn {
    Param<T>* w = nullptr;
    ops::BatchNormState<T> bn;
};

template <typename T>
struct LinearBn {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    ops::BatchNormState<T> bn;
};

template <typename T>
struct HeadParams {
    Param<T>* conv_w = nullptr;
    Param<T>* conv_b = nullptr;
    Param<T>* out_w = nullptr;
    Param<T>* out_b = nullptr;
};

template <typename T>
struct StageParams {
    ConvBn<T> down;
    std::vector<SskParams<T>> ssk;            // stages 1..2
    std::vector<ops::BatchNormState<T>> ssk_bn;    // residual wrapper norms
    std::vector<AttentionParams<T>> attn;     // stages 3..4
    std::array<LinearBn<T>, 3> mlp;           // hybrid branch
};

template <typename T>
struct VoxelKpNet {
    NetworkConfig cfg;
    ParamStore<T> store;
    ConvBn<T> stem_pre0, stem_pre1, stem_down;
    std::array<StageParams<T>, 4> stages;
    std::array<Param<T>*, 3> height_w{};  // stages 2..4, unused with direct3d heads
    std::array<Param<T>*, 3> height_b{};
    std::array<ConvBn<T>, 2> refine;
    std::vector<HeadParams<T>> heads;  // head_layout order
};

template <typename T>
VoxelKpNet<T> make_network(const NetworkConfig& cfg, Rng& rng) {
    validate_network_config(cfg);
    VoxelKpNet<T> net;
    net.cfg = cfg;
    ParamStore<T>& store = net.store;

    auto conv_bn = [&](const std::string& name, int taps, int cin, int cout) {
        ConvBn<T> p;
        p.w = &store.create(name + ".conv.weight", taps * cin, cout);
        init_uniform(*p.w, rng, taps * cin);
        p.bn = ops::make_batch_norm(store, name + ".bn", cout);
        return p;
    };
    auto linear_bn = [&](const std::string& name, int cin, int cout) {
        LinearBn<T> p;
        p.w = &store.create(name + ".linear.weight", cin, cout);
        p.b = &store.create(name + ".linear.bias", 1, cout);
        init_uniform(*p.w, rng, cin);
        init_uniform(*p.b, rng, cin);
        p.bn = ops::make_batch_norm(store, name + ".bn", cout);
        return p;
    };

    const int c0 = cfg.channels[0];
    net.stem_pre0 = conv_bn("stem.pre0", 27, cfg.input_channels, c0);
    net.stem_pre1 = conv_bn("stem.pre1", 27, c0, c0);
    net.stem_down = conv_bn("stem.down", 125, c0, c0);

    for (int s = 0; s < 4; ++s) {
        const int cin = cfg.channels[s];
        const int c = cfg.channels[s + 1];
        const std::string base = "stage" + std::to_string(s + 1);
        const int k = s == 0 ? 5 : 3;
        StageParams<T>& st = net.stages[s];
        st.down = conv_bn(base + ".down", k * k * k, cin, c);
        if (s < 2) {
            SskConfig scfg;
            scfg.kernel_sizes = cfg.ssk_kernels;
            scfg.channels = c;
            for (int i = 0; i < cfg.ssk_blocks; ++i) {
                const std::string bn = base + ".block" + std::to_string(i);
                st.ssk.push_back(make_ssk_params(store, bn, scfg, rng));
                st.ssk_bn.push_back(ops::make_batch_norm(store, bn + ".bn", c));
            }
        } else {
            BoxAttentionConfig acfg;
            acfg.box_size = cfg.box_size;
            acfg.heads = cfg.attention_heads;
            acfg.channels = c;
            for (int i = 0; i < cfg.attention_blocks; ++i)
                st.attn.push_back(
                    make_attention_params(store, base + ".block" + std::to_string(i), acfg, rng));
        }
        for (int j = 0; j < 3; ++j) st.mlp[j] = linear_bn(base + ".mlp" + std::to_string(j), c, c);
    }

    const int head_cin = cfg.direct3d_heads ? cfg.channels[4] : cfg.bev_channels;
    if (!cfg.direct3d_heads) {
        for (int i = 0; i < 3; ++i) {
            const int stage = i + 2;
            const int z = stage_shape(cfg, stage)[2];
            const int cin = cfg.channels[stage];
            const std::string name = "bev.height" + std::to_string(stage);
            net.height_w[i] = &store.create(name + ".weight", z * cin, cfg.bev_channels);
            net.height_b[i] = &store.create(name + ".bias", 1, cfg.bev_channels);
            init_uniform(*net.height_w[i], rng, z * cin);
            init_uniform(*net.height_b[i], rng, z * cin);
        }
        for (int i = 0; i < 2; ++i)
            net.refine[i] =
                conv_bn("bev.refine" + std::to_string(i), 9, cfg.bev_channels, cfg.bev_channels);
    }
    for (const auto& [name, width] : head_layout(cfg.keypoints)) {
        HeadParams<T> h;
        const std::string base = "head." + name;
        h.conv_w = &store.create(base + ".conv.weight", 9 * head_cin, cfg.head_hidden);
        h.conv_b = &store.create(base + ".conv.bias", 1, cfg.head_hidden);
        h.out_w = &store.create(base + ".out.weight", cfg.head_hidden, width);
        h.out_b = &store.create(base + ".out.bias", 1, width);
        init_uniform(*h.conv_w, rng, 9 * head_cin);
        init_uniform(*h.conv_b, rng, 9 * head_cin);
        init_uniform(*h.out_w, rng, cfg.head_hidden);
        init_uniform(*h.out_b, rng, cfg.head_hidden);
        net.heads.push_back(h);
    }
    return net;
}

// Active set threaded through the backbone; coords stay canonical at every level.
struct ActiveSet {
    std::vector<Coord4> coords;
    std::array<int, 3> shape{0, 0, 0};
    int batch_size = 0;
};

namespace detail {

template <typename T>
int conv_bn_relu(Tape<T>& tape, int x, std::shared_ptr<const Rulebook> rb, ConvBn<T>& p,
                 bool training) {
    int y = ops::rulebook_conv(tape, x, std::move(rb), *p.w, static_cast<Param<T>*>(nullptr));
    y = ops::batch_norm(tape, y, p.bn, training);
    return ops::relu(tape, y);
}

}  // namespace detail

template <typename T>
int stem_apply(Tape<T>& tape, VoxelKpNet<T>& net, ActiveSet& set, int x, bool training) {
    VoxelIndex index(set.coords);
    auto rb = std::make_shared<const Rulebook>(
        build_subm_rulebook3d(set.coords, index, set.shape, {3, 3, 3}));
    int a = detail::conv_bn_relu(tape, x, rb, net.stem_pre0, training);
    int b = detail::conv_bn_relu(tape, a, rb, net.stem_pre1, training);
    int c = ops::add(tape, a, b);
    StridedPlan plan = build_strided_rulebook3d(set.coords, index, set.shape, {5, 5, 5}, {2, 2, 2});
    int y = detail::conv_bn_relu(tape, c, std::make_shared<const Rulebook>(std::move(plan.rb)),
                                 net.stem_down, training);
    set.coords = std::move(plan.out_coords);
    set.shape = plan.out_shape;
    return y;
}

template <typename T>
int stage_apply(Tape<T>& tape, VoxelKpNet<T>& net, ActiveSet& set, int x, int stage_id,
                bool training) {
    if (stage_id < 1 || stage_id > 4) throw std::invalid_argument("network: stage id out of range");
    const int s = stage_id - 1;
    const int c = net.cfg.channels[stage_id];
    StageParams<T>& st = net.stages[s];

    VoxelIndex index(set.coords);
    StridedPlan plan =
        build_strided_rulebook3d(set.coords, index, set.shape, s == 0 ? std::array<int, 3>{5, 5, 5} : std::array<int, 3>{3, 3, 3}, {2, 2, 2});
    x = detail::conv_bn_relu(tape, x, std::make_shared<const Rulebook>(std::move(plan.rb)),
                             st.down, training);
    set.coords = std::move(plan.out_coords);
    set.shape = plan.out_shape;

    const int branch_in = x;
    if (s < 2) {
        VoxelIndex idx(set.coords);
        SskConfig scfg;
        scfg.kernel_sizes = net.cfg.ssk_kernels;
        scfg.channels = c;
        SskPlan splan = build_ssk_plan(set.coords, idx, set.shape, set.batch_size, scfg);
        for (size_t i = 0; i < st.ssk.size(); ++i) {
            int y = ssk_apply(tape, x, splan, st.ssk[i], training).out;
            y = ops::batch_norm(tape, y, st.ssk_bn[i], training);
            x = ops::relu(tape, ops::add(tape, x, y));
        }
    } else {
        BoxPlan bplan = build_box_plan(set.coords, net.cfg.box_size);
        BoxAttentionConfig acfg;
        acfg.box_size = net.cfg.box_size;
        acfg.heads = net.cfg.attention_heads;
        acfg.channels = c;
        for (auto& p : st.attn) x = attention_block_apply(tape, x, bplan, p, acfg);
    }
    int m = branch_in;
    for (auto& layer : st.mlp) {
        m = ops::linear(tape, m, *layer.w, layer.b);
        m = ops::batch_norm(tape, m, layer.bn, training);
        m = ops::relu(tape, m);
    }
    return ops::add(tape, x, m);
}

template <typename T>
struct ForwardResult {
    std::vector<Coord3> coords;  // shared active set of every head
    std::array<int, 2> shape{0, 0};
    int batch_size = 0;
    int input = -1;  // tape id of the voxel feature leaf
    int heatmap = -1, size = -1, rotation = -1, xset = -1, yset = -1, zset = -1, visibility = -1,
        iou = -1;

    std::array<int, 8> all() const {
        return {heatmap, size, rotation, xset, yset, zset, visibility, iou};
    }
};

template <typename T>
ForwardResult<T> net_forward(Tape<T>& tape, VoxelKpNet<T>& net, const SparseTensor3D<T>& voxels,
                             bool training) {
    validate(voxels);
    if (voxels.spatial_shape != net.cfg.grid_shape)
        throw std::invalid_argument("network: voxel grid does not match the configured shape");
    if (voxels.features.cols != net.cfg.input_channels)
        throw std::invalid_argument("network: voxel feature width mismatch");
    std::vector<char> seen(static_cast<size_t>(voxels.batch_size), 0);
    for (const Coord4& cd : voxels.indices) seen[static_cast<size_t>(cd[0])] = 1;
    for (char s : seen)
        if (!s) throw std::runtime_error("network: batch sample has no active voxels");

    ActiveSet set;
    set.coords = voxels.indices;
    set.shape = voxels.spatial_shape;
    set.batch_size = voxels.batch_size;

    ForwardResult<T> out;
    out.batch_size = voxels.batch_size;
    out.input = tape.leaf(voxels.features, true);

    int x = stem_apply(tape, net, set, out.input, training);
    std::array<ActiveSet, 3> bev_sets;  // stage 2..4 active sets
    std::array<int, 3> bev_ids{-1, -1, -1};
    for (int stage = 1; stage <= 4; ++stage) {
        x = stage_apply(tape, net, set, x, stage, training);
        if (stage >= 2) {
            bev_sets[stage - 2] = set;
            bev_ids[stage - 2] = x;
        }
    }

    int hx = -1;
    if (net.cfg.direct3d_heads) {
        const ActiveSet& last = bev_sets[2];
        ColumnPlan cp = build_column_rulebook(last.coords, last.shape[2]);
        auto plan = std::make_shared<FusePlan>();
        plan->out_coords = std::move(cp.out_coords);
        plan->out_shape = {last.shape[0], last.shape[1]};
        plan->batch_size = last.batch_size;
        plan->weight = {1.0};
        plan->target.emplace_back(last.coords.size());
        VoxelIndex cols(plan->out_coords);
        for (size_t i = 0; i < last.coords.size(); ++i) {
            const Coord4& cd = last.coords[i];
            plan->target[0][i] = cols.find(Coord3{cd[0], cd[1], cd[2]});
        }
        hx = ops::scale_group_sum(tape, {bev_ids[2]}, std::shared_ptr<const FusePlan>(plan));
        out.coords = plan->out_coords;
        out.shape = plan->out_shape;
    } else {
        BevConfig bcfg;
        bcfg.channels = net.cfg.bev_channels;
        std::array<int, 3> heights{-1, -1, -1};
        std::vector<std::vector<Coord3>> cols(3);
        std::vector<std::array<int, 2>> shapes(3);
        for (int i = 0; i < 3; ++i) {
            HeightEncodePlan hp =
                build_height_encode_plan(bev_sets[i].coords, bev_sets[i].shape[2]);
            heights[i] =
                height_encode_apply(tape, bev_ids[i], hp, *net.height_w[i], net.height_b[i]);
            cols[i] = std::move(hp.out_coords);
            shapes[i] = {bev_sets[i].shape[0], bev_sets[i].shape[1]};
        }
        auto plan = std::make_shared<const FusePlan>(build_fuse_plan(
            {&cols[0], &cols[1], &cols[2]}, shapes, voxels.batch_size, bcfg));
        hx = ops::scale_group_sum(tape, {heights[0], heights[1], heights[2]}, plan);
        out.coords = plan->out_coords;
        out.shape = plan->out_shape;

        VoxelIndex idx(out.coords);
        auto rb = std::make_shared<const Rulebook>(
            build_subm_rulebook2d(out.coords, idx, out.shape, {3, 3}));
        for (auto& r : net.refine) hx = detail::conv_bn_relu(tape, hx, rb, r, training);
    }

    VoxelIndex idx(out.coords);
    auto rb =
        std::make_shared<const Rulebook>(build_subm_rulebook2d(out.coords, idx, out.shape, {3, 3}));
    std::array<int*, 8> slots{&out.heatmap, &out.size,       &out.rotation, &out.xset,
                              &out.yset,    &out.zset,       &out.visibility, &out.iou};
    for (size_t i = 0; i < net.heads.size(); ++i) {
        HeadParams<T>& h = net.heads[i];
        int u = ops::rulebook_conv(tape, hx, rb, *h.conv_w, h.conv_b);
        u = ops::relu(tape, u);
        *slots[i] = ops::linear(tape, u, *h.out_w, h.out_b);
    }
    return out;
}

// Value-level head maps over the shared BEV active set.
template <typename T>
struct HeadOutputs {
    std::vector<Coord3> coords;
    std::array<int, 2> shape{0, 0};
    int batch_size = 0;
    Mat<T> heatmap, size, rotation, xset, yset, zset, visibility, iou;
};

template <typename T>
HeadOutputs<T> head_outputs(const Tape<T>& tape, const ForwardResult<T>& fwd) {
    HeadOutputs<T> h;
    h.coords = fwd.coords;
    h.shape = fwd.shape;
    h.batch_size = fwd.batch_size;
    h.heatmap = tape.val(fwd.heatmap);
    h.size = tape.val(fwd.size);
    h.rotation = tape.val(fwd.rotation);
    h.xset = tape.val(fwd.xset);
    h.yset = tape.val(fwd.yset);
    h.zset = tape.val(fwd.zset);
    h.visibility = tape.val(fwd.visibility);
    h.iou = tape.val(fwd.iou);
    return h;
}

template <typename T>
SparseTensor3D<T> stem_forward(VoxelKpNet<T>& net, const SparseTensor3D<T>& t, bool training) {
    validate(t);
    Tape<T> tape;
    ActiveSet set{t.indices, t.spatial_shape, t.batch_size};
    int y = stem_apply(tape, net, set, tape.leaf(t.features), training);
    SparseTensor3D<T> out;
    out.indices = std::move(set.coords);
    out.spatial_shape = set.shape;
    out.batch_size = set.batch_size;
    out.features = tape.val(y);
    return out;
}

template <typename T>
SparseTensor3D<T> stage_forward(VoxelKpNet<T>& net, const SparseTensor3D<T>& t, int stage_id,
                                bool training) {
    validate(t);
    Tape<T> tape;
    ActiveSet set{t.indices, t.spatial_shape, t.batch_size};
    int y = stage_apply(tape, net, set, tape.leaf(t.features), stage_id, training);
    SparseTensor3D<T> out;
    out.indices = std::move(set.coords);
    out.spatial_shape = set.shape;
    out.batch_size = set.batch_size;
    out.features = tape.val(y);
    return out;
}

template <typename T>
struct PoseEstimate {
    T score = T(0);  // in [0, 1]
    std::array<T, 3> center{};
    std::array<T, 3> size{};
    T yaw = T(0);
    Mat<T> keypoints;  // K x 3, global meters
    std::vector<T> visibilities;
};

// Peaks are strict 3x3 local maxima over the active set; equal scores break
// toward the lower canonical row so decoding is order-free and deterministic.
// origin/cell give the lattice geometry: x and y come out of the set heads as
// offsets from each cell's center and are mapped back to meters here.
template <typename T>
std::vector<std::vector<PoseEstimate<T>>> decode(const HeadOutputs<T>& h, T score_threshold,
                                                 int max_detections,
                                                 std::array<double, 2> origin = {0.0, 0.0},
                                                 std::array<double, 2> cell = {1.0, 1.0},
                                                 T iou_weight = T(0.5)) {
    const int rows = h.heatmap.rows;
    const int k = h.visibility.cols;
    VoxelIndex index(h.coords);
    std::vector<T> hm(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) hm[static_cast<size_t>(i)] = ops::sigmoid_scalar(h.heatmap(i, 0));

    struct Cand {
        int row;
        T score;
    };
    std::vector<std::vector<Cand>> per_batch(static_cast<size_t>(h.batch_size));
    for (int i = 0; i < rows; ++i) {
        const T s = hm[static_cast<size_t>(i)];
        if (s < score_threshold) continue;
        const Coord3& c = h.coords[static_cast<size_t>(i)];
        bool peak = true;
        for (int dx = -1; dx <= 1 && peak; ++dx)
            for (int dy = -1; dy <= 1 && peak; ++dy) {
                if (dx == 0 && dy == 0) continue;
                const int nx = c[1] + dx, ny = c[2] + dy;
                if (nx < 0 || ny < 0 || nx >= h.shape[0] || ny >= h.shape[1]) continue;
                const int64_t j = index.find(Coord3{c[0], nx, ny});
                if (j < 0) continue;
                const T sj = hm[static_cast<size_t>(j)];
                if (sj > s || (sj == s && j < i)) peak = false;
            }
        if (!peak) continue;
        const T iou_s = ops::sigmoid_scalar(h.iou(i, 0));
        const T score =
            std::pow(s, T(1) - iou_weight) * std::pow(iou_s, iou_weight);
        per_batch[static_cast<size_t>(c[0])].push_back({i, score});
    }

    std::vector<std::vector<PoseEstimate<T>>> out(static_cast<size_t>(h.batch_size));
    for (int b = 0; b < h.batch_size; ++b) {
        auto& cands = per_batch[static_cast<size_t>(b)];
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& c) {
            if (a.score != c.score) return a.score > c.score;
            return a.row < c.row;
        });
        if (static_cast<int>(cands.size()) > max_detections) cands.resize(static_cast<size_t>(max_detections));
        for (const Cand& cd : cands) {
            const int i = cd.row;
            const Coord3& c = h.coords[static_cast<size_t>(i)];
            const T cx = T(origin[0] + (c[1] + 0.5) * cell[0]);
            const T cy = T(origin[1] + (c[2] + 0.5) * cell[1]);
            PoseEstimate<T> e;
            e.score = cd.score;
            e.center = {cx + h.xset(i, 0), cy + h.yset(i, 0), h.zset(i, 0)};
            e.size = {h.size(i, 0), h.size(i, 1), h.size(i, 2)};
            e.yaw = std::atan2(h.rotation(i, 0), h.rotation(i, 1));
            e.keypoints = Mat<T>(k, 3);
            for (int j = 0; j < k; ++j) {
                e.keypoints(j, 0) = cx + h.xset(i, 1 + j);
                e.keypoints(j, 1) = cy + h.yset(i, 1 + j);
                e.keypoints(j, 2) = h.zset(i, 1 + j);
            }
            e.visibilities.resize(static_cast<size_t>(k));
            for (int j = 0; j < k; ++j)
                e.visibilities[static_cast<size_t>(j)] = ops::sigmoid_scalar(h.visibility(i, j));
            out[static_cast<size_t>(b)].push_back(std::move(e));
        }
    }
    return out;
}

// Full inference path: voxelize, run frozen, decode-ready head maps.
template <typename T>
HeadOutputs<T> infer(VoxelKpNet<T>& net, const std::vector<PointCloud<T>>& clouds,
                     const VoxelGridSpec& grid) {
    SparseTensor3D<T> vox = voxelize(clouds, grid);
    Tape<T> tape;
    ForwardResult<T> fwd = net_forward(tape, net, vox, false);
    return head_outputs(tape, fwd);
}

}  // namespace vkp
