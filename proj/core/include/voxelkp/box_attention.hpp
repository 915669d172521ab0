#pragma once

// Box attention: active voxels are partitioned into non-overlapping boxes by
// floor-dividing their coordinates, and multi-head self-attention runs inside
// each box independently. The default logit form is the bare dot product
// softmax(Q.K); 1/sqrt(d) scaling and a relative-position bias are opt-in.

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxelkp/nn_ops.hpp"
#include "voxelkp/sparse_nn.hpp"
#include "voxelkp/sparse_tensor.hpp"
#include "voxelkp/tape.hpp"

namespace vkp {

struct BoxAttentionConfig {
    std::array<int, 3> box_size{8, 8, 8};
    int heads = 4;
    int channels = 0;
    bool scale_logits = false;            // multiply logits by 1/sqrt(d)
    bool relative_position_bias = false;  // logit += w_head . (coord_i - coord_j)
};

inline void validate_attention_config(const BoxAttentionConfig& cfg) {
    for (int s : cfg.box_size)
        if (s < 1) throw std::invalid_argument("box attention: box size components must be >= 1");
    if (cfg.heads < 1) throw std::invalid_argument("box attention: need at least one head");
    if (cfg.channels < 1 || cfg.channels % cfg.heads != 0)
        throw std::invalid_argument("box attention: channels not divisible by head count");
}

struct BoxPartition {
    std::array<int, 3> box_size{0, 0, 0};
    std::vector<std::array<int32_t, 4>> ids;        // (batch, bx, by, bz), encounter order
    std::vector<std::vector<int32_t>> members;      // voxel rows, canonical order within each box
};

inline BoxPartition build_box_partition(const std::vector<Coord4>& coords, const std::array<int, 3>& box_size) {
    for (int s : box_size)
        if (s < 1) throw std::invalid_argument("box partition: box size components must be >= 1");
    BoxPartition part;
    part.box_size = box_size;
    std::unordered_map<uint64_t, int32_t> lookup;
    lookup.reserve(coords.size());
    for (int32_t row = 0; row < static_cast<int32_t>(coords.size()); ++row) {
        const Coord4& c = coords[row];
        const Coord4 id{c[0], c[1] / box_size[0], c[2] / box_size[1], c[3] / box_size[2]};
        const uint64_t key = pack_key(id);
        auto it = lookup.find(key);
        if (it == lookup.end()) {
            it = lookup.emplace(key, static_cast<int32_t>(part.members.size())).first;
            part.ids.push_back({id[0], id[1], id[2], id[3]});
            part.members.emplace_back();
        }
        part.members[it->second].push_back(row);
    }
    return part;
}

template <typename T>
struct AttentionParams {
    Param<T>*f_w, *f_b;  // Q projection
    Param<T>*g_w, *g_b;  // K projection
    Param<T>*h_w, *h_b;  // V projection
    Param<T>*j_w, *j_b;  // output projection
    Param<T>*norm_gamma, *norm_beta;
    Param<T>* pos_w;  // heads x 3, used only with relative_position_bias
};

template <typename T>
AttentionParams<T> make_attention_params(ParamStore<T>& store, const std::string& name,
                                         const BoxAttentionConfig& cfg, Rng& rng) {
    validate_attention_config(cfg);
    const int c = cfg.channels;
    AttentionParams<T> p;
    auto lin = [&](const char* tag, Param<T>*& w, Param<T>*& b) {
        w = &store.create(name + "." + tag + ".weight", c, c);
        b = &store.create(name + "." + tag + ".bias", 1, c);
        init_uniform(*w, rng, c);
        init_uniform(*b, rng, c);
    };
    lin("f", p.f_w, p.f_b);
    lin("g", p.g_w, p.g_b);
    lin("h", p.h_w, p.h_b);
    lin("j", p.j_w, p.j_b);
    p.norm_gamma = &store.create(name + ".norm.gamma", 1, c);
    p.norm_beta = &store.create(name + ".norm.beta", 1, c);
    p.norm_gamma->value.fill(T(1));
    p.pos_w = &store.create(name + ".pos.weight", cfg.heads, 3);
    return p;
}

namespace ops {

namespace detail {

// Recomputes one box/head softmax row set; shared by forward and backward so
// both walk bit-identical probabilities.
template <typename T>
void box_head_probs(const Mat<T>& q, const Mat<T>& k, const std::vector<int32_t>& rows,
                    const std::vector<Coord4>* coords, const T* pos_row, T scale, int head, int d,
                    std::vector<T>& probs) {
    const int kb = static_cast<int>(rows.size());
    const int base = head * d;
    probs.assign(static_cast<size_t>(kb) * kb, T(0));
    for (int i = 0; i < kb; ++i) {
        T* prow = probs.data() + static_cast<size_t>(i) * kb;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < kb; ++j) {
            T logit = T(0);
            const T* qi = q.row(rows[i]) + base;
            const T* kj = k.row(rows[j]) + base;
            for (int dd = 0; dd < d; ++dd) logit += qi[dd] * kj[dd];
            logit *= scale;
            if (pos_row) {
                const Coord4& a = (*coords)[rows[i]];
                const Coord4& b = (*coords)[rows[j]];
                for (int ax = 0; ax < 3; ++ax)
                    logit += pos_row[ax] * static_cast<T>(a[ax + 1] - b[ax + 1]);
            }
            prow[j] = logit;
            mx = std::max(mx, logit);
        }
        T sum = T(0);
        for (int j = 0; j < kb; ++j) {
            prow[j] = std::exp(prow[j] - mx);
            sum += prow[j];
        }
        for (int j = 0; j < kb; ++j) prow[j] /= sum;
    }
}

}  // namespace detail

// Per-box multi-head attention over already-projected Q, K, V (each V x C).
// Output keeps row order. Backward recomputes the probabilities instead of
// storing per-box softmax maps.
template <typename T>
int box_attention_core(Tape<T>& tape, int q, int k, int v,
                       std::shared_ptr<const std::vector<std::vector<int32_t>>> boxes,
                       std::shared_ptr<const std::vector<Coord4>> coords, const BoxAttentionConfig& cfg,
                       Param<T>* pos_w) {
    const Mat<T>& qv = tape.val(q);
    const Mat<T>& kv = tape.val(k);
    const Mat<T>& vv = tape.val(v);
    check_same_shape(qv, kv, "box_attention_core");
    check_same_shape(qv, vv, "box_attention_core");
    const int c = qv.cols;
    if (c % cfg.heads != 0) throw std::invalid_argument("box attention: channels not divisible by head count");
    const int d = c / cfg.heads;
    const T scale = cfg.scale_logits ? T(1) / std::sqrt(static_cast<T>(d)) : T(1);
    const bool use_pos = cfg.relative_position_bias;
    if (use_pos && (!pos_w || pos_w->value.rows != cfg.heads || pos_w->value.cols != 3))
        throw std::invalid_argument("box attention: position-bias weights missing or misshaped");

    Mat<T> out(qv.rows, c);
    {
        const int nb = static_cast<int>(boxes->size());
#pragma omp parallel for schedule(dynamic) if (nb > 8)
        for (int bi = 0; bi < nb; ++bi) {
            const std::vector<int32_t>& rows = (*boxes)[bi];
            const int kb = static_cast<int>(rows.size());
            std::vector<T> probs;
            for (int head = 0; head < cfg.heads; ++head) {
                const T* pos_row = use_pos ? pos_w->value.row(head) : nullptr;
                detail::box_head_probs(qv, kv, rows, coords.get(), pos_row, scale, head, d, probs);
                const int base = head * d;
                for (int i = 0; i < kb; ++i) {
                    T* dst = out.row(rows[i]) + base;
                    const T* prow = probs.data() + static_cast<size_t>(i) * kb;
                    for (int j = 0; j < kb; ++j) {
                        const T p = prow[j];
                        const T* vj = vv.row(rows[j]) + base;
                        for (int dd = 0; dd < d; ++dd) dst[dd] += p * vj[dd];
                    }
                }
            }
        }
    }

    const int heads = cfg.heads;
    return tape.emit(std::move(out), [q, k, v, boxes, coords, heads, d, scale, use_pos, pos_w](Tape<T>& t,
                                                                                               int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& qv = t.val(q);
        const Mat<T>& kv = t.val(k);
        const Mat<T>& vv = t.val(v);
        Mat<T>& gq = t.grad(q);
        Mat<T>& gk = t.grad(k);
        Mat<T>& gv = t.grad(v);
        const int nb = static_cast<int>(boxes->size());
        Mat<T> pos_partial(use_pos ? nb : 0, use_pos ? heads * 3 : 0);
#pragma omp parallel for schedule(dynamic) if (nb > 8)
        for (int bi = 0; bi < nb; ++bi) {
            const std::vector<int32_t>& rows = (*boxes)[bi];
            const int kb = static_cast<int>(rows.size());
            std::vector<T> probs, dlogit(static_cast<size_t>(kb) * kb);
            for (int head = 0; head < heads; ++head) {
                const T* pos_row = use_pos ? pos_w->value.row(head) : nullptr;
                detail::box_head_probs(qv, kv, rows, coords.get(), pos_row, scale, head, d, probs);
                const int base = head * d;
                for (int i = 0; i < kb; ++i) {
                    const T* gi = g.row(rows[i]) + base;
                    const T* prow = probs.data() + static_cast<size_t>(i) * kb;
                    T* drow = dlogit.data() + static_cast<size_t>(i) * kb;
                    T dot = T(0);
                    for (int j = 0; j < kb; ++j) {
                        const T* vj = vv.row(rows[j]) + base;
                        T dp = T(0);
                        for (int dd = 0; dd < d; ++dd) dp += gi[dd] * vj[dd];
                        drow[j] = dp;
                        dot += dp * prow[j];
                        // dV accumulates along j; rows are box-local so no race
                        T* gvj = gv.row(rows[j]) + base;
                        for (int dd = 0; dd < d; ++dd) gvj[dd] += prow[j] * gi[dd];
                    }
                    for (int j = 0; j < kb; ++j) drow[j] = prow[j] * (drow[j] - dot);
                }
                for (int i = 0; i < kb; ++i) {
                    const T* drow = dlogit.data() + static_cast<size_t>(i) * kb;
                    T* gqi = gq.row(rows[i]) + base;
                    const T* qi = qv.row(rows[i]) + base;
                    for (int j = 0; j < kb; ++j) {
                        const T dl = drow[j] * scale;
                        const T* kj = kv.row(rows[j]) + base;
                        T* gkj = gk.row(rows[j]) + base;
                        for (int dd = 0; dd < d; ++dd) {
                            gqi[dd] += dl * kj[dd];
                            gkj[dd] += dl * qi[dd];
                        }
                        if (use_pos) {
                            const Coord4& a = (*coords)[rows[i]];
                            const Coord4& b = (*coords)[rows[j]];
                            T* acc = pos_partial.row(bi) + head * 3;
                            for (int ax = 0; ax < 3; ++ax)
                                acc[ax] += drow[j] * static_cast<T>(a[ax + 1] - b[ax + 1]);
                        }
                    }
                }
            }
        }
        if (use_pos) {  // fixed reduction order across boxes
            for (int bi = 0; bi < nb; ++bi)
                for (int head = 0; head < heads; ++head)
                    for (int ax = 0; ax < 3; ++ax)
                        pos_w->grad(head, ax) += pos_partial(bi, head * 3 + ax);
        }
    });
}

}  // namespace ops

// Plan shared by forwards over one active set.
struct BoxPlan {
    std::shared_ptr<const std::vector<std::vector<int32_t>>> boxes;
    std::shared_ptr<const std::vector<Coord4>> coords;
};

inline BoxPlan build_box_plan(const std::vector<Coord4>& coords, const std::array<int, 3>& box_size) {
    BoxPlan plan;
    plan.boxes = std::make_shared<const std::vector<std::vector<int32_t>>>(
        build_box_partition(coords, box_size).members);
    plan.coords = std::make_shared<const std::vector<Coord4>>(coords);
    return plan;
}

// Attention without the residual wrapper: j(attend(f(x), g(x), h(x))).
template <typename T>
int box_self_attention_apply(Tape<T>& tape, int x, const BoxPlan& plan, const AttentionParams<T>& p,
                             const BoxAttentionConfig& cfg) {
    int q = ops::linear(tape, x, *p.f_w, p.f_b);
    int k = ops::linear(tape, x, *p.g_w, p.g_b);
    int v = ops::linear(tape, x, *p.h_w, p.h_b);
    int attn = ops::box_attention_core(tape, q, k, v, plan.boxes, plan.coords, cfg, p.pos_w);
    return ops::linear(tape, attn, *p.j_w, p.j_b);
}

// Residual block: x + attention(norm(x)).
template <typename T>
int attention_block_apply(Tape<T>& tape, int x, const BoxPlan& plan, const AttentionParams<T>& p,
                          const BoxAttentionConfig& cfg) {
    int n = ops::layer_norm(tape, x, *p.norm_gamma, *p.norm_beta);
    int a = box_self_attention_apply(tape, n, plan, p, cfg);
    return ops::add(tape, x, a);
}

template <typename T>
SparseTensor3D<T> box_self_attention(const SparseTensor3D<T>& t, const BoxPartition& part,
                                     const AttentionParams<T>& p, const BoxAttentionConfig& cfg) {
    validate(t);
    if (t.features.cols != cfg.channels) throw std::invalid_argument("box attention: channel mismatch");
    BoxPlan plan;
    plan.boxes = std::make_shared<const std::vector<std::vector<int32_t>>>(part.members);
    plan.coords = std::make_shared<const std::vector<Coord4>>(t.indices);
    Tape<T> tape;
    int x = tape.leaf(t.features);
    int y = box_self_attention_apply(tape, x, plan, p, cfg);
    SparseTensor3D<T> out;
    out.features = tape.val(y);
    out.indices = t.indices;
    out.spatial_shape = t.spatial_shape;
    out.batch_size = t.batch_size;
    return out;
}

template <typename T>
SparseTensor3D<T> attention_block(const SparseTensor3D<T>& t, const BoxPartition& part,
                                  const AttentionParams<T>& p, const BoxAttentionConfig& cfg) {
    validate(t);
    if (t.features.cols != cfg.channels) throw std::invalid_argument("box attention: channel mismatch");
    BoxPlan plan;
    plan.boxes = std::make_shared<const std::vector<std::vector<int32_t>>>(part.members);
    plan.coords = std::make_shared<const std::vector<Coord4>>(t.indices);
    Tape<T> tape;
    int x = tape.leaf(t.features);
    int y = attention_block_apply(tape, x, plan, p, cfg);
    SparseTensor3D<T> out;
    out.features = tape.val(y);
    out.indices = t.indices;
    out.spatial_shape = t.spatial_shape;
    out.batch_size = t.batch_size;
    return out;
}

}  // namespace vkp
