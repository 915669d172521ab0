#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "voxelkp/network.hpp"
#include "voxelkp/skeleton.hpp"

namespace vkp {

struct LossWeights {
    double heatmap = 1.0;
    double regression = 2.0;
    double visibility = 0.5;
    double iou = 1.0;
    double skeleton = 0.5;
    double focal_alpha = 2.0;
    double focal_beta = 4.0;
    double huber_delta = 1.0;  // meters, on bone-length errors
};

inline void validate_loss_weights(const LossWeights& w) {
    for (double v : {w.heatmap, w.regression, w.visibility, w.iou, w.skeleton})
        if (v < 0.0) throw std::invalid_argument("loss weights must be non-negative");
    if (w.focal_alpha < 0.0 || w.focal_beta < 0.0 || w.huber_delta <= 0.0)
        throw std::invalid_argument("focal exponents must be non-negative, huber delta positive");
}

// Metric layout of a BEV lattice: cell (cx, cy) spans
// origin + [c * cell, (c + 1) * cell) along each ground axis.
struct BevGeometry {
    std::array<double, 2> origin{};
    std::array<double, 2> cell{1.0, 1.0};

    double center_x(int cx) const { return origin[0] + (cx + 0.5) * cell[0]; }
    double center_y(int cy) const { return origin[1] + (cy + 0.5) * cell[1]; }
};

struct TargetMaps {
    Mat<double> heatmap;                 // V x 1, in [0, 1], 1 exactly at assigned centers
    std::vector<int32_t> positive_rows;  // one BEV row per kept annotation
    Mat<double> size;                    // P x 3
    Mat<double> rotation;                // P x 2, (sin, cos)
    Mat<double> xset, yset, zset;        // P x (1 + K), center then keypoints
    Mat<double> visibility;              // P x K, {0, 1}
    std::vector<std::array<double, 4>> gt_box;  // per positive: cx, cy, sx, sy (absolute)
    Mat<double> cell_center;                    // P x 2, the offsets' reference points
    int skipped = 0;                     // annotations with no active cell in their footprint
};

// Nearest active cell inside the footprint gets the center; contended
// annotations fall through to the next free cell. Soft negatives decay with a
// Gaussian around the assigned cell and overlaps keep the per-cell max.
inline TargetMaps assign_targets(const std::vector<std::vector<HumanAnnotation>>& per_batch,
                                 const std::vector<Coord3>& coords, int batch_size,
                                 const BevGeometry& geom, int keypoints) {
    if (static_cast<int>(per_batch.size()) != batch_size)
        throw std::invalid_argument("assign_targets: annotation batch size mismatch");
    const int rows = static_cast<int>(coords.size());
    TargetMaps t;
    t.heatmap = Mat<double>(rows, 1);

    std::vector<std::vector<int>> batch_rows(static_cast<size_t>(batch_size));
    for (int i = 0; i < rows; ++i) batch_rows[static_cast<size_t>(coords[i][0])].push_back(i);
    std::vector<char> taken(static_cast<size_t>(rows), 0);

    struct Pending {
        int row;
        const HumanAnnotation* ann;
    };
    std::vector<Pending> kept;
    const double cell_avg = 0.5 * (geom.cell[0] + geom.cell[1]);
    const double cell_diag = 0.5 * std::hypot(geom.cell[0], geom.cell[1]);

    for (int b = 0; b < batch_size; ++b) {
        for (const HumanAnnotation& ann : per_batch[static_cast<size_t>(b)]) {
            if (ann.keypoints.rows != keypoints ||
                static_cast<int>(ann.visibility.size()) != keypoints)
                throw std::invalid_argument("assign_targets: annotation keypoint count mismatch");
            const double radius_m = 0.5 * std::hypot(ann.size[0], ann.size[1]);
            // the cell containing the center always qualifies when active
            const double reach = std::max(radius_m, cell_diag);
            std::vector<std::pair<double, int>> cands;
            for (int i : batch_rows[static_cast<size_t>(b)]) {
                const double dx = geom.center_x(coords[i][1]) - ann.center[0];
                const double dy = geom.center_y(coords[i][2]) - ann.center[1];
                const double d = std::hypot(dx, dy);
                if (d <= reach) cands.push_back({d, i});
            }
            std::sort(cands.begin(), cands.end());
            int row = -1;
            for (const auto& [d, i] : cands)
                if (!taken[static_cast<size_t>(i)]) {
                    row = i;
                    break;
                }
            if (row < 0) {
                ++t.skipped;
                continue;
            }
            taken[static_cast<size_t>(row)] = 1;
            kept.push_back({row, &ann});

            const double sigma_c = std::max(radius_m / cell_avg / 3.0, 1.0);
            const int x0 = coords[row][1], y0 = coords[row][2];
            for (int i : batch_rows[static_cast<size_t>(b)]) {
                const double dx = coords[i][1] - x0;
                const double dy = coords[i][2] - y0;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_c * sigma_c));
                t.heatmap(i, 0) = std::max(t.heatmap(i, 0), v);
            }
        }
    }

    const int p = static_cast<int>(kept.size());
    const int set_w = 1 + keypoints;
    t.size = Mat<double>(p, 3);
    t.rotation = Mat<double>(p, 2);
    t.xset = Mat<double>(p, set_w);
    t.yset = Mat<double>(p, set_w);
    t.zset = Mat<double>(p, set_w);
    t.visibility = Mat<double>(p, keypoints);
    t.cell_center = Mat<double>(p, 2);
    for (int i = 0; i < p; ++i) {
        const HumanAnnotation& a = *kept[static_cast<size_t>(i)].ann;
        const int row = kept[static_cast<size_t>(i)].row;
        t.positive_rows.push_back(row);
        // x and y regress as offsets from the assigned cell's center so the
        // head works at meter scale regardless of where the scene sits
        const double cx = geom.center_x(coords[static_cast<size_t>(row)][1]);
        const double cy = geom.center_y(coords[static_cast<size_t>(row)][2]);
        t.cell_center(i, 0) = cx;
        t.cell_center(i, 1) = cy;
        for (int j = 0; j < 3; ++j) t.size(i, j) = a.size[j];
        t.rotation(i, 0) = std::sin(a.yaw);
        t.rotation(i, 1) = std::cos(a.yaw);
        t.xset(i, 0) = a.center[0] - cx;
        t.yset(i, 0) = a.center[1] - cy;
        t.zset(i, 0) = a.center[2];
        for (int j = 0; j < keypoints; ++j) {
            t.xset(i, 1 + j) = a.keypoints(j, 0) - cx;
            t.yset(i, 1 + j) = a.keypoints(j, 1) - cy;
            t.zset(i, 1 + j) = a.keypoints(j, 2);
            t.visibility(i, j) = a.visibility[static_cast<size_t>(j)] ? 1.0 : 0.0;
        }
        t.gt_box.push_back({a.center[0], a.center[1], a.size[0], a.size[1]});
    }
    return t;
}

namespace ops {

// FL = -(1/N) * sum over cells of
//   targets == 1: (1 - p)^alpha * log p
//   otherwise:    (1 - I)^beta * p^alpha * log(1 - p)
// with p the sigmoid prediction clamped to [1e-6, 1 - 1e-6].
template <typename T>
int focal_loss(Tape<T>& tape, int logits, std::shared_ptr<const Mat<T>> targets, T alpha, T beta,
               int batch_size) {
    const Mat<T>& l = tape.val(logits);
    if (l.cols != 1 || targets->rows != l.rows || targets->cols != 1)
        throw std::invalid_argument("focal_loss: expects matching single-column maps");
    const T lo = T(1e-6), hi = T(1) - T(1e-6);
    const T n = T(batch_size);

    T acc = T(0);
    for (int i = 0; i < l.rows; ++i) {
        const T p = std::clamp(sigmoid_scalar(l(i, 0)), lo, hi);
        const T tgt = (*targets)(i, 0);
        if (tgt == T(1))
            acc += std::pow(T(1) - p, alpha) * std::log(p);
        else
            acc += std::pow(T(1) - tgt, beta) * std::pow(p, alpha) * std::log(T(1) - p);
    }
    Mat<T> out(1, 1);
    out(0, 0) = -acc / n;

    return tape.emit(std::move(out), [logits, targets, alpha, beta, lo, hi, n](Tape<T>& tp,
                                                                               int self) {
        const T g = tp.grad(self)(0, 0);
        const Mat<T>& lv = tp.val(logits);
        Mat<T>& gl = tp.grad(logits);
        for (int i = 0; i < lv.rows; ++i) {
            const T raw = sigmoid_scalar(lv(i, 0));
            if (raw <= lo || raw >= hi) continue;  // clamp plateau
            const T p = raw;
            const T tgt = (*targets)(i, 0);
            T dterm;
            if (tgt == T(1))
                dterm = -alpha * std::pow(T(1) - p, alpha - T(1)) * std::log(p) +
                        std::pow(T(1) - p, alpha) / p;
            else
                dterm = std::pow(T(1) - tgt, beta) *
                        (alpha * std::pow(p, alpha - T(1)) * std::log(T(1) - p) -
                         std::pow(p, alpha) / (T(1) - p));
            gl(i, 0) += g * (-dterm * p * (T(1) - p) / n);
        }
    });
}

// Mean absolute error over masked entries; an empty mask supervises nothing.
template <typename T>
int l1_masked(Tape<T>& tape, int x, std::shared_ptr<const Mat<T>> target,
              std::shared_ptr<const Mat<T>> mask) {
    const Mat<T>& xv = tape.val(x);
    if (target->rows != xv.rows || target->cols != xv.cols || mask->rows != xv.rows ||
        mask->cols != xv.cols)
        throw std::invalid_argument("l1_masked: shape mismatch");
    T denom = T(0);
    for (size_t i = 0; i < mask->size(); ++i) denom += mask->data[i];
    Mat<T> out(1, 1);
    if (denom > T(0)) {
        T acc = T(0);
        for (size_t i = 0; i < xv.size(); ++i)
            acc += mask->data[i] * std::abs(xv.data[i] - target->data[i]);
        out(0, 0) = acc / denom;
    }
    return tape.emit(std::move(out), [x, target, mask, denom](Tape<T>& tp, int self) {
        if (denom <= T(0)) return;
        const T g = tp.grad(self)(0, 0);
        const Mat<T>& xv = tp.val(x);
        Mat<T>& gx = tp.grad(x);
        for (size_t i = 0; i < xv.size(); ++i) {
            const T d = xv.data[i] - target->data[i];
            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            gx.data[i] += g * mask->data[i] * s / denom;
        }
    });
}

// Huber penalty on the gap between predicted and target bone lengths,
// averaged over bones whose endpoints are both visible. Predicted joints are
// read from the x/y/z set heads at the positive rows (columns 1..K).
template <typename T>
int skeleton_loss(Tape<T>& tape, int xset, int yset, int zset,
                  std::shared_ptr<const std::vector<int32_t>> rows,
                  std::shared_ptr<const Mat<T>> gt_len, std::shared_ptr<const Mat<T>> bone_mask,
                  std::shared_ptr<const std::vector<std::array<int, 2>>> bones, T delta) {
    const Mat<T>& xv = tape.val(xset);
    const Mat<T>& yv = tape.val(yset);
    const Mat<T>& zv = tape.val(zset);
    const int p = static_cast<int>(rows->size());
    const int nb = static_cast<int>(bones->size());
    if (gt_len->rows != p || gt_len->cols != nb || bone_mask->rows != p || bone_mask->cols != nb)
        throw std::invalid_argument("skeleton_loss: bone table shape mismatch");
    if (xv.cols != yv.cols || xv.cols != zv.cols)
        throw std::invalid_argument("skeleton_loss: set head widths differ");

    T count = T(0);
    for (size_t i = 0; i < bone_mask->size(); ++i) count += bone_mask->data[i];

    auto length = [&](int r, int b) {
        const int j0 = (*bones)[static_cast<size_t>(b)][0] + 1;
        const int j1 = (*bones)[static_cast<size_t>(b)][1] + 1;
        const T dx = xv(r, j0) - xv(r, j1);
        const T dy = yv(r, j0) - yv(r, j1);
        const T dz = zv(r, j0) - zv(r, j1);
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    };

    Mat<T> out(1, 1);
    if (count > T(0)) {
        T acc = T(0);
        for (int i = 0; i < p; ++i)
            for (int b = 0; b < nb; ++b) {
                if ((*bone_mask)(i, b) == T(0)) continue;
                const T e = length((*rows)[static_cast<size_t>(i)], b) - (*gt_len)(i, b);
                const T a = std::abs(e);
                acc += a <= delta ? T(0.5) * e * e : delta * (a - T(0.5) * delta);
            }
        out(0, 0) = acc / count;
    }

    return tape.emit(std::move(out), [xset, yset, zset, rows, gt_len, bone_mask, bones, delta,
                                      count](Tape<T>& tp, int self) {
        if (count <= T(0)) return;
        const T g = tp.grad(self)(0, 0);
        const Mat<T>& xv = tp.val(xset);
        const Mat<T>& yv = tp.val(yset);
        const Mat<T>& zv = tp.val(zset);
        Mat<T>& gx = tp.grad(xset);
        Mat<T>& gy = tp.grad(yset);
        Mat<T>& gz = tp.grad(zset);
        const int p = static_cast<int>(rows->size());
        const int nb = static_cast<int>(bones->size());
        for (int i = 0; i < p; ++i) {
            const int r = (*rows)[static_cast<size_t>(i)];
            for (int b = 0; b < nb; ++b) {
                if ((*bone_mask)(i, b) == T(0)) continue;
                const int j0 = (*bones)[static_cast<size_t>(b)][0] + 1;
                const int j1 = (*bones)[static_cast<size_t>(b)][1] + 1;
                const T dx = xv(r, j0) - xv(r, j1);
                const T dy = yv(r, j0) - yv(r, j1);
                const T dz = zv(r, j0) - zv(r, j1);
                const T len = std::sqrt(dx * dx + dy * dy + dz * dz);
                if (len <= T(1e-12)) continue;  // direction undefined at zero length
                const T e = len - (*gt_len)(i, b);
                const T w = g * std::clamp(e, -delta, delta) / (count * len);
                gx(r, j0) += w * dx;
                gx(r, j1) -= w * dx;
                gy(r, j0) += w * dy;
                gy(r, j1) -= w * dy;
                gz(r, j0) += w * dz;
                gz(r, j1) -= w * dz;
            }
        }
    });
}

}  // namespace ops

// Axis-aligned rectangle IoU in the ground plane.
inline double bev_iou(double cx0, double cy0, double sx0, double sy0, double cx1, double cy1,
                      double sx1, double sy1) {
    sx0 = std::max(sx0, 0.0);
    sy0 = std::max(sy0, 0.0);
    sx1 = std::max(sx1, 0.0);
    sy1 = std::max(sy1, 0.0);
    const double ix = std::max(
        0.0, std::min(cx0 + 0.5 * sx0, cx1 + 0.5 * sx1) - std::max(cx0 - 0.5 * sx0, cx1 - 0.5 * sx1));
    const double iy = std::max(
        0.0, std::min(cy0 + 0.5 * sy0, cy1 + 0.5 * sy1) - std::max(cy0 - 0.5 * sy0, cy1 - 0.5 * sy1));
    const double inter = ix * iy;
    const double uni = sx0 * sy0 + sx1 * sy1 - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct LossTermIds {
    int heatmap = -1, regression = -1, visibility = -1, iou = -1, skeleton = -1, total = -1;
};

template <typename T>
LossTermIds total_loss(Tape<T>& tape, const ForwardResult<T>& fwd, const TargetMaps& t,
                          const LossWeights& w, const SkeletonSpec& skel) {
    validate_loss_weights(w);
    LossTermIds ids;

    auto hm_target = std::make_shared<const Mat<T>>(t.heatmap);
    ids.heatmap = ops::focal_loss(tape, fwd.heatmap, hm_target, T(w.focal_alpha),
                                  T(w.focal_beta), fwd.batch_size);

    const int p = static_cast<int>(t.positive_rows.size());
    if (p == 0) {
        int zero = tape.leaf(Mat<T>(1, 1));
        ids.regression = zero;
        ids.visibility = zero;
        ids.iou = zero;
        ids.skeleton = zero;
    } else {
        auto rows = std::make_shared<const std::vector<int32_t>>(t.positive_rows);
        const int k = t.visibility.cols;
        auto ones = [](int r, int c) {
            Mat<T> m(r, c);
            m.fill(T(1));
            return m;
        };

        // keypoint columns supervised only when visible; centers always
        Mat<T> set_mask(p, 1 + k);
        for (int i = 0; i < p; ++i) {
            set_mask(i, 0) = T(1);
            for (int j = 0; j < k; ++j) set_mask(i, 1 + j) = T(t.visibility(i, j));
        }
        auto smask = std::make_shared<const Mat<T>>(std::move(set_mask));

        int gsize = ops::gather_rows(tape, fwd.size, rows);
        int grot = ops::gather_rows(tape, fwd.rotation, rows);
        int gx = ops::gather_rows(tape, fwd.xset, rows);
        int gy = ops::gather_rows(tape, fwd.yset, rows);
        int gz = ops::gather_rows(tape, fwd.zset, rows);
        std::vector<int> reg_terms = {
            ops::l1_masked(tape, gsize, std::make_shared<const Mat<T>>(t.size),
                           std::make_shared<const Mat<T>>(ones(p, 3))),
            ops::l1_masked(tape, grot, std::make_shared<const Mat<T>>(t.rotation),
                           std::make_shared<const Mat<T>>(ones(p, 2))),
            ops::l1_masked(tape, gx, std::make_shared<const Mat<T>>(t.xset), smask),
            ops::l1_masked(tape, gy, std::make_shared<const Mat<T>>(t.yset), smask),
            ops::l1_masked(tape, gz, std::make_shared<const Mat<T>>(t.zset), smask)};
        ids.regression =
            ops::weighted_sum_scalars(tape, reg_terms, std::vector<T>(reg_terms.size(), T(1)));

        int gvis = ops::sigmoid(tape, ops::gather_rows(tape, fwd.visibility, rows));
        ids.visibility = ops::l1_masked(tape, gvis, std::make_shared<const Mat<T>>(t.visibility),
                                        std::make_shared<const Mat<T>>(ones(p, k)));

        // IoU head learns the overlap the current box predictions achieve;
        // the target is a constant snapshot, not a differentiable path.
        const Mat<T>& xv = tape.val(fwd.xset);
        const Mat<T>& yv = tape.val(fwd.yset);
        const Mat<T>& sv = tape.val(fwd.size);
        Mat<T> iou_target(p, 1);
        for (int i = 0; i < p; ++i) {
            const int r = t.positive_rows[static_cast<size_t>(i)];
            const auto& gb = t.gt_box[static_cast<size_t>(i)];
            iou_target(i, 0) = T(bev_iou(xv(r, 0) + t.cell_center(i, 0),
                                         yv(r, 0) + t.cell_center(i, 1), sv(r, 0), sv(r, 1),
                                         gb[0], gb[1], gb[2], gb[3]));
        }
        int giou = ops::sigmoid(tape, ops::gather_rows(tape, fwd.iou, rows));
        ids.iou = ops::l1_masked(tape, giou, std::make_shared<const Mat<T>>(std::move(iou_target)),
                                 std::make_shared<const Mat<T>>(ones(p, 1)));

        auto bones = std::make_shared<const std::vector<std::array<int, 2>>>(skel.bones);
        const int nb = static_cast<int>(skel.bones.size());
        Mat<T> gt_len(p, nb), bone_mask(p, nb);
        for (int i = 0; i < p; ++i)
            for (int b = 0; b < nb; ++b) {
                const int j0 = skel.bones[static_cast<size_t>(b)][0];
                const int j1 = skel.bones[static_cast<size_t>(b)][1];
                const T dx = T(t.xset(i, 1 + j0) - t.xset(i, 1 + j1));
                const T dy = T(t.yset(i, 1 + j0) - t.yset(i, 1 + j1));
                const T dz = T(t.zset(i, 1 + j0) - t.zset(i, 1 + j1));
                gt_len(i, b) = std::sqrt(dx * dx + dy * dy + dz * dz);
                bone_mask(i, b) =
                    t.visibility(i, j0) > 0.0 && t.visibility(i, j1) > 0.0 ? T(1) : T(0);
            }
        std::vector<int32_t> ident(static_cast<size_t>(p));
        for (int i = 0; i < p; ++i) ident[static_cast<size_t>(i)] = i;
        ids.skeleton = ops::skeleton_loss(tape, gx, gy, gz,
                                          std::make_shared<const std::vector<int32_t>>(ident),
                                          std::make_shared<const Mat<T>>(std::move(gt_len)),
                                          std::make_shared<const Mat<T>>(std::move(bone_mask)),
                                          bones, T(w.huber_delta));
    }

    std::vector<int> terms = {ids.heatmap, ids.regression, ids.visibility, ids.iou, ids.skeleton};
    std::vector<T> weights = {T(w.heatmap), T(w.regression), T(w.visibility), T(w.iou),
                              T(w.skeleton)};
    ids.total = ops::weighted_sum_scalars(tape, terms, weights);
    return ids;
}

}  // namespace vkp
