#include "voxelkp/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "voxelkp/binary_io.hpp"

namespace vkp {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kTau = 2.0 * kPi;
constexpr uint32_t kSceneVersion = 1;

// {left, right} joint index pairs of the default skeleton.
constexpr std::array<std::array<int, 2>, 6> kLrPairs = {
    {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}, {11, 12}}};

std::array<double, 3> rot_z(const std::array<double, 3>& p, double th) {
    const double c = std::cos(th), s = std::sin(th);
    return {c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
}

// Joints in the body frame: x forward, y left, z up, hip center at origin.
Mat<double> body_keypoints(const BoneLengths& b, const PoseAngles& a) {
    Mat<double> k(14, 3);
    auto set = [&](int j, double x, double y, double z) {
        k(j, 0) = x;
        k(j, 1) = y;
        k(j, 2) = z;
    };
    const double cl = std::cos(a.lean), sl = std::sin(a.lean);
    const std::array<double, 3> hip{0, 0, 0};
    const std::array<double, 3> chest{hip[0] + b.torso * sl, 0.0, hip[2] + b.torso * cl};
    const std::array<double, 3> head{chest[0] + b.neck * sl, 0.0, chest[2] + b.neck * cl};
    set(13, head[0], head[1], head[2]);
    set(0, head[0] + b.nose * cl, head[1], head[2] - b.nose * sl);  // nose points forward
    for (int side = 0; side < 2; ++side) {
        const double sy = side == 0 ? 1.0 : -1.0;  // left first
        const double shx = chest[0], shy = sy * 0.5 * b.shoulder, shz = chest[2];
        set(1 + side, shx, shy, shz);
        const double sw = a.arm_swing[side];
        const double ex = shx + b.upper_arm * std::sin(sw), ez = shz - b.upper_arm * std::cos(sw);
        set(3 + side, ex, shy, ez);
        const double wa = sw + a.elbow_bend[side];
        set(5 + side, ex + b.forearm * std::sin(wa), shy, ez - b.forearm * std::cos(wa));
        const double hx = hip[0], hy = sy * 0.5 * b.hip, hz = hip[2];
        set(7 + side, hx, hy, hz);
        const double lg = a.leg_swing[side];
        const double kx = hx + b.thigh * std::sin(lg), kz = hz - b.thigh * std::cos(lg);
        set(9 + side, kx, hy, kz);
        const double an = lg - a.knee_bend[side];
        set(11 + side, kx + b.shin * std::sin(an), hy, kz - b.shin * std::cos(an));
    }
    return k;
}

// Tight box around the keypoints in the heading frame, padded by the capsule
// radius plus a margin so every sampled point stays inside.
HumanAnnotation annotate(const SyntheticHuman& h, const Mat<double>& keypoints) {
    const double lo = std::numeric_limits<double>::lowest(), hi = std::numeric_limits<double>::max();
    std::array<double, 3> mn{hi, hi, hi}, mx{lo, lo, lo};
    for (int j = 0; j < keypoints.rows; ++j) {
        const std::array<double, 3> p = rot_z(
            {keypoints(j, 0) - h.position[0], keypoints(j, 1) - h.position[1], keypoints(j, 2)},
            -h.heading);
        for (int c = 0; c < 3; ++c) {
            mn[c] = std::min(mn[c], p[c]);
            mx[c] = std::max(mx[c], p[c]);
        }
    }
    const double pad = h.capsule_radius + 0.05;
    HumanAnnotation a;
    std::array<double, 3> mid{0.5 * (mn[0] + mx[0]), 0.5 * (mn[1] + mx[1]), 0.5 * (mn[2] + mx[2])};
    const std::array<double, 3> c = rot_z(mid, h.heading);
    a.center = {c[0] + h.position[0], c[1] + h.position[1], mid[2]};
    a.size = {mx[0] - mn[0] + 2 * pad, mx[1] - mn[1] + 2 * pad, mx[2] - mn[2] + 2 * pad};
    a.yaw = h.heading;
    a.keypoints = keypoints;
    a.visibility.assign(14, 1);
    return a;
}

// Conservative bird's-eye overlap: axis-aligned envelopes of the yawed boxes.
bool bev_overlap(const HumanAnnotation& a, const HumanAnnotation& b) {
    auto half = [](const HumanAnnotation& x) {
        const double c = std::abs(std::cos(x.yaw)), s = std::abs(std::sin(x.yaw));
        return std::array<double, 2>{0.5 * (c * x.size[0] + s * x.size[1]),
                                     0.5 * (s * x.size[0] + c * x.size[1])};
    };
    const auto ha = half(a), hb = half(b);
    return std::abs(a.center[0] - b.center[0]) < ha[0] + hb[0] &&
           std::abs(a.center[1] - b.center[1]) < ha[1] + hb[1];
}

bool point_in_box(const HumanAnnotation& a, double x, double y, double z) {
    const std::array<double, 3> p =
        rot_z({x - a.center[0], y - a.center[1], z - a.center[2]}, -a.yaw);
    return std::abs(p[0]) <= 0.5 * a.size[0] && std::abs(p[1]) <= 0.5 * a.size[1] &&
           std::abs(p[2]) <= 0.5 * a.size[2];
}

void append_row(std::vector<double>& rows, double x, double y, double z, double i) {
    rows.push_back(x);
    rows.push_back(y);
    rows.push_back(z);
    rows.push_back(i);
}

void sample_human_points(const SyntheticHuman& h, const Mat<double>& k, const SceneConfig& cfg,
                         Rng& rng, std::vector<double>& rows) {
    const SkeletonSpec skel = default_skeleton();
    std::vector<double> seg_len;
    double total = 0.0;
    for (const auto& bone : skel.bones) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) {
            const double d = k(bone[0], c) - k(bone[1], c);
            d2 += d * d;
        }
        total += std::sqrt(d2);
        seg_len.push_back(total);
    }
    const double dist = std::hypot(h.position[0], h.position[1]);
    const double base = rng.uniform(cfg.points_per_human[0], cfg.points_per_human[1]);
    const double decay = std::min(1.0, cfg.full_density_range / std::max(dist, 1e-6));
    const int n = std::max(cfg.min_points_per_human, static_cast<int>(std::lround(base * decay)));
    for (int i = 0; i < n; ++i) {
        const double pick = rng.uniform(0.0, total);
        const size_t seg = static_cast<size_t>(
            std::lower_bound(seg_len.begin(), seg_len.end(), pick) - seg_len.begin());
        const auto& bone = skel.bones[std::min(seg, skel.bones.size() - 1)];
        const double t = rng.uniform();
        std::array<double, 3> p;
        for (int c = 0; c < 3; ++c) p[c] = k(bone[0], c) + t * (k(bone[1], c) - k(bone[0], c));
        std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
        const double norm = std::max(std::hypot(std::hypot(dir[0], dir[1]), dir[2]), 1e-12);
        const double r = rng.uniform(0.0, h.capsule_radius);
        for (int c = 0; c < 3; ++c) p[c] += dir[c] / norm * r;
        append_row(rows, p[0], p[1], p[2], rng.uniform());
    }
}

}  // namespace

Mat<double> human_keypoints(const SyntheticHuman& h) {
    Mat<double> k = body_keypoints(h.bones, h.pose);
    for (int j = 0; j < k.rows; ++j) {
        const std::array<double, 3> p = rot_z({k(j, 0), k(j, 1), k(j, 2)}, h.heading);
        k(j, 0) = p[0] + h.position[0];
        k(j, 1) = p[1] + h.position[1];
        k(j, 2) = p[2] + h.position[2];
    }
    return k;
}

SceneSample generate_scene(uint64_t seed, int num_humans, double clutter_density,
                           const SceneConfig& cfg) {
    if (num_humans < 0) throw std::invalid_argument("generate_scene: negative human count");
    if (cfg.extent <= 0.0) throw std::invalid_argument("generate_scene: extent must be positive");
    Rng rng(seed);
    SceneSample s;
    std::vector<double> rows;

    for (int i = 0; i < num_humans; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
            SyntheticHuman h;
            const double margin = std::min(1.5, 0.5 * cfg.extent);
            h.position[0] = rng.uniform(-(cfg.extent - margin), cfg.extent - margin);
            h.position[1] = rng.uniform(-(cfg.extent - margin), cfg.extent - margin);
            h.heading = rng.uniform(-kPi, kPi);
            auto jitter = [&] { return rng.uniform(0.9, 1.1); };
            h.bones.hip *= jitter();
            h.bones.shoulder *= jitter();
            h.bones.torso *= jitter();
            h.bones.neck *= jitter();
            h.bones.nose *= jitter();
            h.bones.upper_arm *= jitter();
            h.bones.forearm *= jitter();
            h.bones.thigh *= jitter();
            h.bones.shin *= jitter();
            h.pose.lean = rng.uniform(-0.15, 0.15);
            for (int side = 0; side < 2; ++side) {
                h.pose.arm_swing[side] = rng.uniform(-0.5, 0.5);
                h.pose.elbow_bend[side] = rng.uniform(0.0, 0.9);
                h.pose.leg_swing[side] = rng.uniform(-0.4, 0.4);
                h.pose.knee_bend[side] = rng.uniform(0.0, 0.7);
            }
            h.capsule_radius = rng.uniform(cfg.capsule_radius[0], cfg.capsule_radius[1]);
            // stand on the ground: lowest body-frame joint touches ground_z
            Mat<double> body = body_keypoints(h.bones, h.pose);
            double mnz = std::numeric_limits<double>::max();
            for (int j = 0; j < body.rows; ++j) mnz = std::min(mnz, body(j, 2));
            h.position[2] = cfg.ground_z - mnz;

            const Mat<double> k = human_keypoints(h);
            HumanAnnotation ann = annotate(h, k);
            bool free = true;
            for (const HumanAnnotation& other : s.annotations)
                if (bev_overlap(ann, other)) {
                    free = false;
                    break;
                }
            if (!free) continue;
            sample_human_points(h, k, cfg, rng, rows);
            s.annotations.push_back(std::move(ann));
            s.humans.push_back(h);
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("generate_scene: no free placement for human " +
                                     std::to_string(i) + " after " +
                                     std::to_string(cfg.placement_retries) + " retries");
    }

    const int n_clutter = static_cast<int>(std::floor(clutter_density)) +
                          (rng.bernoulli(clutter_density - std::floor(clutter_density)) ? 1 : 0);
    for (int i = 0; i < n_clutter; ++i) {
        const double cx = rng.uniform(-cfg.extent, cfg.extent);
        const double cy = rng.uniform(-cfg.extent, cfg.extent);
        const int n = 30 + static_cast<int>(rng.uniform_int(51));
        if (rng.bernoulli(0.5)) {  // pole
            const double r = rng.uniform(0.05, 0.15), height = rng.uniform(0.5, 2.5);
            for (int p = 0; p < n; ++p) {
                const double a = rng.uniform(0.0, kTau), rr = rng.uniform(0.0, r);
                append_row(rows, cx + rr * std::cos(a), cy + rr * std::sin(a),
                           cfg.ground_z + rng.uniform(0.0, height), rng.uniform());
            }
        } else {  // box-shaped blob resting on the ground
            const double sx = rng.uniform(0.3, 1.5), sy = rng.uniform(0.3, 1.5),
                         sz = rng.uniform(0.3, 1.5);
            for (int p = 0; p < n; ++p)
                append_row(rows, cx + rng.uniform(-0.5, 0.5) * sx, cy + rng.uniform(-0.5, 0.5) * sy,
                           cfg.ground_z + rng.uniform(0.0, sz), rng.uniform());
        }
    }

    for (int i = 0; i < cfg.ground_points; ++i)
        append_row(rows, rng.uniform(-cfg.extent, cfg.extent), rng.uniform(-cfg.extent, cfg.extent),
                   cfg.ground_z + rng.normal(0.0, 0.01), rng.uniform());

    s.points = Mat<double>(static_cast<int>(rows.size() / 4), 4);
    std::copy(rows.begin(), rows.end(), s.points.data.begin());
    return s;
}

AugmentConfig identity_augment() {
    AugmentConfig cfg;
    cfg.flip_x_prob = 0.0;
    cfg.flip_y_prob = 0.0;
    cfg.global_scale = {1.0, 1.0};
    cfg.global_rotation = {0.0, 0.0};
    cfg.local_scale = {1.0, 1.0};
    cfg.local_rotation = {0.0, 0.0};
    cfg.frustum_intensity = {0.0, 0.0};
    cfg.noise_sigma = 0.0;
    cfg.gt_sampling = 0;
    return cfg;
}

void validate_augment_config(const AugmentConfig& cfg) {
    auto ordered = [](const std::array<double, 2>& r) { return r[0] <= r[1]; };
    if (cfg.flip_x_prob < 0 || cfg.flip_x_prob > 1 || cfg.flip_y_prob < 0 || cfg.flip_y_prob > 1)
        throw std::invalid_argument("augment: flip probability outside [0, 1]");
    if (!ordered(cfg.global_scale) || !ordered(cfg.global_rotation) || !ordered(cfg.local_scale) ||
        !ordered(cfg.local_rotation) || !ordered(cfg.frustum_intensity))
        throw std::invalid_argument("augment: range endpoints out of order");
    if (cfg.global_scale[0] <= 0 || cfg.local_scale[0] <= 0)
        throw std::invalid_argument("augment: scale must stay positive");
    if (cfg.frustum_intensity[0] < 0 || cfg.frustum_intensity[1] > 1)
        throw std::invalid_argument("augment: frustum intensity outside [0, 1]");
    if (cfg.noise_sigma < 0) throw std::invalid_argument("augment: negative noise sigma");
    if (cfg.gt_sampling < 0) throw std::invalid_argument("augment: negative sampling count");
}

SceneSample augment(const SceneSample& in, const AugmentConfig& cfg, Rng& rng,
                    AppliedAugment* applied) {
    validate_augment_config(cfg);
    SceneSample out = in;
    AppliedAugment rec;
    rec.flip_x = rng.bernoulli(cfg.flip_x_prob);
    rec.flip_y = rng.bernoulli(cfg.flip_y_prob);
    rec.rotation = rng.uniform(cfg.global_rotation[0], cfg.global_rotation[1]);
    rec.scale = rng.uniform(cfg.global_scale[0], cfg.global_scale[1]);

    const bool global_identity =
        !rec.flip_x && !rec.flip_y && rec.rotation == 0.0 && rec.scale == 1.0;
    auto global_xform = [&](double& x, double& y, double& z) {
        if (global_identity) return;
        if (rec.flip_x) x = -x;
        if (rec.flip_y) y = -y;
        const double c = std::cos(rec.rotation), s = std::sin(rec.rotation);
        const double rx = c * x - s * y, ry = s * x + c * y;
        x = rec.scale * rx;
        y = rec.scale * ry;
        z = rec.scale * z;
    };
    for (int i = 0; i < out.points.rows; ++i)
        global_xform(out.points(i, 0), out.points(i, 1), out.points(i, 2));

    for (HumanAnnotation& a : out.annotations) {
        for (int j = 0; j < a.keypoints.rows; ++j)
            global_xform(a.keypoints(j, 0), a.keypoints(j, 1), a.keypoints(j, 2));
        // one reflection turns the skeleton's left side into its right
        if (rec.flip_x != rec.flip_y) {
            for (const auto& [l, r] : kLrPairs) {
                for (int c = 0; c < 3; ++c) std::swap(a.keypoints(l, c), a.keypoints(r, c));
                std::swap(a.visibility[l], a.visibility[r]);
            }
        }
        if (rec.flip_x) a.yaw = kPi - a.yaw;
        if (rec.flip_y) a.yaw = -a.yaw;
        a.yaw += rec.rotation;
        a.yaw = std::remainder(a.yaw, kTau);
        global_xform(a.center[0], a.center[1], a.center[2]);
        for (double& v : a.size) v *= rec.scale;
    }

    for (HumanAnnotation& a : out.annotations) {
        const double ls = rng.uniform(cfg.local_scale[0], cfg.local_scale[1]);
        const double lr = rng.uniform(cfg.local_rotation[0], cfg.local_rotation[1]);
        rec.local_scale.push_back(ls);
        rec.local_rotation.push_back(lr);
        const bool local_identity = ls == 1.0 && lr == 0.0;
        if (local_identity && cfg.noise_sigma == 0.0) continue;
        const double c = std::cos(lr), s = std::sin(lr);
        auto local_xform = [&](double& x, double& y, double& z) {
            const double dx = ls * (x - a.center[0]), dy = ls * (y - a.center[1]);
            x = a.center[0] + c * dx - s * dy;
            y = a.center[1] + s * dx + c * dy;
            z = a.center[2] + ls * (z - a.center[2]);
        };
        for (int i = 0; i < out.points.rows; ++i) {
            if (!point_in_box(a, out.points(i, 0), out.points(i, 1), out.points(i, 2))) continue;
            if (!local_identity) local_xform(out.points(i, 0), out.points(i, 1), out.points(i, 2));
            if (cfg.noise_sigma > 0.0)
                for (int cc = 0; cc < 3; ++cc) out.points(i, cc) += rng.normal(0.0, cfg.noise_sigma);
        }
        if (!local_identity) {
            for (int j = 0; j < a.keypoints.rows; ++j)
                local_xform(a.keypoints(j, 0), a.keypoints(j, 1), a.keypoints(j, 2));
            for (double& v : a.size) v *= ls;
            a.yaw = std::remainder(a.yaw + lr, kTau);
        }
    }

    const double intensity = rng.uniform(cfg.frustum_intensity[0], cfg.frustum_intensity[1]);
    rec.frustum_width = intensity * kTau;
    rec.frustum_start = rng.uniform(0.0, kTau);
    if (rec.frustum_width > 0.0) {
        std::vector<double> kept;
        for (int i = 0; i < out.points.rows; ++i) {
            const double az = std::atan2(out.points(i, 1), out.points(i, 0));
            const double off = std::fmod(az - rec.frustum_start + 2.0 * kTau, kTau);
            if (off < rec.frustum_width) continue;
            append_row(kept, out.points(i, 0), out.points(i, 1), out.points(i, 2),
                       out.points(i, 3));
        }
        out.points = Mat<double>(static_cast<int>(kept.size() / 4), 4);
        std::copy(kept.begin(), kept.end(), out.points.data.begin());
    }

    if (applied) *applied = rec;
    return out;
}

SceneSample gt_sampling(const SceneSample& target, const std::vector<SceneSample>& bank, int count,
                        Rng& rng, const SceneConfig& cfg) {
    if (count > 0 && bank.empty()) throw std::invalid_argument("gt_sampling: empty bank");
    SceneSample out = target;
    std::vector<double> extra;
    for (int k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            const SceneSample& src = bank[rng.uniform_index(static_cast<int>(bank.size()))];
            if (src.annotations.empty()) continue;
            const int h = rng.uniform_index(static_cast<int>(src.annotations.size()));
            const HumanAnnotation& ann = src.annotations[h];
            const double margin = std::min(1.5, 0.5 * cfg.extent);
            const double dx = rng.uniform(-(cfg.extent - margin), cfg.extent - margin) - ann.center[0];
            const double dy = rng.uniform(-(cfg.extent - margin), cfg.extent - margin) - ann.center[1];
            HumanAnnotation moved = ann;
            moved.center[0] += dx;
            moved.center[1] += dy;
            bool free = true;
            for (const HumanAnnotation& other : out.annotations)
                if (bev_overlap(moved, other)) {
                    free = false;
                    break;
                }
            if (!free) continue;
            for (int j = 0; j < moved.keypoints.rows; ++j) {
                moved.keypoints(j, 0) += dx;
                moved.keypoints(j, 1) += dy;
            }
            for (int i = 0; i < src.points.rows; ++i)
                if (point_in_box(ann, src.points(i, 0), src.points(i, 1), src.points(i, 2)))
                    append_row(extra, src.points(i, 0) + dx, src.points(i, 1) + dy,
                               src.points(i, 2), src.points(i, 3));
            out.annotations.push_back(std::move(moved));
            if (src.humans.size() == src.annotations.size()) {
                SyntheticHuman sh = src.humans[h];
                sh.position[0] += dx;
                sh.position[1] += dy;
                out.humans.push_back(sh);
            }
            break;
        }
    }
    if (!extra.empty()) {
        Mat<double> merged(out.points.rows + static_cast<int>(extra.size() / 4), 4);
        std::copy(out.points.data.begin(), out.points.data.end(), merged.data.begin());
        std::copy(extra.begin(), extra.end(), merged.data.begin() + out.points.size());
        out.points = std::move(merged);
    }
    return out;
}

void save_scene(const std::string& path, const SceneSample& s) {
    std::ofstream os = open_out(path, "save_scene");
    write_magic(os, "VKPS");
    write_u32(os, kSceneVersion);
    write_u32(os, static_cast<uint32_t>(s.points.rows));
    write_u32(os, static_cast<uint32_t>(s.points.cols));
    write_f64_block(os, s.points.data.data(), s.points.size());
    write_u32(os, static_cast<uint32_t>(s.annotations.size()));
    for (const HumanAnnotation& a : s.annotations) {
        write_f64_block(os, a.center.data(), 3);
        write_f64_block(os, a.size.data(), 3);
        write_f64(os, a.yaw);
        write_u32(os, static_cast<uint32_t>(a.keypoints.rows));
        write_f64_block(os, a.keypoints.data.data(), a.keypoints.size());
        for (int v : a.visibility) write_u32(os, static_cast<uint32_t>(v));
    }
    write_u32(os, static_cast<uint32_t>(s.humans.size()));
    for (const SyntheticHuman& h : s.humans) {
        write_f64_block(os, h.position.data(), 3);
        write_f64(os, h.heading);
        const double bones[9] = {h.bones.hip,     h.bones.shoulder, h.bones.torso,
                                 h.bones.neck,    h.bones.nose,     h.bones.upper_arm,
                                 h.bones.forearm, h.bones.thigh,    h.bones.shin};
        write_f64_block(os, bones, 9);
        write_f64(os, h.pose.lean);
        write_f64_block(os, h.pose.arm_swing.data(), 2);
        write_f64_block(os, h.pose.elbow_bend.data(), 2);
        write_f64_block(os, h.pose.leg_swing.data(), 2);
        write_f64_block(os, h.pose.knee_bend.data(), 2);
        write_f64(os, h.capsule_radius);
    }
    if (!os) throw std::runtime_error("save_scene: write failed for " + path);
}

SceneSample load_scene(const std::string& path) {
    std::ifstream is = open_in(path, "load_scene");
    expect_magic(is, "VKPS", "load_scene");
    const uint32_t version = read_u32(is, "load_scene");
    if (version != kSceneVersion)
        throw std::runtime_error("load_scene: unsupported version " + std::to_string(version));
    SceneSample s;
    const uint32_t rows = read_u32(is, "load_scene");
    const uint32_t cols = read_u32(is, "load_scene");
    if (cols != 4) throw std::runtime_error("load_scene: expected 4 point channels");
    s.points = Mat<double>(static_cast<int>(rows), static_cast<int>(cols));
    read_f64_block(is, s.points.data.data(), s.points.size(), "load_scene");
    const uint32_t n_ann = read_u32(is, "load_scene");
    for (uint32_t i = 0; i < n_ann; ++i) {
        HumanAnnotation a;
        read_f64_block(is, a.center.data(), 3, "load_scene");
        read_f64_block(is, a.size.data(), 3, "load_scene");
        a.yaw = read_f64(is, "load_scene");
        const uint32_t k = read_u32(is, "load_scene");
        a.keypoints = Mat<double>(static_cast<int>(k), 3);
        read_f64_block(is, a.keypoints.data.data(), a.keypoints.size(), "load_scene");
        a.visibility.resize(k);
        for (uint32_t j = 0; j < k; ++j) a.visibility[j] = static_cast<int>(read_u32(is, "load_scene"));
        s.annotations.push_back(std::move(a));
    }
    const uint32_t n_h = read_u32(is, "load_scene");
    for (uint32_t i = 0; i < n_h; ++i) {
        SyntheticHuman h;
        read_f64_block(is, h.position.data(), 3, "load_scene");
        h.heading = read_f64(is, "load_scene");
        double bones[9];
        read_f64_block(is, bones, 9, "load_scene");
        h.bones = {bones[0], bones[1], bones[2], bones[3], bones[4],
                   bones[5], bones[6], bones[7], bones[8]};
        h.pose.lean = read_f64(is, "load_scene");
        read_f64_block(is, h.pose.arm_swing.data(), 2, "load_scene");
        read_f64_block(is, h.pose.elbow_bend.data(), 2, "load_scene");
        read_f64_block(is, h.pose.leg_swing.data(), 2, "load_scene");
        read_f64_block(is, h.pose.knee_bend.data(), 2, "load_scene");
        h.capsule_radius = read_f64(is, "load_scene");
        s.humans.push_back(h);
    }
    return s;
}

std::vector<std::string> list_scenes(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".vkps")
            out.push_back(entry.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

void write_manifest(const std::string& path, const std::vector<std::string>& scene_paths) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const std::string& p : scene_paths) os << p << '\n';
}

std::vector<std::string> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

}  // namespace vkp
