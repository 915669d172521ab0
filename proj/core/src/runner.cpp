#include "voxelkp/runner.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxelkp/checkpoint.hpp"
#include "voxelkp/network.hpp"
#include "voxelkp/optimizer.hpp"
#include "voxelkp/scene.hpp"
#include "voxelkp/skeleton.hpp"

namespace fs = std::filesystem;

namespace vkp {
namespace {

// shortest exact decimal, so logs and renders are byte-stable
std::string fmt(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

std::vector<SceneSample> load_dataset(const std::string& dir) {
    const std::vector<std::string> paths = list_scenes(dir);
    if (paths.empty()) throw std::runtime_error("no scenes in " + dir);
    std::vector<SceneSample> out;
    out.reserve(paths.size());
    for (const std::string& p : paths) out.push_back(load_scene(p));
    return out;
}

std::vector<PoseObject> truth_objects(const std::vector<HumanAnnotation>& anns) {
    std::vector<PoseObject> out;
    out.reserve(anns.size());
    for (const HumanAnnotation& a : anns)
        out.push_back({a.keypoints, a.visibility, {a.size[0], a.size[1]}});
    return out;
}

std::vector<PoseObject> decoded_objects(const std::vector<PoseEstimate<double>>& dets) {
    std::vector<PoseObject> out;
    out.reserve(dets.size());
    for (const PoseEstimate<double>& d : dets) {
        PoseObject o;
        o.keypoints = d.keypoints;
        o.visibility.resize(d.visibilities.size());
        for (size_t j = 0; j < d.visibilities.size(); ++j)
            o.visibility[j] = d.visibilities[j] > 0.5 ? 1 : 0;
        o.bev_size = {d.size[0], d.size[1]};
        out.push_back(std::move(o));
    }
    return out;
}

VoxelKpNet<double> load_network(const RunConfig& cfg, const std::string& checkpoint) {
    Rng rng(0);  // weights are overwritten below
    VoxelKpNet<double> net = make_network<double>(cfg.network, rng);
    restore_params(net.store, load_checkpoint(checkpoint));
    return net;
}

std::vector<std::vector<PoseEstimate<double>>> run_decode(VoxelKpNet<double>& net,
                                                          const RunConfig& cfg,
                                                          const Mat<double>& points) {
    PointCloud<double> cloud;
    cloud.points = points;
    HeadOutputs<double> h = infer(net, std::vector<PointCloud<double>>{cloud}, cfg.grid);
    const BevGeometry geom = head_geometry(cfg);
    return decode(h, cfg.eval.score_threshold, cfg.eval.max_detections, geom.origin, geom.cell,
                  cfg.network.iou_score_weight);
}

EvalResult write_report(const RunConfig& cfg, const std::vector<ReportRow>& rows) {
    fs::create_directories(cfg.out);
    EvalResult res;
    res.rows = rows;
    res.csv_path = cfg.out + "/report.csv";
    res.text_path = cfg.out + "/report.txt";
    std::ofstream csv(res.csv_path, std::ios::binary);
    csv << format_report_csv(rows);
    std::ofstream txt(res.text_path, std::ios::binary);
    txt << format_report_table(rows);
    if (!csv || !txt) throw std::runtime_error("eval: cannot write report under " + cfg.out);
    return res;
}

void svg_polyline(std::ostream& out, const std::vector<std::array<double, 2>>& pts,
                  const char* color, bool closed) {
    out << (closed ? "<polygon" : "<polyline") << " points=\"";
    for (size_t i = 0; i < pts.size(); ++i)
        out << (i ? " " : "") << fmt(pts[i][0]) << "," << fmt(pts[i][1]);
    out << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
}

}  // namespace

BevGeometry head_geometry(const RunConfig& cfg) {
    const double stride = cfg.network.direct3d_heads ? 32.0 : 8.0;
    BevGeometry g;
    g.origin = {cfg.grid.range_min[0], cfg.grid.range_min[1]};
    g.cell = {cfg.grid.voxel_size[0] * stride, cfg.grid.voxel_size[1] * stride};
    return g;
}

std::vector<std::string> cmd_generate(const RunConfig& cfg) {
    validate_run_config(cfg);
    fs::create_directories(cfg.data.dir);
    std::vector<std::string> paths;
    for (int i = 0; i < cfg.data.scenes; ++i) {
        Rng meta(Rng::mix(cfg.seed, 0x5CEE000ull + static_cast<uint64_t>(i)));
        const int span = cfg.data.humans_max - cfg.data.humans_min + 1;
        const int humans = cfg.data.humans_min + meta.uniform_index(span);
        const SceneSample scene = generate_scene(Rng::mix(cfg.seed, static_cast<uint64_t>(i)),
                                                 humans, cfg.data.clutter, cfg.data.scene);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d.vkps", i);
        const std::string path = cfg.data.dir + "/" + name;
        save_scene(path, scene);
        paths.push_back(path);
    }
    write_manifest(cfg.data.dir + "/manifest.txt", paths);
    return paths;
}

TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_from, int until) {
    validate_run_config(cfg);
    const std::vector<SceneSample> scenes = load_dataset(cfg.data.dir);
    fs::create_directories(cfg.out);

    Rng init_rng(Rng::mix(cfg.seed, 0x1417ull));
    VoxelKpNet<double> net = make_network<double>(cfg.network, init_rng);
    AdamW<double> opt(net.store, cfg.optimizer);
    OneCycle sched = make_one_cycle(cfg.optimizer.lr, cfg.steps);
    sched.start_div = cfg.schedule.start_div;
    sched.end_div = cfg.schedule.end_div;

    int start_step = 0;
    if (!resume_from.empty()) {
        const std::vector<NamedTensor> tensors = load_checkpoint(resume_from);
        restore_params(net.store, tensors);
        opt.restore_state(tensors);
        start_step = static_cast<int>(opt.steps_taken());
        if (start_step > cfg.steps)
            throw std::runtime_error("train: checkpoint is already past the requested steps");
    }

    const int stop = until < 0 ? cfg.steps : std::min(until, cfg.steps);
    const SkeletonSpec skel = default_skeleton();
    const BevGeometry geom = head_geometry(cfg);

    TrainResult res;
    res.log_path = cfg.out + "/train_log.csv";
    res.checkpoint_path = cfg.out + "/checkpoint.vkpw";

    const bool fresh_log = !fs::exists(res.log_path) || fs::file_size(res.log_path) == 0;
    std::ofstream log(res.log_path, fresh_log ? std::ios::binary : std::ios::binary | std::ios::app);
    if (!log) throw std::runtime_error("train: cannot write " + res.log_path);
    if (fresh_log) log << "step,lr,total,heatmap,regression,visibility,iou,skeleton\n";

    for (int step = start_step; step < stop; ++step) {
        Rng rng(Rng::mix(cfg.seed, 0xBA7C000ull + static_cast<uint64_t>(step)));
        std::vector<PointCloud<double>> clouds;
        std::vector<std::vector<HumanAnnotation>> anns;
        for (int b = 0; b < cfg.batch_size; ++b) {
            SceneSample s = scenes[static_cast<size_t>(rng.uniform_index(
                static_cast<int>(scenes.size())))];
            if (cfg.augment.gt_sampling > 0)
                s = gt_sampling(s, scenes, cfg.augment.gt_sampling, rng, cfg.data.scene);
            s = augment(s, cfg.augment, rng);
            PointCloud<double> cloud;
            cloud.points = std::move(s.points);
            clouds.push_back(std::move(cloud));
            anns.push_back(std::move(s.annotations));
        }

        const SparseTensor3D<double> vox = voxelize(clouds, cfg.grid);
        Tape<double> tape;
        const ForwardResult<double> fwd = net_forward(tape, net, vox, true);
        const TargetMaps targets =
            assign_targets(anns, fwd.coords, cfg.batch_size, geom, cfg.network.keypoints);
        const LossTermIds ids = total_loss(tape, fwd, targets, cfg.loss, skel);

        auto term = [&](int id) { return tape.val(id)(0, 0); };
        const double total = term(ids.total);
        const double lr = sched.lr(step);
        if (!std::isfinite(total)) {
            std::ostringstream msg;
            msg << "train: non-finite loss at step " << step << ": total=" << term(ids.total)
                << " heatmap=" << term(ids.heatmap) << " regression=" << term(ids.regression)
                << " visibility=" << term(ids.visibility) << " iou=" << term(ids.iou)
                << " skeleton=" << term(ids.skeleton);
            throw NanLossError(msg.str());
        }

        net.store.zero_grads();
        tape.backward(ids.total);
        opt.step(lr);

        log << step << ',' << fmt(lr) << ',' << fmt(total) << ',' << fmt(term(ids.heatmap)) << ','
            << fmt(term(ids.regression)) << ',' << fmt(term(ids.visibility)) << ','
            << fmt(term(ids.iou)) << ',' << fmt(term(ids.skeleton)) << '\n';
        res.final_loss = total;
        ++res.steps_run;
    }
    log.flush();
    if (!log) throw std::runtime_error("train: failed writing " + res.log_path);

    std::vector<NamedTensor> tensors = snapshot_params(net.store);
    for (NamedTensor& t : opt.snapshot_state()) tensors.push_back(std::move(t));
    save_checkpoint(res.checkpoint_path, std::move(tensors));
    return res;
}

EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool gt_oracle) {
    validate_run_config(cfg);
    const std::vector<SceneSample> scenes = load_dataset(cfg.data.dir);

    std::vector<std::vector<PoseObject>> gts, preds;
    for (const SceneSample& s : scenes) gts.push_back(truth_objects(s.annotations));

    if (gt_oracle) {
        preds = gts;
    } else {
        VoxelKpNet<double> net = load_network(cfg, checkpoint);
        for (const SceneSample& s : scenes)
            preds.push_back(decoded_objects(run_decode(net, cfg, s.points)[0]));
    }

    return write_report(cfg, report(preds, gts, default_skeleton(), cfg.eval.match_radius));
}

void cmd_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& scene_path,
               const std::string& records_path, const std::string& svg_path) {
    validate_run_config(cfg);
    const SceneSample scene = load_scene(scene_path);
    VoxelKpNet<double> net = load_network(cfg, checkpoint);
    const std::vector<PoseEstimate<double>> dets = run_decode(net, cfg, scene.points)[0];

    std::ofstream rec(records_path, std::ios::binary);
    if (!rec) throw std::runtime_error("infer: cannot write " + records_path);
    write_pose_records(rec, {decoded_objects(dets)});

    if (svg_path.empty()) return;

    // top-down view, world x right and world y up
    double lo[2] = {scene.points(0, 0), scene.points(0, 1)};
    double hi[2] = {lo[0], lo[1]};
    for (int i = 0; i < scene.points.rows; ++i)
        for (int a = 0; a < 2; ++a) {
            lo[a] = std::min(lo[a], scene.points(i, a));
            hi[a] = std::max(hi[a], scene.points(i, a));
        }
    const double pad = 1.0;
    const double span = std::max(hi[0] - lo[0], hi[1] - lo[1]) + 2 * pad;
    const double side = 900.0, margin = 20.0;
    const double scale = (side - 2 * margin) / span;
    auto px = [&](double x) { return margin + (x - lo[0] + pad) * scale; };
    auto py = [&](double y) { return side - margin - (y - lo[1] + pad) * scale; };

    const SkeletonSpec skel = default_skeleton();
    auto draw_object = [&](std::ostream& out, const Mat<double>& kp,
                           const std::array<double, 3>& center, const std::array<double, 3>& size,
                           double yaw, const char* color) {
        const double c = std::cos(yaw), s = std::sin(yaw);
        std::vector<std::array<double, 2>> corners;
        for (auto [ex, ey] : {std::pair{1, 1}, {1, -1}, {-1, -1}, {-1, 1}}) {
            const double bx = ex * size[0] / 2, by = ey * size[1] / 2;
            corners.push_back({px(center[0] + c * bx - s * by), py(center[1] + s * bx + c * by)});
        }
        svg_polyline(out, corners, color, true);
        for (const std::array<int, 2>& b : skel.bones)
            svg_polyline(out,
                         {{px(kp(b[0], 0)), py(kp(b[0], 1))}, {px(kp(b[1], 0)), py(kp(b[1], 1))}},
                         color, false);
        for (int j = 0; j < kp.rows; ++j)
            out << "<circle cx=\"" << fmt(px(kp(j, 0))) << "\" cy=\"" << fmt(py(kp(j, 1)))
                << "\" r=\"2\" fill=\"" << color << "\"/>\n";
    };

    std::ofstream svg(svg_path, std::ios::binary);
    if (!svg) throw std::runtime_error("infer: cannot write " + svg_path);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(side) << "\" height=\""
        << fmt(side) << "\" viewBox=\"0 0 " << fmt(side) << " " << fmt(side) << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"#14161a\"/>\n";
    for (int i = 0; i < scene.points.rows; ++i)
        svg << "<circle cx=\"" << fmt(px(scene.points(i, 0))) << "\" cy=\""
            << fmt(py(scene.points(i, 1))) << "\" r=\"1\" fill=\"#8a8f98\"/>\n";
    for (const HumanAnnotation& a : scene.annotations)
        draw_object(svg, a.keypoints, a.center, a.size, a.yaw, "#35c26a");
    for (const PoseEstimate<double>& d : dets)
        draw_object(svg, d.keypoints, d.center, d.size, d.yaw, "#e04f4f");
    svg << "<text x=\"24\" y=\"32\" fill=\"#35c26a\" font-family=\"monospace\">truth</text>\n"
        << "<text x=\"24\" y=\"52\" fill=\"#e04f4f\" font-family=\"monospace\">prediction</text>\n"
        << "</svg>\n";
    if (!svg) throw std::runtime_error("infer: failed writing " + svg_path);
}

EvalResult cmd_report(const RunConfig& cfg, const std::string& records_path) {
    validate_run_config(cfg);
    const std::vector<SceneSample> scenes = load_dataset(cfg.data.dir);
    std::ifstream in(records_path, std::ios::binary);
    if (!in) throw std::runtime_error("report: cannot open " + records_path);
    std::vector<std::vector<PoseObject>> preds = read_pose_records(in, cfg.network.keypoints);
    if (preds.size() > scenes.size())
        throw std::runtime_error("report: more predicted frames than scenes");
    preds.resize(scenes.size());

    std::vector<std::vector<PoseObject>> gts;
    for (const SceneSample& s : scenes) gts.push_back(truth_objects(s.annotations));
    return write_report(cfg, report(preds, gts, default_skeleton(), cfg.eval.match_radius));
}

}  // namespace vkp
