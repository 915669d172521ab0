#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "voxelkp/checkpoint.hpp"
#include "voxelkp/network.hpp"
#include "voxelkp/runner.hpp"
#include "voxelkp/scene.hpp"
#include "voxelkp/skeleton.hpp"

namespace fs = std::filesystem;
using vkp::RunConfig;

namespace {

// small everything: +-12.8 m grid, narrow net, steps counted in single digits
RunConfig make_cfg(const std::string& tag) {
    RunConfig cfg;
    cfg.data.dir = "cli_" + tag + "/data";
    cfg.data.scenes = 2;
    cfg.data.humans_min = 2;
    cfg.data.humans_max = 3;
    cfg.data.scene.extent = 12.0;
    cfg.grid.range_min = {-12.8, -12.8, -2.0};
    cfg.grid.range_max = {12.8, 12.8, 4.0};
    cfg.grid.voxel_size = {0.1, 0.1, 0.1};
    cfg.network.channels = {16, 32, 64, 64, 64};
    cfg.network.bev_channels = 96;
    cfg.network.grid_shape = {cfg.grid.cells(0), cfg.grid.cells(1), cfg.grid.cells(2)};
    cfg.steps = 2;
    cfg.batch_size = 2;
    cfg.seed = 11;
    cfg.out = "cli_" + tag + "/out";
    vkp::validate_run_config(cfg);
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(VOXELKP_BIN) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("generate writes the requested dataset deterministically") {
    RunConfig cfg = make_cfg("gen");
    fs::remove_all("cli_gen");

    cfg.data.scenes = 1;
    std::vector<std::string> paths = vkp::cmd_generate(cfg);
    CHECK(paths.size() == 1);
    CHECK(fs::exists(paths[0]));
    CHECK(vkp::read_manifest(cfg.data.dir + "/manifest.txt").size() == 1);

    const std::string once = slurp(paths[0]);
    vkp::cmd_generate(cfg);
    CHECK(slurp(paths[0]) == once);  // same seed, same bytes

    cfg.seed = 12;
    vkp::cmd_generate(cfg);
    CHECK(slurp(paths[0]) != once);

    cfg.data.scenes = 50;
    cfg.data.dir = "cli_gen/data50";
    paths = vkp::cmd_generate(cfg);
    CHECK(paths.size() == 50);
    CHECK(vkp::read_manifest(cfg.data.dir + "/manifest.txt").size() == 50);
    CHECK(vkp::list_scenes(cfg.data.dir).size() == 50);

    // scenes honor the configured human range
    int hmin = 99, hmax = -1;
    for (const std::string& p : vkp::list_scenes(cfg.data.dir)) {
        const int n = static_cast<int>(vkp::load_scene(p).annotations.size());
        hmin = std::min(hmin, n);
        hmax = std::max(hmax, n);
    }
    CHECK(hmin >= cfg.data.humans_min);
    CHECK(hmax <= cfg.data.humans_max);
    fs::remove_all("cli_gen");
}

TEST_CASE("a single training step leaves a checkpoint and one log row") {
    RunConfig cfg = make_cfg("one");
    fs::remove_all("cli_one");
    vkp::cmd_generate(cfg);

    cfg.steps = 1;
    const vkp::TrainResult r = vkp::cmd_train(cfg);
    CHECK(r.steps_run == 1);
    CHECK(std::isfinite(r.final_loss));
    CHECK(fs::exists(r.checkpoint_path));

    const auto log = read_csv(r.log_path);
    REQUIRE(log.size() == 2);
    CHECK(log[0] == std::vector<std::string>{"step", "lr", "total", "heatmap", "regression",
                                             "visibility", "iou", "skeleton"});
    CHECK(log[1][0] == "0");
    CHECK(std::stod(log[1][2]) == doctest::Approx(r.final_loss));

    // the checkpoint carries weights plus optimizer state
    bool has_opt = false, has_weight = false;
    for (const vkp::NamedTensor& t : vkp::load_checkpoint(r.checkpoint_path)) {
        has_opt |= t.name == "opt.step";
        has_weight |= t.name.rfind("opt.", 0) != 0;
    }
    CHECK(has_opt);
    CHECK(has_weight);
    fs::remove_all("cli_one");
}

TEST_CASE("log lr column follows the one-cycle shape") {
    RunConfig cfg = make_cfg("lr");
    fs::remove_all("cli_lr");
    vkp::cmd_generate(cfg);

    cfg.steps = 6;  // warmup = 2 of 6 steps
    vkp::cmd_train(cfg);
    const auto log = read_csv(cfg.out + "/train_log.csv");
    REQUIRE(log.size() == 7);
    const double lr0 = std::stod(log[1][1]);
    const double lr_peak = std::stod(log[3][1]);
    const double lr_last = std::stod(log[6][1]);
    CHECK(lr0 == cfg.optimizer.lr / 25.0);
    CHECK(lr_peak == doctest::Approx(cfg.optimizer.lr).epsilon(1e-12));
    CHECK(lr0 < cfg.optimizer.lr);
    CHECK(lr_last <= lr0);
    fs::remove_all("cli_lr");
}

TEST_CASE("interrupting and resuming reproduces the uninterrupted run byte for byte") {
    RunConfig cfg = make_cfg("resume");
    fs::remove_all("cli_resume");
    vkp::cmd_generate(cfg);
    cfg.steps = 6;

    cfg.out = "cli_resume/full";
    vkp::cmd_train(cfg);

    cfg.out = "cli_resume/split";
    const vkp::TrainResult part = vkp::cmd_train(cfg, "", 3);
    CHECK(part.steps_run == 3);
    const vkp::TrainResult rest = vkp::cmd_train(cfg, part.checkpoint_path);
    CHECK(rest.steps_run == 3);

    CHECK(slurp("cli_resume/full/checkpoint.vkpw") == slurp("cli_resume/split/checkpoint.vkpw"));
    CHECK(slurp("cli_resume/full/train_log.csv") == slurp("cli_resume/split/train_log.csv"));

    // repeating the full run is also bit-identical
    cfg.out = "cli_resume/again";
    vkp::cmd_train(cfg);
    CHECK(slurp("cli_resume/full/checkpoint.vkpw") == slurp("cli_resume/again/checkpoint.vkpw"));
    fs::remove_all("cli_resume");
}

TEST_CASE("ground-truth oracle evaluation is perfect by construction") {
    RunConfig cfg = make_cfg("oracle");
    fs::remove_all("cli_oracle");
    vkp::cmd_generate(cfg);

    const vkp::EvalResult r = vkp::cmd_eval(cfg, "", true);
    REQUIRE(r.rows.size() == 8);
    CHECK(r.rows.front().part == "head");
    CHECK(r.rows.back().part == "all");
    for (const vkp::ReportRow& row : r.rows) {
        CHECK(row.mpjpe == 0.0);
        CHECK(row.oks_ap == 1.0);
        CHECK(row.pem == 0.0);
    }
    CHECK(fs::exists(r.csv_path));
    CHECK(fs::exists(r.text_path));
    fs::remove_all("cli_oracle");
}

TEST_CASE("eval equals a by-hand recomputation over the same decoded outputs") {
    RunConfig cfg = make_cfg("recompute");
    fs::remove_all("cli_recompute");
    vkp::cmd_generate(cfg);
    cfg.steps = 1;
    const vkp::TrainResult tr = vkp::cmd_train(cfg);
    const vkp::EvalResult ev = vkp::cmd_eval(cfg, tr.checkpoint_path);

    // same pipeline, assembled from the parts
    vkp::Rng rng(0);
    vkp::VoxelKpNet<double> net = vkp::make_network<double>(cfg.network, rng);
    vkp::restore_params(net.store, vkp::load_checkpoint(tr.checkpoint_path));
    const vkp::BevGeometry geom = vkp::head_geometry(cfg);
    std::vector<std::vector<vkp::PoseObject>> preds, gts;
    for (const std::string& path : vkp::list_scenes(cfg.data.dir)) {
        const vkp::SceneSample s = vkp::load_scene(path);
        std::vector<vkp::PoseObject> g;
        for (const vkp::HumanAnnotation& a : s.annotations)
            g.push_back({a.keypoints, a.visibility, {a.size[0], a.size[1]}});
        gts.push_back(std::move(g));

        vkp::PointCloud<double> cloud;
        cloud.points = s.points;
        const auto h = vkp::infer(net, std::vector<vkp::PointCloud<double>>{cloud}, cfg.grid);
        const auto dets = vkp::decode(h, cfg.eval.score_threshold, cfg.eval.max_detections,
                                      geom.origin, geom.cell, cfg.network.iou_score_weight);
        std::vector<vkp::PoseObject> p;
        for (const auto& d : dets[0]) {
            vkp::PoseObject o;
            o.keypoints = d.keypoints;
            for (double v : d.visibilities) o.visibility.push_back(v > 0.5 ? 1 : 0);
            o.bev_size = {d.size[0], d.size[1]};
            p.push_back(std::move(o));
        }
        preds.push_back(std::move(p));
    }
    const std::vector<vkp::ReportRow> want =
        vkp::report(preds, gts, vkp::default_skeleton(), cfg.eval.match_radius);

    REQUIRE(ev.rows.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(ev.rows[i].part == want[i].part);
        CHECK(ev.rows[i].mpjpe == want[i].mpjpe);
        CHECK(ev.rows[i].oks_ap == want[i].oks_ap);
        CHECK(ev.rows[i].pem == want[i].pem);
    }
    fs::remove_all("cli_recompute");
}

TEST_CASE("inference records round-trip and rendering is deterministic") {
    RunConfig cfg = make_cfg("infer");
    fs::remove_all("cli_infer");
    vkp::cmd_generate(cfg);
    cfg.steps = 1;
    const vkp::TrainResult tr = vkp::cmd_train(cfg);

    const std::string scene = vkp::list_scenes(cfg.data.dir)[0];
    const std::string rec = cfg.out + "/predictions.csv";
    const std::string svg = cfg.out + "/render.svg";
    vkp::cmd_infer(cfg, tr.checkpoint_path, scene, rec, svg);

    {
        std::ifstream in(rec, std::ios::binary);
        const auto frames = vkp::read_pose_records(in, cfg.network.keypoints);
        for (const auto& frame : frames)
            for (const vkp::PoseObject& o : frame) {
                CHECK(o.keypoints.rows == cfg.network.keypoints);
                CHECK(o.visibility.size() == static_cast<size_t>(cfg.network.keypoints));
            }
    }
    const std::string svg_text = slurp(svg);
    CHECK(svg_text.find("<svg") != std::string::npos);
    CHECK(svg_text.find("truth") != std::string::npos);

    const std::string rec_once = slurp(rec);
    vkp::cmd_infer(cfg, tr.checkpoint_path, scene, rec, svg);
    CHECK(slurp(rec) == rec_once);
    CHECK(slurp(svg) == svg_text);

    // records scored against the dataset match a direct eval of the checkpoint
    const vkp::EvalResult direct = vkp::cmd_eval(cfg, tr.checkpoint_path);
    std::ofstream all(cfg.out + "/all.csv", std::ios::binary);
    std::vector<std::vector<vkp::PoseObject>> frames;
    vkp::Rng rng(0);
    vkp::VoxelKpNet<double> net = vkp::make_network<double>(cfg.network, rng);
    vkp::restore_params(net.store, vkp::load_checkpoint(tr.checkpoint_path));
    const vkp::BevGeometry geom = vkp::head_geometry(cfg);
    for (const std::string& path : vkp::list_scenes(cfg.data.dir)) {
        vkp::PointCloud<double> cloud;
        cloud.points = vkp::load_scene(path).points;
        const auto h = vkp::infer(net, std::vector<vkp::PointCloud<double>>{cloud}, cfg.grid);
        const auto dets = vkp::decode(h, cfg.eval.score_threshold, cfg.eval.max_detections,
                                      geom.origin, geom.cell, cfg.network.iou_score_weight);
        std::vector<vkp::PoseObject> p;
        for (const auto& d : dets[0]) {
            vkp::PoseObject o;
            o.keypoints = d.keypoints;
            for (double v : d.visibilities) o.visibility.push_back(v > 0.5 ? 1 : 0);
            o.bev_size = {d.size[0], d.size[1]};
            p.push_back(std::move(o));
        }
        frames.push_back(std::move(p));
    }
    vkp::write_pose_records(all, frames);
    all.close();
    const vkp::EvalResult scored = vkp::cmd_report(cfg, cfg.out + "/all.csv");
    for (size_t i = 0; i < direct.rows.size(); ++i) {
        CHECK(scored.rows[i].mpjpe == direct.rows[i].mpjpe);
        CHECK(scored.rows[i].oks_ap == direct.rows[i].oks_ap);
        CHECK(scored.rows[i].pem == direct.rows[i].pem);
    }
    fs::remove_all("cli_infer");
}

TEST_CASE("failure modes: empty dataset, nan loss, missing artifacts") {
    RunConfig cfg = make_cfg("fail");
    fs::remove_all("cli_fail");
    fs::create_directories(cfg.data.dir);  // exists but holds no scenes

    CHECK_THROWS_WITH_AS(vkp::cmd_train(cfg), doctest::Contains("no scenes"), std::runtime_error);
    CHECK_THROWS_WITH_AS(vkp::cmd_eval(cfg, "", true), doctest::Contains("no scenes"),
                         std::runtime_error);

    vkp::cmd_generate(cfg);
    cfg.optimizer.lr = 1e18;
    cfg.steps = 8;
    CHECK_THROWS_WITH_AS(vkp::cmd_train(cfg), doctest::Contains("non-finite loss"),
                         vkp::NanLossError);
    // the dump names every term
    try {
        vkp::cmd_train(cfg);
    } catch (const vkp::NanLossError& e) {
        const std::string msg = e.what();
        for (const char* term : {"heatmap=", "regression=", "visibility=", "iou=", "skeleton="})
            CHECK(msg.find(term) != std::string::npos);
    }

    cfg.optimizer.lr = 0.003;
    CHECK_THROWS_AS(vkp::cmd_eval(cfg, "cli_fail/no_such.vkpw"), std::runtime_error);
    fs::remove_all("cli_fail");
}

TEST_CASE("binary exit codes") {
    fs::remove_all("cli_bin");
    fs::create_directories("cli_bin");
    // config the binary runs fast with
    {
        RunConfig cfg = make_cfg("bin");
        cfg.data.scenes = 1;
        cfg.steps = 1;
        std::ofstream out("cli_bin/config.json", std::ios::binary);
        out << vkp::dump_run_config(cfg);
    }

    CHECK(run_cli("") == 1);                       // missing subcommand
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("train --bogus-flag") == 1);
    CHECK(run_cli("train --config cli_bin/missing.json") == 1);
    CHECK(run_cli("generate --config cli_bin/config.json") == 0);
    CHECK(run_cli("train --config cli_bin/config.json") == 0);
    CHECK(run_cli("eval --config cli_bin/config.json") == 0);
    CHECK(run_cli("eval --config cli_bin/config.json --checkpoint cli_bin/nope.vkpw") == 2);
    CHECK(run_cli("report --config cli_bin/config.json --pred cli_bin/nope.csv") == 2);

    const int nan_code = [&] {
        std::ofstream patch("cli_bin/nan.json", std::ios::binary);
        RunConfig cfg = make_cfg("bin");
        cfg.data.scenes = 1;
        cfg.steps = 8;
        cfg.optimizer.lr = 1e18;
        patch << vkp::dump_run_config(cfg);
        patch.close();
        return run_cli("train --config cli_bin/nan.json");
    }();
    CHECK(nan_code == 3);

    // env var must be a positive integer when present
    const std::string env_bad = std::string("VOXELKP_THREADS=abc ") + VOXELKP_BIN +
                                " generate --config cli_bin/config.json > /dev/null 2>&1";
    int status = std::system(env_bad.c_str());
    CHECK(WEXITSTATUS(status) == 1);
    const std::string env_ok = std::string("VOXELKP_THREADS=4 ") + VOXELKP_BIN +
                               " generate --config cli_bin/config.json > /dev/null 2>&1";
    status = std::system(env_ok.c_str());
    CHECK(WEXITSTATUS(status) == 0);

    fs::remove_all("cli_bin");
}
