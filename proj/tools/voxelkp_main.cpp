#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "voxelkp/runner.hpp"

namespace {

// engine work is single-threaded; the cap is validated so configs stay honest
int parse_thread_cap() {
    const char* env = std::getenv("VOXELKP_THREADS");
    if (!env) return 0;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
        std::fprintf(stderr, "VOXELKP_THREADS must be a positive integer, got \"%s\"\n", env);
        return -1;
    }
    return static_cast<int>(v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fully sparse voxel network for 3d human keypoint estimation"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, resume, out_dir, data_dir, scene_path, svg_path,
        records_path;
    uint64_t seed = 0;
    int steps = 0;
    bool gt_oracle = false;

    bool seed_set = false, steps_set = false, out_set = false, data_set = false;
    auto common = [&](CLI::App* c, bool with_out) {
        c->add_option("--config", config_path, "JSON run configuration")
            ->check(CLI::ExistingFile);
        c->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
            seed_set = true;
        });
        c->add_option("--data", data_dir, "override the dataset directory")
            ->each([&](const std::string&) { data_set = true; });
        if (with_out)
            c->add_option("--out", out_dir, "override the output directory")
                ->each([&](const std::string&) { out_set = true; });
    };

    CLI::App* c_generate = app.add_subcommand("generate", "write a synthetic dataset");
    common(c_generate, false);

    CLI::App* c_train = app.add_subcommand("train", "run the training loop");
    common(c_train, true);
    c_train->add_option("--steps", steps, "override the total step count")
        ->each([&](const std::string&) { steps_set = true; });
    c_train->add_option("--checkpoint", resume, "resume from this checkpoint");
    int until = -1;
    c_train->add_option("--until", until,
                        "stop after this step without shortening the lr schedule");

    CLI::App* c_eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    common(c_eval, true);
    c_eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
    c_eval->add_flag("--gt-oracle", gt_oracle, "feed ground truth back as predictions");

    CLI::App* c_infer = app.add_subcommand("infer", "run one scene and dump predictions");
    common(c_infer, true);
    c_infer->add_option("--checkpoint", checkpoint, "checkpoint to run");
    c_infer->add_option("--scene", scene_path, "scene file to process")->required();
    c_infer->add_option("--svg", svg_path, "also render a top-down SVG to this path");

    CLI::App* c_report = app.add_subcommand("report", "re-score prediction records");
    common(c_report, true);
    c_report->add_option("--pred", records_path, "interchange records to score")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    if (parse_thread_cap() < 0) return 1;

    try {
        vkp::RunConfig cfg = config_path.empty() ? vkp::parse_run_config("{}")
                                                 : vkp::load_run_config(config_path);
        if (seed_set) cfg.seed = seed;
        if (steps_set) cfg.steps = steps;
        if (out_set) cfg.out = out_dir;
        if (data_set) cfg.data.dir = data_dir;
        vkp::validate_run_config(cfg);
        const std::string default_ckpt = cfg.out + "/checkpoint.vkpw";

        if (c_generate->parsed()) {
            const std::vector<std::string> paths = vkp::cmd_generate(cfg);
            std::printf("wrote %zu scenes to %s\n", paths.size(), cfg.data.dir.c_str());
        } else if (c_train->parsed()) {
            const vkp::TrainResult r = vkp::cmd_train(cfg, resume, until);
            std::printf("ran %d steps, final loss %.6f\ncheckpoint: %s\nlog: %s\n", r.steps_run,
                        r.final_loss, r.checkpoint_path.c_str(), r.log_path.c_str());
        } else if (c_eval->parsed()) {
            const vkp::EvalResult r =
                vkp::cmd_eval(cfg, checkpoint.empty() ? default_ckpt : checkpoint, gt_oracle);
            std::fputs(vkp::format_report_table(r.rows).c_str(), stdout);
            std::printf("report: %s\n", r.csv_path.c_str());
        } else if (c_infer->parsed()) {
            const std::string rec = cfg.out + "/predictions.csv";
            std::filesystem::create_directories(cfg.out);
            vkp::cmd_infer(cfg, checkpoint.empty() ? default_ckpt : checkpoint, scene_path, rec,
                           svg_path);
            std::printf("predictions: %s\n", rec.c_str());
            if (!svg_path.empty()) std::printf("render: %s\n", svg_path.c_str());
        } else if (c_report->parsed()) {
            const vkp::EvalResult r = vkp::cmd_report(cfg, records_path);
            std::fputs(vkp::format_report_table(r.rows).c_str(), stdout);
            std::printf("report: %s\n", r.csv_path.c_str());
        }
    } catch (const vkp::NanLossError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
