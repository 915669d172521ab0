#pragma once

#include <cstdint>
#include <string>

#include "network.hpp"
#include "objectives.hpp"
#include "optimizer.hpp"
#include "point_cloud.hpp"
#include "scene.hpp"

namespace vkp {

// Dataset location plus the knobs generate() uses to build it.
struct DataConfig {
    std::string dir = "data";
    int scenes = 4;
    int humans_min = 2;
    int humans_max = 5;
    double clutter = 1.0;  // clutter objects per 100 m^2
    SceneConfig scene;
};

struct ScheduleConfig {
    double start_div = 25.0;   // lr(0) = peak / start_div
    double end_div = 1000.0;   // lr(final) = peak / end_div
};

struct EvalConfig {
    double score_threshold = 0.25;
    int max_detections = 32;
    double match_radius = 0.5;  // meters, center distance for prediction/truth pairing
};

// One file drives every subcommand. grid_shape inside `network` is always
// derived from `grid`, never read from JSON.
struct RunConfig {
    DataConfig data;
    VoxelGridSpec grid;
    NetworkConfig network;
    AugmentConfig augment;
    LossWeights loss;
    AdamWConfig optimizer;
    ScheduleConfig schedule;
    EvalConfig eval;
    int steps = 800;
    int batch_size = 2;
    uint64_t seed = 0;
    std::string out = "out";
};

void validate_run_config(const RunConfig& cfg);

// JSON text -> config. Every key is optional (defaults apply); unknown keys
// anywhere in the tree are an error. Derives network.grid_shape from grid.
RunConfig parse_run_config(const std::string& text);

RunConfig load_run_config(const std::string& path);

// Emits the full schema with current values; parse(dump(c)) reproduces c
// exactly (shortest-round-trip float formatting).
std::string dump_run_config(const RunConfig& cfg);

}  // namespace vkp
