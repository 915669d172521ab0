#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "metrics.hpp"
#include "objectives.hpp"

namespace vkp {

// Raised when the training loss leaves the reals; the message carries the
// per-term values for the failing step.
struct NanLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Lattice geometry of the prediction heads: origin at the grid corner, cell
// equal to the voxel size times the head stride (8, or 32 for direct 3d heads).
BevGeometry head_geometry(const RunConfig& cfg);

// Writes cfg.data.scenes scene files plus manifest.txt into cfg.data.dir;
// byte-identical for identical (config, seed). Returns the scene paths.
std::vector<std::string> cmd_generate(const RunConfig& cfg);

struct TrainResult {
    int steps_run = 0;  // steps executed by this invocation
    double final_loss = 0.0;
    std::string checkpoint_path;
    std::string log_path;
};

// Step loop over the dataset in cfg.data.dir: sample, augment, voxelize,
// forward, loss, backward, optimizer step, one-cycle lr. Appends a CSV row per
// step and writes the final checkpoint. cfg.steps is the schedule horizon and
// default stop; resume_from continues an earlier run from its stored step, and
// a non-negative `until` stops early (an interruption) without shortening the
// schedule.
TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_from = "", int until = -1);

struct EvalResult {
    std::vector<ReportRow> rows;
    std::string csv_path;
    std::string text_path;
};

// Forward + decode over every scene in cfg.data.dir, scored per part.
// gt_oracle short-circuits the network and feeds the ground truth back as
// predictions (pipeline check: MPJPE 0, OKS@AP 1).
EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool gt_oracle = false);

// Single-scene inference: writes interchange records, plus a top-down SVG
// (points, truth in green, predictions in red) when svg_path is non-empty.
void cmd_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& scene_path,
               const std::string& records_path, const std::string& svg_path = "");

// Re-scores existing interchange records against the dataset's ground truth.
EvalResult cmd_report(const RunConfig& cfg, const std::string& records_path);

}  // namespace vkp
