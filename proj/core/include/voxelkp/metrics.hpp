#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "voxelkp/mat.hpp"
#include "voxelkp/skeleton.hpp"

namespace vkp {

// One evaluated object: K keypoints in global meters plus a 0/1 visibility
// flag per joint. bev_size is the box footprint used for the OKS scale.
struct PoseObject {
    Mat<double> keypoints;        // K x 3
    std::vector<int> visibility;  // K entries, 0 or 1
    std::array<double, 2> bev_size{1.0, 1.0};
};

struct MatchResult {
    std::vector<std::array<int, 2>> pairs;  // {prediction index, ground-truth index}
    std::vector<int> unmatched_pred;
    std::vector<int> unmatched_gt;
};

// Minimum-cost assignment on an n x m matrix, O(max(n,m)^3). Returns the
// column picked for each row, -1 where max(n,m) > min(n,m) leaves a row out.
std::vector<int> hungarian(const Mat<double>& cost);

// Mean distance over the ground truth's visible joints; no visible joint
// makes the pair unmatched for any finite radius.
double mean_keypoint_distance(const PoseObject& pred, const PoseObject& gt);

// One-to-one assignment minimising total mean keypoint distance; pairs
// costing more than match_radius are demoted to unmatched afterwards.
MatchResult match_objects(const std::vector<PoseObject>& preds, const std::vector<PoseObject>& gts,
                          double match_radius = 0.5);

// Visibility-weighted mean joint error for one matched pair, restricted to
// the given joints. All joints invisible leaves nothing to average.
std::optional<double> mpjpe(const PoseObject& pred, const PoseObject& gt,
                            const std::vector<int>& joints);

// Keypoint similarity in [0, 1]; s scales with object size, k_j per joint.
std::optional<double> oks(const PoseObject& pred, const PoseObject& gt, double s,
                          const std::vector<double>& k, const std::vector<int>& joints);

double oks_scale(const PoseObject& gt);

// Mean over thresholds 0.50, 0.55, ..., 0.95 of the fraction of instances at
// or above the threshold; missed ground truths dilute every threshold.
double oks_ap(const std::vector<double>& instance_oks, int missed);

// (sum of matched distances + C per unmatched keypoint) / total keypoints.
double pem(const std::vector<double>& matched_distances, int unmatched, double penalty);

struct ReportRow {
    std::string part;
    double mpjpe = 0.0;
    double oks_ap = 0.0;
    double pem = 0.0;
};

// Per-part table over a batch of frames: one row per named part plus its
// closing "all" row, matching the skeleton's part order.
std::vector<ReportRow> report(const std::vector<std::vector<PoseObject>>& preds,
                              const std::vector<std::vector<PoseObject>>& gts,
                              const SkeletonSpec& skel, double match_radius = 0.5);

std::string format_report_table(const std::vector<ReportRow>& rows);
std::string format_report_csv(const std::vector<ReportRow>& rows);

// Line-delimited interchange: frame id, object id, then x,y,z,v per joint.
// Doubles round-trip exactly. Frames and objects are ordered by id on read.
void write_pose_records(std::ostream& out, const std::vector<std::vector<PoseObject>>& frames);
std::vector<std::vector<PoseObject>> read_pose_records(std::istream& in, int keypoints);

}  // namespace vkp
