#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "voxelkp/mat.hpp"

namespace vkp {

// Joint layout shared by training targets, losses, metrics, and scene
// generation. Left/right pairs sit at (odd, even) indices so a flip swap is a
// single xor.
struct SkeletonSpec {
    std::vector<std::string> joints;
    std::vector<std::array<int, 2>> bones;
    std::vector<double> oks_k;   // per-joint falloff constants
    double pem_penalty = 0.25;   // cost of an unmatched keypoint, meters
    std::vector<std::pair<std::string, std::vector<int>>> parts;  // report grouping

    int count() const { return static_cast<int>(joints.size()); }
};

inline SkeletonSpec default_skeleton() {
    SkeletonSpec s;
    s.joints = {"nose",      "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
                "l_wrist",   "r_wrist",    "l_hip",      "r_hip",   "l_knee",
                "r_knee",    "l_ankle",    "r_ankle",    "head"};
    s.bones = {{0, 13}, {0, 1}, {0, 2},  {1, 2},  {7, 8},   {1, 3},  {3, 5},  {2, 4},
               {4, 6},  {7, 9}, {9, 11}, {8, 10}, {10, 12}, {1, 7},  {2, 8}};
    s.oks_k = {0.026, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
               0.107, 0.107, 0.087, 0.087, 0.089, 0.089, 0.026};
    s.parts = {{"head", {0, 13}},   {"shoulders", {1, 2}}, {"elbows", {3, 4}},
               {"wrists", {5, 6}},  {"hips", {7, 8}},      {"knees", {9, 10}},
               {"ankles", {11, 12}}, {"all", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13}}};
    return s;
}

inline void validate_skeleton(const SkeletonSpec& s) {
    const int k = s.count();
    if (k < 1) throw std::invalid_argument("skeleton: needs at least one joint");
    if (static_cast<int>(s.oks_k.size()) != k)
        throw std::invalid_argument("skeleton: one falloff constant per joint");
    for (double v : s.oks_k)
        if (v <= 0.0) throw std::invalid_argument("skeleton: falloff constants must be positive");
    for (const auto& b : s.bones)
        if (b[0] < 0 || b[1] < 0 || b[0] >= k || b[1] >= k || b[0] == b[1])
            throw std::invalid_argument("skeleton: bone endpoints out of range");
    for (const auto& [name, ids] : s.parts)
        for (int j : ids)
            if (j < 0 || j >= k) throw std::invalid_argument("skeleton: part joint out of range");
}

// One annotated human: an upright box plus global-frame keypoints.
struct HumanAnnotation {
    std::array<double, 3> center{};  // box center, meters
    std::array<double, 3> size{};    // box extents, meters
    double yaw = 0.0;
    Mat<double> keypoints;           // K x 3, global meters
    std::vector<int> visibility;     // K entries in {0, 1}
};

}  // namespace vkp
