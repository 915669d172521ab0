#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxelkp/mat.hpp"
#include "voxelkp/rng.hpp"
#include "voxelkp/skeleton.hpp"

namespace vkp {

// Rest lengths in meters; hip and shoulder are full widths. Per-human jitter
// keeps every bone inside anthropometric bounds.
struct BoneLengths {
    double hip = 0.26;
    double shoulder = 0.36;
    double torso = 0.50;
    double neck = 0.20;
    double nose = 0.12;
    double upper_arm = 0.30;
    double forearm = 0.26;
    double thigh = 0.44;
    double shin = 0.42;
};

// Joint angles in radians; paired arrays are {left, right}.
struct PoseAngles {
    double lean = 0.0;
    std::array<double, 2> arm_swing{};
    std::array<double, 2> elbow_bend{};
    std::array<double, 2> leg_swing{};
    std::array<double, 2> knee_bend{};
};

struct SyntheticHuman {
    std::array<double, 3> position{};  // hip center, scene frame
    double heading = 0.0;
    BoneLengths bones;
    PoseAngles pose;
    double capsule_radius = 0.08;
};

// Forward kinematics: the 14 joints of the default skeleton, scene frame.
Mat<double> human_keypoints(const SyntheticHuman& h);

struct SceneSample {
    Mat<double> points;  // N x 4: x, y, z, intensity
    std::vector<HumanAnnotation> annotations;
    std::vector<SyntheticHuman> humans;  // generator draws; untouched by augmentation
};

struct SceneConfig {
    double extent = 24.0;  // half-range in x and y, meters
    double ground_z = -1.7;
    int ground_points = 400;
    int placement_retries = 100;
    std::array<double, 2> points_per_human{200.0, 800.0};
    std::array<double, 2> capsule_radius{0.05, 0.12};
    double full_density_range = 8.0;  // decay starts past this distance
    int min_points_per_human = 40;
};

// Humans never overlap in bird's-eye view; exhausting placement retries is an
// error. Identical seeds reproduce the scene bit for bit.
SceneSample generate_scene(uint64_t seed, int num_humans, double clutter_density,
                           const SceneConfig& cfg = {});

struct AugmentConfig {
    double flip_x_prob = 0.5;
    double flip_y_prob = 0.5;
    std::array<double, 2> global_scale{0.95, 1.05};
    std::array<double, 2> global_rotation{-0.7853981633974483, 0.7853981633974483};
    std::array<double, 2> local_scale{0.95, 1.05};
    std::array<double, 2> local_rotation{-0.15707963267948966, 0.15707963267948966};
    std::array<double, 2> frustum_intensity{0.0, 0.2};
    double noise_sigma = 0.01;
    int gt_sampling = 0;
};

// Everything collapsed so augment() is the identity map.
AugmentConfig identity_augment();

void validate_augment_config(const AugmentConfig& cfg);

// Record of the parameters one augment() call drew, for reproduction.
struct AppliedAugment {
    bool flip_x = false;
    bool flip_y = false;
    double rotation = 0.0;
    double scale = 1.0;
    std::vector<double> local_scale;     // one per annotation
    std::vector<double> local_rotation;  // one per annotation
    double frustum_start = 0.0;          // radians
    double frustum_width = 0.0;
};

// Global flip/rotate/scale over points and labels, then per-object scale,
// rotation and point noise, then frustum dropout on points only. Single-axis
// flips relabel left and right joints.
SceneSample augment(const SceneSample& in, const AugmentConfig& cfg, Rng& rng,
                    AppliedAugment* applied = nullptr);

// Copies up to count humans from bank scenes into the target wherever their
// boxes fit without overlapping in bird's-eye view; gives up quietly on
// crowded scenes.
SceneSample gt_sampling(const SceneSample& target, const std::vector<SceneSample>& bank, int count,
                        Rng& rng, const SceneConfig& cfg = {});

void save_scene(const std::string& path, const SceneSample& s);
SceneSample load_scene(const std::string& path);

// Scene files in a directory, sorted by filename.
std::vector<std::string> list_scenes(const std::string& dir);

void write_manifest(const std::string& path, const std::vector<std::string>& scene_paths);
std::vector<std::string> read_manifest(const std::string& path);

}  // namespace vkp
