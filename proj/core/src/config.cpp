#include "voxelkp/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace vkp {
namespace {

using nlohmann::json;

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw std::invalid_argument("config: \"" + where + "\" must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) { known = true; break; }
        if (!known)
            throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        it->get_to(out);
    } catch (const json::exception& e) {
        throw std::invalid_argument("config: bad value for \"" + std::string(key) + "\": " + e.what());
    }
}

void parse_data(const json& j, DataConfig& d) {
    expect_keys(j, "data", {"dir", "scenes", "humans_min", "humans_max", "clutter", "scene"});
    read_if(j, "dir", d.dir);
    read_if(j, "scenes", d.scenes);
    read_if(j, "humans_min", d.humans_min);
    read_if(j, "humans_max", d.humans_max);
    read_if(j, "clutter", d.clutter);
    if (auto it = j.find("scene"); it != j.end()) {
        expect_keys(*it, "data.scene",
                    {"extent", "ground_z", "ground_points", "placement_retries",
                     "points_per_human", "capsule_radius", "full_density_range",
                     "min_points_per_human"});
        read_if(*it, "extent", d.scene.extent);
        read_if(*it, "ground_z", d.scene.ground_z);
        read_if(*it, "ground_points", d.scene.ground_points);
        read_if(*it, "placement_retries", d.scene.placement_retries);
        read_if(*it, "points_per_human", d.scene.points_per_human);
        read_if(*it, "capsule_radius", d.scene.capsule_radius);
        read_if(*it, "full_density_range", d.scene.full_density_range);
        read_if(*it, "min_points_per_human", d.scene.min_points_per_human);
    }
}

void parse_grid(const json& j, VoxelGridSpec& g) {
    expect_keys(j, "grid", {"range_min", "range_max", "voxel_size"});
    read_if(j, "range_min", g.range_min);
    read_if(j, "range_max", g.range_max);
    read_if(j, "voxel_size", g.voxel_size);
}

void parse_network(const json& j, NetworkConfig& n) {
    expect_keys(j, "network",
                {"channels", "input_channels", "bev_channels", "keypoints", "head_hidden",
                 "ssk_blocks", "attention_blocks", "attention_heads", "box_size",
                 "ssk_kernels", "iou_score_weight", "direct3d_heads"});
    read_if(j, "channels", n.channels);
    read_if(j, "input_channels", n.input_channels);
    read_if(j, "bev_channels", n.bev_channels);
    read_if(j, "keypoints", n.keypoints);
    read_if(j, "head_hidden", n.head_hidden);
    read_if(j, "ssk_blocks", n.ssk_blocks);
    read_if(j, "attention_blocks", n.attention_blocks);
    read_if(j, "attention_heads", n.attention_heads);
    read_if(j, "box_size", n.box_size);
    read_if(j, "ssk_kernels", n.ssk_kernels);
    read_if(j, "iou_score_weight", n.iou_score_weight);
    read_if(j, "direct3d_heads", n.direct3d_heads);
}

void parse_augment(const json& j, AugmentConfig& a) {
    expect_keys(j, "augment",
                {"flip_x_prob", "flip_y_prob", "global_scale", "global_rotation",
                 "local_scale", "local_rotation", "frustum_intensity", "noise_sigma",
                 "gt_sampling"});
    read_if(j, "flip_x_prob", a.flip_x_prob);
    read_if(j, "flip_y_prob", a.flip_y_prob);
    read_if(j, "global_scale", a.global_scale);
    read_if(j, "global_rotation", a.global_rotation);
    read_if(j, "local_scale", a.local_scale);
    read_if(j, "local_rotation", a.local_rotation);
    read_if(j, "frustum_intensity", a.frustum_intensity);
    read_if(j, "noise_sigma", a.noise_sigma);
    read_if(j, "gt_sampling", a.gt_sampling);
}

void parse_loss(const json& j, LossWeights& w) {
    expect_keys(j, "loss",
                {"heatmap", "regression", "visibility", "iou", "skeleton",
                 "focal_alpha", "focal_beta", "huber_delta"});
    read_if(j, "heatmap", w.heatmap);
    read_if(j, "regression", w.regression);
    read_if(j, "visibility", w.visibility);
    read_if(j, "iou", w.iou);
    read_if(j, "skeleton", w.skeleton);
    read_if(j, "focal_alpha", w.focal_alpha);
    read_if(j, "focal_beta", w.focal_beta);
    read_if(j, "huber_delta", w.huber_delta);
}

void parse_optimizer(const json& j, AdamWConfig& o) {
    expect_keys(j, "optimizer", {"lr", "weight_decay", "beta1", "beta2", "eps"});
    read_if(j, "lr", o.lr);
    read_if(j, "weight_decay", o.weight_decay);
    read_if(j, "beta1", o.beta1);
    read_if(j, "beta2", o.beta2);
    read_if(j, "eps", o.eps);
}

}  // namespace

void validate_run_config(const RunConfig& cfg) {
    validate_network_config(cfg.network);
    validate_augment_config(cfg.augment);
    validate_loss_weights(cfg.loss);
    validate_adamw_config(cfg.optimizer);
    for (int a = 0; a < 3; ++a) {
        if (cfg.grid.voxel_size[a] <= 0.0)
            throw std::invalid_argument("config: voxel_size must be positive");
        if (cfg.grid.range_max[a] <= cfg.grid.range_min[a])
            throw std::invalid_argument("config: grid range_max must exceed range_min");
    }
    if (cfg.steps < 1) throw std::invalid_argument("config: steps must be at least 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("config: batch_size must be at least 1");
    if (cfg.schedule.start_div <= 1.0)
        throw std::invalid_argument("config: schedule.start_div must exceed 1");
    if (cfg.schedule.end_div < cfg.schedule.start_div)
        throw std::invalid_argument("config: schedule.end_div must be >= start_div");
    if (cfg.data.scenes < 1) throw std::invalid_argument("config: data.scenes must be at least 1");
    if (cfg.data.humans_min < 0 || cfg.data.humans_max < cfg.data.humans_min)
        throw std::invalid_argument("config: need 0 <= humans_min <= humans_max");
    if (cfg.data.clutter < 0.0) throw std::invalid_argument("config: clutter must be non-negative");
    if (cfg.eval.score_threshold < 0.0 || cfg.eval.score_threshold > 1.0)
        throw std::invalid_argument("config: eval.score_threshold must lie in [0, 1]");
    if (cfg.eval.max_detections < 1)
        throw std::invalid_argument("config: eval.max_detections must be at least 1");
    if (cfg.eval.match_radius <= 0.0)
        throw std::invalid_argument("config: eval.match_radius must be positive");
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    expect_keys(j, "top level",
                {"data", "grid", "network", "augment", "loss", "optimizer", "schedule",
                 "eval", "steps", "batch_size", "seed", "out"});

    RunConfig cfg;
    if (auto it = j.find("data"); it != j.end()) parse_data(*it, cfg.data);
    if (auto it = j.find("grid"); it != j.end()) parse_grid(*it, cfg.grid);
    if (auto it = j.find("network"); it != j.end()) parse_network(*it, cfg.network);
    if (auto it = j.find("augment"); it != j.end()) parse_augment(*it, cfg.augment);
    if (auto it = j.find("loss"); it != j.end()) parse_loss(*it, cfg.loss);
    if (auto it = j.find("optimizer"); it != j.end()) parse_optimizer(*it, cfg.optimizer);
    if (auto it = j.find("schedule"); it != j.end()) {
        expect_keys(*it, "schedule", {"start_div", "end_div"});
        read_if(*it, "start_div", cfg.schedule.start_div);
        read_if(*it, "end_div", cfg.schedule.end_div);
    }
    if (auto it = j.find("eval"); it != j.end()) {
        expect_keys(*it, "eval", {"score_threshold", "max_detections", "match_radius"});
        read_if(*it, "score_threshold", cfg.eval.score_threshold);
        read_if(*it, "max_detections", cfg.eval.max_detections);
        read_if(*it, "match_radius", cfg.eval.match_radius);
    }
    read_if(j, "steps", cfg.steps);
    read_if(j, "batch_size", cfg.batch_size);
    read_if(j, "seed", cfg.seed);
    read_if(j, "out", cfg.out);

    cfg.network.grid_shape = {cfg.grid.cells(0), cfg.grid.cells(1), cfg.grid.cells(2)};
    validate_run_config(cfg);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string dump_run_config(const RunConfig& cfg) {
    json j;
    j["data"] = {{"dir", cfg.data.dir},
                 {"scenes", cfg.data.scenes},
                 {"humans_min", cfg.data.humans_min},
                 {"humans_max", cfg.data.humans_max},
                 {"clutter", cfg.data.clutter},
                 {"scene",
                  {{"extent", cfg.data.scene.extent},
                   {"ground_z", cfg.data.scene.ground_z},
                   {"ground_points", cfg.data.scene.ground_points},
                   {"placement_retries", cfg.data.scene.placement_retries},
                   {"points_per_human", cfg.data.scene.points_per_human},
                   {"capsule_radius", cfg.data.scene.capsule_radius},
                   {"full_density_range", cfg.data.scene.full_density_range},
                   {"min_points_per_human", cfg.data.scene.min_points_per_human}}}};
    j["grid"] = {{"range_min", cfg.grid.range_min},
                 {"range_max", cfg.grid.range_max},
                 {"voxel_size", cfg.grid.voxel_size}};
    j["network"] = {{"channels", cfg.network.channels},
                    {"input_channels", cfg.network.input_channels},
                    {"bev_channels", cfg.network.bev_channels},
                    {"keypoints", cfg.network.keypoints},
                    {"head_hidden", cfg.network.head_hidden},
                    {"ssk_blocks", cfg.network.ssk_blocks},
                    {"attention_blocks", cfg.network.attention_blocks},
                    {"attention_heads", cfg.network.attention_heads},
                    {"box_size", cfg.network.box_size},
                    {"ssk_kernels", cfg.network.ssk_kernels},
                    {"iou_score_weight", cfg.network.iou_score_weight},
                    {"direct3d_heads", cfg.network.direct3d_heads}};
    j["augment"] = {{"flip_x_prob", cfg.augment.flip_x_prob},
                    {"flip_y_prob", cfg.augment.flip_y_prob},
                    {"global_scale", cfg.augment.global_scale},
                    {"global_rotation", cfg.augment.global_rotation},
                    {"local_scale", cfg.augment.local_scale},
                    {"local_rotation", cfg.augment.local_rotation},
                    {"frustum_intensity", cfg.augment.frustum_intensity},
                    {"noise_sigma", cfg.augment.noise_sigma},
                    {"gt_sampling", cfg.augment.gt_sampling}};
    j["loss"] = {{"heatmap", cfg.loss.heatmap},
                 {"regression", cfg.loss.regression},
                 {"visibility", cfg.loss.visibility},
                 {"iou", cfg.loss.iou},
                 {"skeleton", cfg.loss.skeleton},
                 {"focal_alpha", cfg.loss.focal_alpha},
                 {"focal_beta", cfg.loss.focal_beta},
                 {"huber_delta", cfg.loss.huber_delta}};
    j["optimizer"] = {{"lr", cfg.optimizer.lr},
                      {"weight_decay", cfg.optimizer.weight_decay},
                      {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps}};
    j["schedule"] = {{"start_div", cfg.schedule.start_div}, {"end_div", cfg.schedule.end_div}};
    j["eval"] = {{"score_threshold", cfg.eval.score_threshold},
                 {"max_detections", cfg.eval.max_detections},
                 {"match_radius", cfg.eval.match_radius}};
    j["steps"] = cfg.steps;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["out"] = cfg.out;
    return j.dump(2) + "\n";
}

}  // namespace vkp
