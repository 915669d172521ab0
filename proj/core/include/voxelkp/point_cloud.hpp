#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxelkp/mat.hpp"
#include "voxelkp/sparse_tensor.hpp"

namespace vkp {

// Rows are points, columns are per-point features; the first three columns are
// x, y, z in meters and later channels (intensity, elongation, ...) ride along.
template <typename T>
struct PointCloud {
    Mat<T> points;  // N x C_in, C_in >= 3

    int size() const { return points.rows; }
    int channels() const { return points.cols; }
};

struct VoxelGridSpec {
    std::array<double, 3> range_min{-75.2, -75.2, -2.0};
    std::array<double, 3> range_max{75.2, 75.2, 4.0};
    std::array<double, 3> voxel_size{0.1, 0.1, 0.1};

    // Cell count per axis; an epsilon absorbs float noise in near-integer
    // ratios so a 150.4 m span at 0.1 m yields exactly 1504.
    int cells(int axis) const {
        double span = range_max[axis] - range_min[axis];
        if (span <= 0.0) throw std::invalid_argument("VoxelGridSpec: empty range");
        if (voxel_size[axis] <= 0.0) throw std::invalid_argument("VoxelGridSpec: voxel size must be positive");
        double n = std::ceil(span / voxel_size[axis] - 1e-9);
        if (n < 1.0 || n > 65536.0) throw std::invalid_argument("VoxelGridSpec: cell count out of range");
        return static_cast<int>(n);
    }

    std::array<int, 3> shape() const { return {cells(0), cells(1), cells(2)}; }
};

// Mean-pools point features into voxels on a half-open grid: a point on the
// max boundary falls outside. Output rows are canonically sorted; per-voxel
// accumulation runs in input point order so results are reproducible bitwise.
template <typename T>
SparseTensor3D<T> voxelize(const std::vector<PointCloud<T>>& batch, const VoxelGridSpec& grid) {
    if (batch.empty()) throw std::invalid_argument("voxelize: empty batch");
    const int c_in = batch[0].channels();
    if (c_in < 3) throw std::invalid_argument("voxelize: point clouds need at least x, y, z channels");
    for (const auto& pc : batch)
        if (pc.channels() != c_in) throw std::invalid_argument("voxelize: mixed channel counts in batch");

    const std::array<int, 3> shape = grid.shape();
    std::unordered_map<uint64_t, int> slot;
    std::vector<Coord4> coords;
    std::vector<std::vector<double>> sums;
    std::vector<int> counts;

    for (size_t b = 0; b < batch.size(); ++b) {
        const Mat<T>& pts = batch[b].points;
        for (int i = 0; i < pts.rows; ++i) {
            Coord4 c{static_cast<int32_t>(b), 0, 0, 0};
            bool inside = true;
            for (int a = 0; a < 3; ++a) {
                double v = static_cast<double>(pts(i, a));
                if (v < grid.range_min[a]) { inside = false; break; }
                int32_t cell = static_cast<int32_t>(std::floor((v - grid.range_min[a]) / grid.voxel_size[a]));
                if (cell < 0 || cell >= shape[a]) { inside = false; break; }
                c[a + 1] = cell;
            }
            if (!inside) continue;
            auto [it, fresh] = slot.emplace(pack_key(c), static_cast<int>(coords.size()));
            if (fresh) {
                coords.push_back(c);
                sums.emplace_back(c_in, 0.0);
                counts.push_back(0);
            }
            std::vector<double>& acc = sums[it->second];
            for (int ch = 0; ch < c_in; ++ch) acc[ch] += static_cast<double>(pts(i, ch));
            counts[it->second] += 1;
        }
    }

    if (coords.empty()) throw std::runtime_error("voxelize: no active voxels");

    SparseTensor3D<T> out;
    out.spatial_shape = shape;
    out.batch_size = static_cast<int>(batch.size());
    out.indices = coords;
    out.features = Mat<T>(static_cast<int>(coords.size()), c_in);
    for (size_t r = 0; r < coords.size(); ++r)
        for (int ch = 0; ch < c_in; ++ch)
            out.features(static_cast<int>(r), ch) = static_cast<T>(sums[r][ch] / counts[r]);
    canonical_sort(out);
    validate(out);
    return out;
}

template <typename T>
SparseTensor3D<T> voxelize(const PointCloud<T>& points, const VoxelGridSpec& grid) {
    return voxelize(std::vector<PointCloud<T>>{points}, grid);
}

// Binary point-cloud file: magic "VKPC", u32 version = 1, u32 point count,
// u32 channel count, then count*channels little-endian f32 row-major.
void save_point_cloud(const std::string& path, const Mat<float>& points);
Mat<float> load_point_cloud(const std::string& path);

// CSV alternative: one point per line, channels comma-separated, no header.
void save_point_cloud_csv(const std::string& path, const Mat<float>& points);
Mat<float> load_point_cloud_csv(const std::string& path);

}  // namespace vkp
