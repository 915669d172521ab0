#include "voxelkp/point_cloud.hpp"

#include <cstdio>
#include <sstream>

#include "voxelkp/binary_io.hpp"

namespace vkp {

static const char kMagic[4] = {'V', 'K', 'P', 'C'};
static constexpr uint32_t kVersion = 1;

void save_point_cloud(const std::string& path, const Mat<float>& points) {
    std::ofstream os = open_out(path, "point cloud");
    write_magic(os, kMagic);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(points.rows));
    write_u32(os, static_cast<uint32_t>(points.cols));
    write_f32_block(os, points.data.data(), points.size());
    if (!os) throw std::runtime_error("point cloud: write failed for " + path);
}

Mat<float> load_point_cloud(const std::string& path) {
    std::ifstream is = open_in(path, "point cloud");
    expect_magic(is, kMagic, "point cloud");
    uint32_t version = read_u32(is, "point cloud");
    if (version != kVersion) throw std::runtime_error("point cloud: unsupported version");
    uint32_t n = read_u32(is, "point cloud");
    uint32_t c = read_u32(is, "point cloud");
    if (c < 3 || c > 64) throw std::runtime_error("point cloud: implausible channel count");
    Mat<float> out(static_cast<int>(n), static_cast<int>(c));
    read_f32_block(is, out.data.data(), out.size(), "point cloud");
    return out;
}

void save_point_cloud_csv(const std::string& path, const Mat<float>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("point cloud csv: cannot open " + path + " for writing");
    char buf[64];
    for (int i = 0; i < points.rows; ++i) {
        for (int c = 0; c < points.cols; ++c) {
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(points(i, c)));
            os << buf << (c + 1 == points.cols ? "\n" : ",");
        }
    }
    if (!os) throw std::runtime_error("point cloud csv: write failed for " + path);
}

Mat<float> load_point_cloud_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("point cloud csv: cannot open " + path);
    std::vector<std::vector<float>> rows;
    std::string line;
    int cols = -1;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<float> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stof(cell));
        if (cols < 0) cols = static_cast<int>(row.size());
        if (static_cast<int>(row.size()) != cols)
            throw std::runtime_error("point cloud csv: ragged rows in " + path);
        rows.push_back(std::move(row));
    }
    if (cols < 3) throw std::runtime_error("point cloud csv: need at least x, y, z columns");
    Mat<float> out(static_cast<int>(rows.size()), cols);
    for (size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < cols; ++c) out(static_cast<int>(i), c) = rows[i][c];
    return out;
}

}  // namespace vkp
