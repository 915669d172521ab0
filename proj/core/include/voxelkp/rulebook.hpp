#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "voxelkp/sparse_tensor.hpp"

namespace vkp {

// Gather plan for one convolution: per kernel offset, the (input_row,
// output_row) pairs it connects. finalize() derives two CSR views used by the
// kernels; within one output (or input) row, entries keep ascending kernel-
// offset order, which pins the floating-point accumulation order.
struct Rulebook {
    int num_offsets = 0;
    int in_rows = 0;
    int out_rows = 0;
    std::vector<std::vector<std::pair<int32_t, int32_t>>> pairs;  // per offset

    std::vector<int32_t> gather_start;                     // out_rows + 1
    std::vector<std::pair<int32_t, int32_t>> gather;       // (offset, in_row)
    std::vector<int32_t> scatter_start;                    // in_rows + 1
    std::vector<std::pair<int32_t, int32_t>> scatter;      // (offset, out_row)

    size_t pair_count() const {
        size_t n = 0;
        for (const auto& v : pairs) n += v.size();
        return n;
    }

    void finalize() {
        gather_start.assign(out_rows + 1, 0);
        scatter_start.assign(in_rows + 1, 0);
        for (const auto& v : pairs) {
            for (const auto& [in, out] : v) {
                if (in < 0 || in >= in_rows || out < 0 || out >= out_rows)
                    throw std::out_of_range("Rulebook: pair references a missing row");
                gather_start[out + 1]++;
                scatter_start[in + 1]++;
            }
        }
        for (int i = 0; i < out_rows; ++i) gather_start[i + 1] += gather_start[i];
        for (int i = 0; i < in_rows; ++i) scatter_start[i + 1] += scatter_start[i];
        gather.resize(pair_count());
        scatter.resize(pair_count());
        std::vector<int32_t> gfill(gather_start.begin(), gather_start.end() - 1);
        std::vector<int32_t> sfill(scatter_start.begin(), scatter_start.end() - 1);
        for (int k = 0; k < num_offsets; ++k) {
            for (const auto& [in, out] : pairs[k]) {
                gather[gfill[out]++] = {k, in};
                scatter[sfill[in]++] = {k, out};
            }
        }
    }
};

namespace detail {

template <size_t D>
inline int offset_count(const std::array<int, D>& ksize) {
    int n = 1;
    for (int k : ksize) {
        if (k < 1 || k % 2 == 0) throw std::invalid_argument("rulebook: kernel dims must be odd and positive");
        n *= k;
    }
    return n;
}

}  // namespace detail

// Kernel offsets enumerate x-major: index = ((dx+hx)*K_y + (dy+hy))*K_z + (dz+hz).
// Dense oracles in the tests mirror this layout.
inline Rulebook build_subm_rulebook3d(const std::vector<Coord4>& coords, const VoxelIndex& index,
                                      const std::array<int, 3>& spatial_shape,
                                      const std::array<int, 3>& ksize) {
    Rulebook rb;
    rb.num_offsets = detail::offset_count(ksize);
    rb.in_rows = rb.out_rows = static_cast<int>(coords.size());
    rb.pairs.assign(rb.num_offsets, {});
    const int hx = ksize[0] / 2, hy = ksize[1] / 2, hz = ksize[2] / 2;
    for (int32_t out = 0; out < static_cast<int32_t>(coords.size()); ++out) {
        const Coord4& c = coords[out];
        for (int dx = -hx; dx <= hx; ++dx) {
            int32_t x = c[1] + dx;
            if (x < 0 || x >= spatial_shape[0]) continue;
            for (int dy = -hy; dy <= hy; ++dy) {
                int32_t y = c[2] + dy;
                if (y < 0 || y >= spatial_shape[1]) continue;
                for (int dz = -hz; dz <= hz; ++dz) {
                    int32_t z = c[3] + dz;
                    if (z < 0 || z >= spatial_shape[2]) continue;
                    int32_t in = index.find(Coord4{c[0], x, y, z});
                    if (in < 0) continue;
                    int k = ((dx + hx) * ksize[1] + (dy + hy)) * ksize[2] + (dz + hz);
                    rb.pairs[k].emplace_back(in, out);
                }
            }
        }
    }
    rb.finalize();
    return rb;
}

struct StridedPlan {
    std::vector<Coord4> out_coords;       // canonical order
    std::array<int, 3> out_shape{0, 0, 0};
    Rulebook rb;
};

// Output sites are the stride-buckets of active inputs: q = floor(c / s).
// Each output gathers inputs at q*s + offset (offsets centered on the bucket
// origin), so every output has at least its own bucket member in footprint.
inline StridedPlan build_strided_rulebook3d(const std::vector<Coord4>& coords, const VoxelIndex& index,
                                            const std::array<int, 3>& spatial_shape,
                                            const std::array<int, 3>& ksize,
                                            const std::array<int, 3>& stride) {
    for (int s : stride)
        if (s < 1) throw std::invalid_argument("strided conv: stride components must be >= 1");
    StridedPlan plan;
    for (int a = 0; a < 3; ++a)
        plan.out_shape[a] = (spatial_shape[a] + stride[a] - 1) / stride[a];

    plan.out_coords.reserve(coords.size());
    for (const Coord4& c : coords)
        plan.out_coords.push_back(Coord4{c[0], c[1] / stride[0], c[2] / stride[1], c[3] / stride[2]});
    std::sort(plan.out_coords.begin(), plan.out_coords.end(),
              [](const Coord4& a, const Coord4& b) { return coord_less(a, b); });
    plan.out_coords.erase(std::unique(plan.out_coords.begin(), plan.out_coords.end()), plan.out_coords.end());

    Rulebook& rb = plan.rb;
    rb.num_offsets = detail::offset_count(ksize);
    rb.in_rows = static_cast<int>(coords.size());
    rb.out_rows = static_cast<int>(plan.out_coords.size());
    rb.pairs.assign(rb.num_offsets, {});
    const int hx = ksize[0] / 2, hy = ksize[1] / 2, hz = ksize[2] / 2;
    for (int32_t out = 0; out < rb.out_rows; ++out) {
        const Coord4& q = plan.out_coords[out];
        for (int dx = -hx; dx <= hx; ++dx) {
            int32_t x = q[1] * stride[0] + dx;
            if (x < 0 || x >= spatial_shape[0]) continue;
            for (int dy = -hy; dy <= hy; ++dy) {
                int32_t y = q[2] * stride[1] + dy;
                if (y < 0 || y >= spatial_shape[1]) continue;
                for (int dz = -hz; dz <= hz; ++dz) {
                    int32_t z = q[3] * stride[2] + dz;
                    if (z < 0 || z >= spatial_shape[2]) continue;
                    int32_t in = index.find(Coord4{q[0], x, y, z});
                    if (in < 0) continue;
                    int k = ((dx + hx) * ksize[1] + (dy + hy)) * ksize[2] + (dz + hz);
                    rb.pairs[k].emplace_back(in, out);
                }
            }
        }
    }
    rb.finalize();
    return plan;
}

inline Rulebook build_subm_rulebook2d(const std::vector<Coord3>& coords, const VoxelIndex& index,
                                      const std::array<int, 2>& spatial_shape,
                                      const std::array<int, 2>& ksize) {
    Rulebook rb;
    rb.num_offsets = detail::offset_count(ksize);
    rb.in_rows = rb.out_rows = static_cast<int>(coords.size());
    rb.pairs.assign(rb.num_offsets, {});
    const int hx = ksize[0] / 2, hy = ksize[1] / 2;
    for (int32_t out = 0; out < static_cast<int32_t>(coords.size()); ++out) {
        const Coord3& c = coords[out];
        for (int dx = -hx; dx <= hx; ++dx) {
            int32_t x = c[1] + dx;
            if (x < 0 || x >= spatial_shape[0]) continue;
            for (int dy = -hy; dy <= hy; ++dy) {
                int32_t y = c[2] + dy;
                if (y < 0 || y >= spatial_shape[1]) continue;
                int32_t in = index.find(Coord3{c[0], x, y});
                if (in < 0) continue;
                int k = (dx + hx) * ksize[1] + (dy + hy);
                rb.pairs[k].emplace_back(in, out);
            }
        }
    }
    rb.finalize();
    return rb;
}

struct ColumnPlan {
    std::vector<Coord3> out_coords;  // canonical 2D order
    Rulebook rb;                     // one offset per z level
};

// Column gather for height encoding: every active voxel feeds the output cell
// at its (batch, x, y), with the kernel offset indexed by its z level.
inline ColumnPlan build_column_rulebook(const std::vector<Coord4>& coords, int z_cells) {
    if (z_cells < 1) throw std::invalid_argument("column rulebook: z_cells must be positive");
    ColumnPlan plan;
    plan.out_coords.reserve(coords.size());
    for (const Coord4& c : coords) plan.out_coords.push_back(Coord3{c[0], c[1], c[2]});
    std::sort(plan.out_coords.begin(), plan.out_coords.end(),
              [](const Coord3& a, const Coord3& b) { return coord_less(a, b); });
    plan.out_coords.erase(std::unique(plan.out_coords.begin(), plan.out_coords.end()), plan.out_coords.end());
    VoxelIndex out_index(plan.out_coords);

    Rulebook& rb = plan.rb;
    rb.num_offsets = z_cells;
    rb.in_rows = static_cast<int>(coords.size());
    rb.out_rows = static_cast<int>(plan.out_coords.size());
    rb.pairs.assign(rb.num_offsets, {});
    for (int32_t in = 0; in < rb.in_rows; ++in) {
        const Coord4& c = coords[in];
        if (c[3] < 0 || c[3] >= z_cells) throw std::out_of_range("column rulebook: z out of range");
        int32_t out = out_index.find(Coord3{c[0], c[1], c[2]});
        rb.pairs[c[3]].emplace_back(in, out);
    }
    rb.finalize();
    return plan;
}

}  // namespace vkp
