#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "voxelkp/mat.hpp"

namespace vkp {

using Coord4 = std::array<int32_t, 4>;  // (batch, x, y, z)
using Coord3 = std::array<int32_t, 3>;  // (batch, x, y)

// Canonical row order: lexicographic by (batch, z, y, x) in 3D and
// (batch, y, x) in 2D. Every constructed tensor obeys it; downstream code
// (column grouping, per-sample pooling, rulebooks) relies on batch-major runs.
inline bool coord_less(const Coord4& a, const Coord4& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[3] != b[3]) return a[3] < b[3];
    if (a[2] != b[2]) return a[2] < b[2];
    return a[1] < b[1];
}

inline bool coord_less(const Coord3& a, const Coord3& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[2] != b[2]) return a[2] < b[2];
    return a[1] < b[1];
}

// Coordinates pack into one 64-bit key (16 bits per field), which bounds every
// axis and the batch count at 65536; construction validates this.
inline uint64_t pack_key(const Coord4& c) {
    return (static_cast<uint64_t>(static_cast<uint16_t>(c[0])) << 48) |
           (static_cast<uint64_t>(static_cast<uint16_t>(c[3])) << 32) |
           (static_cast<uint64_t>(static_cast<uint16_t>(c[2])) << 16) |
           static_cast<uint64_t>(static_cast<uint16_t>(c[1]));
}

inline uint64_t pack_key(const Coord3& c) {
    return (static_cast<uint64_t>(static_cast<uint16_t>(c[0])) << 32) |
           (static_cast<uint64_t>(static_cast<uint16_t>(c[2])) << 16) |
           static_cast<uint64_t>(static_cast<uint16_t>(c[1]));
}

template <typename T>
struct SparseTensor3D {
    Mat<T> features;               // V x C
    std::vector<Coord4> indices;   // V rows
    std::array<int, 3> spatial_shape{0, 0, 0};
    int batch_size = 0;
};

template <typename T>
struct SparseTensor2D {
    Mat<T> features;               // V x C
    std::vector<Coord3> indices;   // V rows
    std::array<int, 2> spatial_shape{0, 0};
    int batch_size = 0;
};

namespace detail {

inline void check_axis_limit(int extent, const char* what) {
    if (extent <= 0) throw std::invalid_argument(std::string(what) + ": extent must be positive");
    if (extent > 65536) throw std::invalid_argument(std::string(what) + ": extent exceeds 65536");
}

template <typename Coord, size_t D>
void check_rows(const std::vector<Coord>& idx, const std::array<int, D>& shape, int batch_size) {
    for (const Coord& c : idx) {
        if (c[0] < 0 || c[0] >= batch_size) throw std::out_of_range("sparse tensor: batch id out of range");
        for (size_t a = 0; a < D; ++a) {
            if (c[a + 1] < 0 || c[a + 1] >= shape[a])
                throw std::out_of_range("sparse tensor: coordinate out of bounds");
        }
    }
    for (size_t i = 1; i < idx.size(); ++i) {
        if (!coord_less(idx[i - 1], idx[i]))
            throw std::invalid_argument("sparse tensor: rows not unique in canonical order");
    }
}

}  // namespace detail

// Sorts rows into canonical order (features follow their coordinates) and
// rejects duplicates. Invariance contract: any op downstream produces the same
// result for any input row permutation once this has run.
template <typename TensorT>
void canonical_sort(TensorT& t) {
    const int v = static_cast<int>(t.indices.size());
    if (t.features.rows != v) throw std::invalid_argument("canonical_sort: feature/index row mismatch");
    std::vector<int> order(v);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return coord_less(t.indices[a], t.indices[b]); });
    Mat<typename std::remove_reference_t<decltype(t.features.data[0])>> feats(v, t.features.cols);
    std::vector<std::remove_reference_t<decltype(t.indices[0])>> idx(v);
    for (int r = 0; r < v; ++r) {
        idx[r] = t.indices[order[r]];
        for (int c = 0; c < t.features.cols; ++c) feats(r, c) = t.features(order[r], c);
    }
    t.indices = std::move(idx);
    t.features = std::move(feats);
    for (int r = 1; r < v; ++r) {
        if (!coord_less(t.indices[r - 1], t.indices[r]))
            throw std::invalid_argument("canonical_sort: duplicate coordinates");
    }
}

template <typename T>
void validate(const SparseTensor3D<T>& t) {
    if (t.batch_size <= 0) throw std::invalid_argument("sparse tensor: batch_size must be positive");
    for (int a = 0; a < 3; ++a) detail::check_axis_limit(t.spatial_shape[a], "spatial_shape");
    if (t.features.rows != static_cast<int>(t.indices.size()))
        throw std::invalid_argument("sparse tensor: feature/index row mismatch");
    detail::check_rows<Coord4, 3>(t.indices, t.spatial_shape, t.batch_size);
}

template <typename T>
void validate(const SparseTensor2D<T>& t) {
    if (t.batch_size <= 0) throw std::invalid_argument("sparse tensor: batch_size must be positive");
    for (int a = 0; a < 2; ++a) detail::check_axis_limit(t.spatial_shape[a], "spatial_shape");
    if (t.features.rows != static_cast<int>(t.indices.size()))
        throw std::invalid_argument("sparse tensor: feature/index row mismatch");
    detail::check_rows<Coord3, 2>(t.indices, t.spatial_shape, t.batch_size);
}

// Coordinate -> row lookup. Iteration order of the underlying map is never
// exposed; callers only probe.
class VoxelIndex {
  public:
    VoxelIndex() = default;

    explicit VoxelIndex(const std::vector<Coord4>& coords) {
        map_.reserve(coords.size() * 2);
        for (size_t i = 0; i < coords.size(); ++i) {
            auto [it, fresh] = map_.emplace(pack_key(coords[i]), static_cast<int32_t>(i));
            if (!fresh) throw std::invalid_argument("VoxelIndex: duplicate coordinate");
        }
    }

    explicit VoxelIndex(const std::vector<Coord3>& coords) {
        map_.reserve(coords.size() * 2);
        for (size_t i = 0; i < coords.size(); ++i) {
            auto [it, fresh] = map_.emplace(pack_key(coords[i]), static_cast<int32_t>(i));
            if (!fresh) throw std::invalid_argument("VoxelIndex: duplicate coordinate");
        }
    }

    int32_t find(const Coord4& c) const {
        auto it = map_.find(pack_key(c));
        return it == map_.end() ? -1 : it->second;
    }

    int32_t find(const Coord3& c) const {
        auto it = map_.find(pack_key(c));
        return it == map_.end() ? -1 : it->second;
    }

    size_t size() const { return map_.size(); }

  private:
    std::unordered_map<uint64_t, int32_t> map_;
};

}  // namespace vkp
