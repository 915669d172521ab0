#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "voxelkp/tape.hpp"

namespace vkp {

struct NamedTensor {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

// Weight file: magic "VKPW", u32 version = 1, u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 payload.
// Tensors are written name-sorted so identical states give identical bytes.
void save_checkpoint(const std::string& path, std::vector<NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

template <typename T>
std::vector<NamedTensor> snapshot_params(const ParamStore<T>& store) {
    std::vector<NamedTensor> out;
    for (const Param<T>* p : store.all()) {
        NamedTensor t;
        t.name = p->name;
        t.dims = {static_cast<uint32_t>(p->value.rows), static_cast<uint32_t>(p->value.cols)};
        t.data.resize(p->value.size());
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(p->value.data[i]);
        out.push_back(std::move(t));
    }
    return out;
}

template <typename T>
void restore_params(ParamStore<T>& store, const std::vector<NamedTensor>& tensors) {
    size_t matched = 0;
    for (const NamedTensor& t : tensors) {
        Param<T>* p = store.find(t.name);
        if (!p) continue;
        if (t.dims.size() != 2 || static_cast<int>(t.dims[0]) != p->value.rows ||
            static_cast<int>(t.dims[1]) != p->value.cols)
            throw std::runtime_error("checkpoint: shape mismatch for tensor " + t.name);
        for (size_t i = 0; i < t.data.size(); ++i) p->value.data[i] = static_cast<T>(t.data[i]);
        ++matched;
    }
    if (matched != store.size())
        throw std::runtime_error("checkpoint: file does not cover all parameters (" +
                                 std::to_string(matched) + " of " + std::to_string(store.size()) + ")");
}

}  // namespace vkp
