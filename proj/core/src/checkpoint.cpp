#include "voxelkp/checkpoint.hpp"

#include "voxelkp/binary_io.hpp"

namespace vkp {

static const char kMagic[4] = {'V', 'K', 'P', 'W'};
static constexpr uint32_t kVersion = 1;

void save_checkpoint(const std::string& path, std::vector<NamedTensor> tensors) {
    std::sort(tensors.begin(), tensors.end(),
              [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    std::ofstream os = open_out(path, "checkpoint");
    write_magic(os, kMagic);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const NamedTensor& t : tensors) {
        size_t elems = 1;
        for (uint32_t d : t.dims) elems *= d;
        if (elems != t.data.size()) throw std::invalid_argument("checkpoint: dims do not match payload for " + t.name);
        write_u32(os, static_cast<uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_u32(os, static_cast<uint32_t>(t.dims.size()));
        for (uint32_t d : t.dims) write_u32(os, d);
        write_f32_block(os, t.data.data(), t.data.size());
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream is = open_in(path, "checkpoint");
    expect_magic(is, kMagic, "checkpoint");
    uint32_t version = read_u32(is, "checkpoint");
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version");
    uint32_t count = read_u32(is, "checkpoint");
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        uint32_t name_len = read_u32(is, "checkpoint");
        if (name_len > 4096) throw std::runtime_error("checkpoint: implausible tensor name length");
        t.name.resize(name_len);
        if (!is.read(t.name.data(), name_len)) throw std::runtime_error("checkpoint: truncated file");
        uint32_t rank = read_u32(is, "checkpoint");
        if (rank > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
        size_t elems = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            t.dims.push_back(read_u32(is, "checkpoint"));
            elems *= t.dims.back();
        }
        if (elems > (1u << 28)) throw std::runtime_error("checkpoint: implausible tensor size");
        t.data.resize(elems);
        read_f32_block(is, t.data.data(), elems, "checkpoint");
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace vkp
