#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vkp {

// Little-endian stream helpers shared by the on-disk formats. The sandbox and
// every supported target are little-endian; a startup check in the readers
// would cost more than it protects, so writes are plain memcpy of host order.

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline void write_f32_block(std::ostream& os, const float* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
}

inline uint32_t read_u32(std::istream& is, const char* what) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

inline float read_f32(std::istream& is, const char* what) {
    float v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

inline void read_f32_block(std::istream& is, float* p, size_t n, const char* what) {
    if (!is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4)))
        throw std::runtime_error(std::string(what) + ": truncated file");
}

inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline void write_f64_block(std::ostream& os, const double* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 8));
}

inline double read_f64(std::istream& is, const char* what) {
    double v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

inline void read_f64_block(std::istream& is, double* p, size_t n, const char* what) {
    if (!is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 8)))
        throw std::runtime_error(std::string(what) + ": truncated file");
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const char* what) {
    char buf[4] = {0, 0, 0, 0};
    if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
        throw std::runtime_error(std::string(what) + ": bad magic");
}

inline std::ofstream open_out(const std::string& path, const char* what) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error(std::string(what) + ": cannot open " + path + " for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path, const char* what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(std::string(what) + ": cannot open " + path);
    return is;
}

}  // namespace vkp
