#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "equad/errors.hpp"

namespace equad {

// Binary matrix container shared by representation banks, logits matrices and
// parameter checkpoints: magic "EQAD", u32 version, u32 rows, u32 cols
// (little-endian), then rows*cols float32 little-endian row-major.
inline constexpr std::uint32_t kBlobVersion = 1;

namespace blobdetail {

inline void put_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace blobdetail

inline void write_blob(const std::filesystem::path& path, std::uint32_t rows, std::uint32_t cols,
                       const std::vector<double>& data) {
    if (data.size() != static_cast<std::size_t>(rows) * cols)
        throw IoError("write_blob: data size does not match rows*cols");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("write_blob: cannot open " + path.string());
    os.write("EQAD", 4);
    blobdetail::put_u32(os, kBlobVersion);
    blobdetail::put_u32(os, rows);
    blobdetail::put_u32(os, cols);
    std::vector<float> f32(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) f32[i] = static_cast<float>(data[i]);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(f32.data()),
             static_cast<std::streamsize>(f32.size() * 4));
    if (!os) throw IoError("write_blob: write failed for " + path.string());
}

struct Blob {
    std::uint32_t rows = 0, cols = 0;
    std::vector<double> data;  // widened from float32
};

inline Blob read_blob(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_blob: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "EQAD", 4) != 0)
        throw IoError("read_blob: bad magic in " + path.string());
    const std::uint32_t version = blobdetail::get_u32(is);
    if (version != kBlobVersion)
        throw IoError("read_blob: unsupported version " + std::to_string(version) + " in " +
                      path.string());
    Blob b;
    b.rows = blobdetail::get_u32(is);
    b.cols = blobdetail::get_u32(is);
    std::vector<float> f32(static_cast<std::size_t>(b.rows) * b.cols);
    is.read(reinterpret_cast<char*>(f32.data()), static_cast<std::streamsize>(f32.size() * 4));
    if (!is) throw IoError("read_blob: truncated payload in " + path.string());
    b.data.assign(f32.begin(), f32.end());
    return b;
}

}  // namespace equad
