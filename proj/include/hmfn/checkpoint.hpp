#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "hmfn/tensor.hpp"

namespace hmfn {

// Versioned container of named tensors.
//
// Layout (all integers little-endian):
//   magic "HMFN" | version u32 | tensor count u32
//   per entry: name length u32 | name bytes | rank u32 | dims u64 each |
//              float32 payload
//
// The payload is float32 regardless of build precision; parameters are kept
// at float32-representable values during training so a save/load cycle is
// exact (see adam_step).
namespace checkpoint {

constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated file " + path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("checkpoint: truncated file " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is, const std::string& path) {
    const std::uint32_t bits = get_u32(is, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

// std::map keeps entries sorted by name, making saved files deterministic.
using TensorMap = std::map<std::string, Tensor>;

inline void save(const std::string& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open for write: " + path);
    os.write("HMFN", 4);
    detail::put_u32(os, kFormatVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) detail::put_u64(os, t.dim(d));
        for (std::size_t i = 0; i < t.size(); ++i) detail::put_f32(os, static_cast<float>(t(i)));
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline TensorMap load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "HMFN", 4) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::get_u32(is, path);
    if (version != kFormatVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    const std::uint32_t count = detail::get_u32(is, path);
    TensorMap out;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint32_t name_len = detail::get_u32(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint: truncated file " + path);
        const std::uint32_t rank = detail::get_u32(is, path);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64(is, path));
        Tensor t = Tensor::zeros(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t(i) = static_cast<Real>(detail::get_f32(is, path));
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace checkpoint
}  // namespace hmfn
