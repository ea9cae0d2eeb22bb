#pragma once

#include <cstdio>
#include <fstream>
#include <iostream>

#include "voxdiff/tensor.hpp"

namespace voxdiff {

// "VDPT" tensor container: magic, u32 rank, u64 extents, raw IEEE-754 f64
// payload. Everything little-endian. Used by checkpoints and dataset tooling.

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("unexpected end of stream");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64_le(std::ostream& os, Scalar v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    write_le<uint64_t>(os, bits);
}

inline Scalar read_f64_le(std::istream& is) {
    uint64_t bits = read_le<uint64_t>(is);
    Scalar v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

inline void write_f32_le(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    write_le<uint32_t>(os, bits);
}

inline float read_f32_le(std::istream& is) {
    uint32_t bits = read_le<uint32_t>(is);
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("VDPT", 4);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d = 0; d < t.rank(); ++d)
        detail::write_le<uint64_t>(os, static_cast<uint64_t>(t.extent(d)));
    for (Scalar v : t.vec()) detail::write_f64_le(os, v);
    if (!os) throw IoError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VDPT", 4) != 0) throw IoError("bad tensor magic");
    uint32_t rank = detail::read_le<uint32_t>(is);
    if (rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i)
        shape[i] = static_cast<int64_t>(detail::read_le<uint64_t>(is));
    std::vector<Scalar> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = detail::read_f64_le(is);
    return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    return read_tensor(is);
}

}  // namespace voxdiff
