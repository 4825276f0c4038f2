#ifndef DIMR_IO_HPP
#define DIMR_IO_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dimr/tensor.hpp"

namespace dimr {

// Versioned binary tensor format:
//   magic "DIMRT", u8 version, u8 dtype (0 = f32, 1 = f64),
//   u32 rank, u64 extents..., little-endian IEEE-754 payload.
// All integers little-endian.

namespace io_detail {

template <typename U>
void write_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) buf[i] = (unsigned char)((uint64_t(v) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw IoError("tensor read: truncated stream");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= uint64_t(buf[i]) << (8 * i);
    return U(v);
}

inline void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_le<uint32_t>(os, bits);
}
inline void write_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_le<uint64_t>(os, bits);
}
inline float read_f32(std::istream& is) {
    uint32_t bits = read_le<uint32_t>(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}
inline double read_f64(std::istream& is) {
    uint64_t bits = read_le<uint64_t>(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

template <typename T>
constexpr uint8_t dtype_code() {
    return sizeof(T) == 4 ? 0 : 1;
}

} // namespace io_detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write("DIMRT", 5);
    io_detail::write_le<uint8_t>(os, 1);
    io_detail::write_le<uint8_t>(os, io_detail::dtype_code<T>());
    io_detail::write_le<uint32_t>(os, uint32_t(t.rank()));
    for (size_t e : t.shape) io_detail::write_le<uint64_t>(os, uint64_t(e));
    for (T v : t.data) {
        if constexpr (sizeof(T) == 4)
            io_detail::write_f32(os, float(v));
        else
            io_detail::write_f64(os, double(v));
    }
    if (!os) throw IoError("tensor write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "DIMRT", 5) != 0) throw IoError("tensor read: bad magic");
    uint8_t version = io_detail::read_le<uint8_t>(is);
    if (version != 1) throw IoError("tensor read: unsupported version " + std::to_string(version));
    uint8_t dtype = io_detail::read_le<uint8_t>(is);
    if (dtype > 1) throw IoError("tensor read: unknown dtype code " + std::to_string(dtype));
    uint32_t rank = io_detail::read_le<uint32_t>(is);
    if (rank > 8) throw IoError("tensor read: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = size_t(io_detail::read_le<uint64_t>(is));
    Tensor<T> t(shape);
    for (size_t i = 0; i < t.size(); ++i) {
        double v = dtype == 0 ? double(io_detail::read_f32(is)) : io_detail::read_f64(is);
        t.data[i] = T(v);
    }
    return t;
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tensor<T>(is);
}

// Named-tensor archive, the container behind checkpoints:
//   magic "DIMRC", u8 version, u32 manifest_len, manifest text,
//   u32 entry count, then per entry u16 name length, name, DIMRT blob.
template <typename T>
struct TensorArchive {
    std::string manifest; // flat key=value text, opaque to this layer
    std::vector<std::pair<std::string, Tensor<T>>> entries;

    void add(const std::string& name, Tensor<T> t) { entries.emplace_back(name, std::move(t)); }

    const Tensor<T>* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open for write: " + path);
        os.write("DIMRC", 5);
        io_detail::write_le<uint8_t>(os, 1);
        io_detail::write_le<uint32_t>(os, uint32_t(manifest.size()));
        os.write(manifest.data(), std::streamsize(manifest.size()));
        io_detail::write_le<uint32_t>(os, uint32_t(entries.size()));
        for (const auto& [name, t] : entries) {
            io_detail::write_le<uint16_t>(os, uint16_t(name.size()));
            os.write(name.data(), std::streamsize(name.size()));
            write_tensor(os, t);
        }
        if (!os) throw IoError("archive write failed: " + path);
    }

    static TensorArchive load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open: " + path);
        char magic[5];
        is.read(magic, 5);
        if (!is || std::memcmp(magic, "DIMRC", 5) != 0) throw IoError("archive read: bad magic in " + path);
        uint8_t version = io_detail::read_le<uint8_t>(is);
        if (version != 1) throw IoError("archive read: unsupported version");
        uint32_t mlen = io_detail::read_le<uint32_t>(is);
        TensorArchive a;
        a.manifest.resize(mlen);
        is.read(a.manifest.data(), mlen);
        uint32_t count = io_detail::read_le<uint32_t>(is);
        for (uint32_t i = 0; i < count; ++i) {
            uint16_t nlen = io_detail::read_le<uint16_t>(is);
            std::string name(nlen, '\0');
            is.read(name.data(), nlen);
            if (!is) throw IoError("archive read: truncated entry name");
            a.entries.emplace_back(std::move(name), read_tensor<T>(is));
        }
        return a;
    }
};

} // namespace dimr

#endif
