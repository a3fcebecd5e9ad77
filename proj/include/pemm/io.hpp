#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace pemm {

// Byte-level little-endian primitives, independent of host endianness so the
// on-disk formats are identical everywhere.

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline void write_f64_le(std::ostream& os, double v) {
    write_u64_le(os, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("truncated stream while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw FormatError("truncated stream while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64_le(std::istream& is) {
    return std::bit_cast<double>(read_u64_le(is));
}

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string got(magic.size(), '\0');
    if (!is.read(got.data(), static_cast<std::streamsize>(magic.size())))
        throw FormatError("truncated stream while reading magic bytes");
    if (got != magic)
        throw FormatError("bad magic bytes: expected \"" + std::string(magic) +
                          "\", found \"" + got + "\"");
}

inline void write_string(std::ostream& os, std::string_view s) {
    write_u32_le(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32_le(is);
    if (n > (1u << 20)) throw FormatError("implausible string length in stream");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n))
        throw FormatError("truncated stream while reading string");
    return s;
}

// ---------------------------------------------------------------------------
// Tensor container: "PEMT", u32 rank, rank x u32 dims, f64 values row-major.
// ---------------------------------------------------------------------------

inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_magic(os, "PEMT");
    write_u32_le(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape())
        write_u32_le(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) write_f64_le(os, v);
}

inline Tensor read_tensor(std::istream& is) {
    expect_magic(is, "PEMT");
    std::uint32_t rank = read_u32_le(is);
    if (rank == 0 || rank > 8)
        throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = read_u32_le(is);
        if (d == 0) throw FormatError("zero tensor dimension in stream");
        shape[i] = d;
        numel *= d;
        if (numel > (std::size_t{1} << 31))
            throw FormatError("implausible tensor size in stream");
    }
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = read_f64_le(is);
    return Tensor::from(std::move(shape), std::move(values));
}

/// Exact on-disk size of a serialized tensor, in bytes.
inline std::size_t tensor_file_size(const Shape& shape) {
    return 4 + 4 + 4 * shape.size() + 8 * shape_numel(shape);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit digests (config digests, dataset digests)
// ---------------------------------------------------------------------------

class Fnv1a64 {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    Fnv1a64 h;
    h.update(s);
    return h.digest();
}

inline std::string hex_u64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

/// FNV-1a over a whole file's bytes.
inline std::uint64_t file_digest(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    Fnv1a64 h;
    char buf[1 << 16];
    while (f.read(buf, sizeof buf) || f.gcount() > 0)
        h.update(buf, static_cast<std::size_t>(f.gcount()));
    return h.digest();
}

// ---------------------------------------------------------------------------
// Stream/file helpers
// ---------------------------------------------------------------------------

inline std::ofstream open_binary_out(const std::filesystem::path& p) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    return f;
}

inline std::ifstream open_binary_in(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + p.string());
    return f;
}

inline void write_text_file(const std::filesystem::path& p, std::string_view text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("write failed: " + p.string());
}

inline std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + p.string());
    std::string s((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
    return s;
}

} // namespace pemm
