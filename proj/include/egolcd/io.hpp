#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"

namespace egolcd {

// Little-endian binary writer. All on-disk formats go through this so the
// byte layout is identical regardless of host endianness.
class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& out) : out_(out) {}

    void u32(uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        write(b, 4);
    }

    void u64(uint64_t v) {
        u32(static_cast<uint32_t>(v & 0xffffffffu));
        u32(static_cast<uint32_t>(v >> 32));
    }

    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }

    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }

    void bytes(const void* data, size_t n) { write(data, n); }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        write(s.data(), s.size());
    }

    size_t offset() const { return offset_; }

private:
    void write(const void* data, size_t n) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out_) throw IoError("write failed", offset_);
        offset_ += n;
    }

    std::ostream& out_;
    size_t offset_ = 0;
};

// Little-endian binary reader; throws IoError with the current byte offset on
// truncation so corrupt files are diagnosable.
class BinaryReader {
public:
    explicit BinaryReader(std::istream& in) : in_(in) {}

    uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }

    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }

    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    void bytes(void* data, size_t n) { read(data, n); }

    std::string str(size_t max_len = 1u << 20) {
        uint32_t n = u32();
        if (n > max_len) throw IoError("string length " + std::to_string(n) + " implausible", offset_);
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

    void expect_magic(const char* magic, size_t len, const std::string& kind) {
        std::vector<char> buf(len);
        size_t at = offset_;
        read(buf.data(), len);
        if (std::memcmp(buf.data(), magic, len) != 0)
            throw IoError("bad magic for " + kind + " file", at);
    }

    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

    size_t offset() const { return offset_; }

private:
    void read(void* data, size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n)
            throw IoError("unexpected end of file", offset_ + static_cast<size_t>(in_.gcount()));
        offset_ += n;
    }

    std::istream& in_;
    size_t offset_ = 0;
};

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    return out;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return in;
}

}  // namespace egolcd
