#pragma once

// Little-endian encode/decode helpers shared by the trace, lens and weight
// formats. Internal to the core library.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ia::detail {

static_assert(std::numeric_limits<float>::is_iec559, "f32 payloads require IEEE-754 floats");

class ByteWriter {
public:
    void bytes(const void *p, std::size_t n) {
        const auto *c = static_cast<const char *>(p);
        buf_.append(c, n);
    }
    void u16(std::uint16_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }

    void f32s(std::span<const float> v) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(v.data(), v.size() * sizeof(float));
        } else {
            for (float x : v) f32(x);
        }
    }
    void u32s(std::span<const std::uint32_t> v) {
        for (auto x : v) u32(x);
    }

    const std::string &buffer() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    template <typename T> void le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }

    std::string buf_;
};

// Reads exact byte counts; returns false on a short read so callers can
// attach record/layer context to the error.
class ByteReader {
public:
    explicit ByteReader(std::istream &in) : in_(in) {}

    bool bytes(void *p, std::size_t n) {
        in_.read(static_cast<char *>(p), static_cast<std::streamsize>(n));
        const auto got = static_cast<std::size_t>(in_.gcount());
        offset_ += got;
        return got == n;
    }
    bool u16(std::uint16_t &v) {
        unsigned char b[2];
        if (!bytes(b, 2)) return false;
        v = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
        return true;
    }
    bool u32(std::uint32_t &v) {
        unsigned char b[4];
        if (!bytes(b, 4)) return false;
        v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
            (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        return true;
    }
    // Grows the output in bounded chunks so a corrupted length field fails on
    // the short read instead of on a giant allocation.
    bool f32s(std::vector<float> &out, std::size_t n) {
        out.clear();
        while (out.size() < n) {
            const std::size_t start = out.size();
            const std::size_t take = std::min(kChunk, n - start);
            out.resize(start + take);
            if constexpr (std::endian::native == std::endian::little) {
                if (!bytes(out.data() + start, take * sizeof(float))) return false;
            } else {
                for (std::size_t i = start; i < start + take; ++i) {
                    std::uint32_t bits;
                    if (!u32(bits)) return false;
                    out[i] = std::bit_cast<float>(bits);
                }
            }
        }
        return true;
    }
    bool u32s(std::vector<std::uint32_t> &out, std::size_t n) {
        out.clear();
        while (out.size() < n) {
            std::uint32_t x;
            if (!u32(x)) return false;
            out.push_back(x);
        }
        return true;
    }

    std::size_t offset() const { return offset_; }

private:
    static constexpr std::size_t kChunk = 1 << 16;

    std::istream &in_;
    std::size_t offset_ = 0;
};

} // namespace ia::detail
