#pragma once

// SPEQ tensor container (all integers and floats little-endian):
//
//   "SPEQ1"                        5 bytes magic
//   flags                          u8, bits 1..0 = QuantFormat, rest zero
//   dims count, dims[]             u32, u32 x count (count = 2: K, N)
//   group_size                     u32
//   tensor_scale                   f32
//   group scales                   f32 x N * ceil(K / group_size)
//   wq stream                      ceil(K*N / 2) bytes, low nibble first
//   wr stream                      ceil(3*K*N / 2) bytes (e3m0-remap only)
//   crc32                          u32 over every byte after the magic
//
// Padding bits must be zero, so a valid file has exactly one encoding and
// re-serialization is byte-identical.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "speq/errors.hpp"
#include "speq/quantizer.hpp"

namespace speq::io {

inline constexpr std::string_view kTensorMagic = "SPEQ1";

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void text(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    std::vector<std::uint8_t>& data() noexcept { return out_; }
    std::vector<std::uint8_t> take() noexcept { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

// Bounds-checked reader; running off the end raises TruncatedError.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8() { return bytes(1)[0]; }
    std::uint32_t u32() {
        auto b = bytes(4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        return lo | (static_cast<std::uint64_t>(u32()) << 32);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > in_.size() - pos_) {
            throw TruncatedError("unexpected end of data: need " + std::to_string(n) + " bytes at offset " +
                                 std::to_string(pos_) + ", have " + std::to_string(in_.size() - pos_));
        }
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

inline std::vector<std::uint8_t> serialize(const PackedTensor& p) {
    ByteWriter w;
    w.text(kTensorMagic);
    w.u8(static_cast<std::uint8_t>(p.format()));
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(p.rows()));
    w.u32(static_cast<std::uint32_t>(p.cols()));
    w.u32(static_cast<std::uint32_t>(p.group_size()));
    w.f32(p.tensor_scale());
    for (float s : p.group_scales()) w.f32(s);
    w.bytes(p.wq_stream());
    w.bytes(p.wr_stream());
    const auto payload = std::span<const std::uint8_t>(w.data()).subspan(kTensorMagic.size());
    w.u32(crc32(payload));
    return w.take();
}

namespace detail {

struct TensorHeader {
    QuantFormat format;
    std::size_t rows, cols, group_size, groups;
};

inline TensorHeader read_tensor_header(ByteReader& r) {
    const std::uint8_t flags = r.u8();
    if (flags > 3) throw MalformedFileError("unknown flags byte " + std::to_string(flags));
    const std::uint32_t ndims = r.u32();
    if (ndims != 2) throw MalformedFileError("expected 2 dims, found " + std::to_string(ndims));
    TensorHeader h{static_cast<QuantFormat>(flags), r.u32(), r.u32(), r.u32(), 0};
    if (h.rows == 0 || h.cols == 0 || h.group_size == 0) throw MalformedFileError("zero dimension or group size");
    h.groups = (h.rows + h.group_size - 1) / h.group_size;
    return h;
}

inline std::size_t expected_size(const TensorHeader& h) {
    const std::size_t n = h.rows * h.cols;
    const std::size_t wr = h.format == QuantFormat::E3M0Remap ? twelve_bit_stream_bytes(n) : 0;
    // magic + flags + ndims + 2 dims + group size + tensor scale + scales + streams + crc
    return kTensorMagic.size() + 1 + 4 + 8 + 4 + 4 + 4 * h.cols * h.groups + nibble_stream_bytes(n) + wr + 4;
}

inline void check_padding(const TensorHeader& h, std::span<const std::uint8_t> wq, std::span<const std::uint8_t> wr) {
    const std::size_t n = h.rows * h.cols;
    if ((n & 1u) && (wq.back() & 0xF0u)) throw MalformedFileError("nonzero padding in wq stream");
    if ((n & 1u) && !wr.empty() && (wr.back() & 0xF0u)) throw MalformedFileError("nonzero padding in wr stream");
}

}  // namespace detail

inline PackedTensor deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kTensorMagic.size() ||
        std::memcmp(bytes.data(), kTensorMagic.data(), kTensorMagic.size()) != 0) {
        throw BadMagicError("not a SPEQ tensor container");
    }
    const auto body = bytes.subspan(kTensorMagic.size());
    bool crc_ok = false;
    if (body.size() >= 4) {
        const auto payload = body.first(body.size() - 4);
        ByteReader tail(body.last(4));
        crc_ok = crc32(payload) == tail.u32();
    }
    if (!crc_ok) {
        // Tell a short file from a corrupted one using the header.
        ByteReader r(body);
        const detail::TensorHeader h = detail::read_tensor_header(r);
        if (bytes.size() < detail::expected_size(h)) throw TruncatedError("container shorter than its header declares");
        throw ChecksumError("container checksum mismatch");
    }

    ByteReader r(body.first(body.size() - 4));
    const detail::TensorHeader h = detail::read_tensor_header(r);
    if (bytes.size() != detail::expected_size(h)) {
        if (bytes.size() < detail::expected_size(h)) throw TruncatedError("container shorter than its header declares");
        throw MalformedFileError("trailing bytes after container payload");
    }
    const float tensor_scale = r.f32();
    std::vector<float> scales(h.cols * h.groups);
    for (float& s : scales) s = r.f32();
    const std::size_t n = h.rows * h.cols;
    const auto wq = r.bytes(nibble_stream_bytes(n));
    const auto wr = r.bytes(h.format == QuantFormat::E3M0Remap ? twelve_bit_stream_bytes(n) : 0);
    detail::check_padding(h, wq, wr);
    try {
        return PackedTensor(h.rows, h.cols, h.group_size, h.format, tensor_scale, std::move(scales),
                            {wq.begin(), wq.end()}, {wr.begin(), wr.end()});
    } catch (const IoError&) {
        throw;
    } catch (const Error& e) {
        throw MalformedFileError(std::string("invalid tensor contents: ") + e.what());
    }
}

inline void write_container(const std::filesystem::path& path, const PackedTensor& p) { write_file(path, serialize(p)); }

inline PackedTensor read_container(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace speq::io
