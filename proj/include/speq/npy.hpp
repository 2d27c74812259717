#pragma once

// Minimal NumPy .npy reader/writer for 1-D and 2-D little-endian arrays.
// Supported dtypes: <f2 (FP16), <f4, <f8 and <u2 (raw 16-bit patterns, used
// for BF16 tensors). 1-D arrays load as a single column.

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "speq/container.hpp"
#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/matrix.hpp"

namespace speq::io {

struct NpyArray {
    std::string descr;  // e.g. "<f2"
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> data;  // raw little-endian elements, row-major
};

namespace detail {

inline std::string header_value(const std::string& header, const std::string& key) {
    const auto k = header.find("'" + key + "'");
    if (k == std::string::npos) throw MalformedFileError("npy header lacks '" + key + "'");
    auto p = header.find(':', k);
    if (p == std::string::npos) throw MalformedFileError("npy header malformed");
    ++p;
    while (p < header.size() && header[p] == ' ') ++p;
    std::size_t e = p;
    if (header[p] == '(') {
        e = header.find(')', p);
        if (e == std::string::npos) throw MalformedFileError("npy shape malformed");
        return header.substr(p, e - p + 1);
    }
    while (e < header.size() && header[e] != ',' && header[e] != '}') ++e;
    return header.substr(p, e - p);
}

inline std::size_t dtype_size(const std::string& descr) {
    if (descr == "<f2" || descr == "<u2") return 2;
    if (descr == "<f4") return 4;
    if (descr == "<f8") return 8;
    throw MalformedFileError("unsupported npy dtype " + descr);
}

}  // namespace detail

inline NpyArray parse_npy(std::span<const std::uint8_t> bytes) {
    static constexpr char kMagic[] = "\x93NUMPY";
    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0) throw BadMagicError("not an .npy file");
    const unsigned major = bytes[6];
    std::size_t header_len = 0, offset = 0;
    if (major == 1) {
        header_len = bytes[8] | (bytes[9] << 8);
        offset = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12) throw TruncatedError("npy header truncated");
        header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::size_t>(bytes[11]) << 24);
        offset = 12;
    } else {
        throw MalformedFileError("unsupported npy version " + std::to_string(major));
    }
    if (bytes.size() < offset + header_len) throw TruncatedError("npy header truncated");
    const std::string header(reinterpret_cast<const char*>(bytes.data() + offset), header_len);

    NpyArray a;
    std::string descr = detail::header_value(header, "descr");
    if (descr.size() < 2) throw MalformedFileError("npy descr malformed");
    a.descr = descr.substr(1, descr.size() - 2);
    if (a.descr.size() == 3 && a.descr[0] == '|') a.descr[0] = '<';
    if (detail::header_value(header, "fortran_order") != "False") throw MalformedFileError("fortran-order npy not supported");

    std::string shape = detail::header_value(header, "shape");
    std::vector<std::size_t> dims;
    std::size_t i = 1;
    while (i < shape.size()) {
        while (i < shape.size() && (shape[i] == ' ' || shape[i] == ',')) ++i;
        if (i >= shape.size() || shape[i] == ')') break;
        std::size_t e = i;
        while (e < shape.size() && std::isdigit(static_cast<unsigned char>(shape[e]))) ++e;
        if (e == i) throw MalformedFileError("npy shape malformed");
        dims.push_back(std::stoull(shape.substr(i, e - i)));
        i = e;
    }
    if (dims.size() == 1) {
        a.rows = dims[0];
        a.cols = 1;
    } else if (dims.size() == 2) {
        a.rows = dims[0];
        a.cols = dims[1];
    } else {
        throw MalformedFileError("only 1-D and 2-D npy arrays are supported");
    }
    const std::size_t nbytes = a.rows * a.cols * detail::dtype_size(a.descr);
    const std::size_t data_off = offset + header_len;
    if (bytes.size() < data_off + nbytes) throw TruncatedError("npy data truncated");
    a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(data_off + nbytes));
    return a;
}

inline NpyArray read_npy(const std::filesystem::path& path) { return parse_npy(read_file(path)); }

inline std::vector<std::uint8_t> encode_npy(const std::string& descr, std::size_t rows, std::size_t cols,
                                            std::span<const std::uint8_t> data) {
    std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (" + std::to_string(rows) + ", " +
                         std::to_string(cols) + "), }";
    const std::size_t total = 10 + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header.push_back('\n');
    ByteWriter w;
    w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("\x93NUMPY"), 6));
    w.u8(1);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(header.size() & 0xFFu));
    w.u8(static_cast<std::uint8_t>(header.size() >> 8));
    w.text(header);
    w.bytes(data);
    return w.take();
}

inline std::vector<std::uint8_t> encode_npy(const Matrix<Fp16Bits>& m) {
    std::vector<std::uint8_t> raw;
    raw.reserve(m.size() * 2);
    for (Fp16Bits h : m.flat()) {
        raw.push_back(static_cast<std::uint8_t>(h.bits & 0xFFu));
        raw.push_back(static_cast<std::uint8_t>(h.bits >> 8));
    }
    return encode_npy("<f2", m.rows(), m.cols(), raw);
}

inline std::vector<std::uint8_t> encode_npy(const Matrix<float>& m) {
    std::vector<std::uint8_t> raw;
    raw.reserve(m.size() * 4);
    for (float f : m.flat()) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        for (int i = 0; i < 4; ++i) raw.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    return encode_npy("<f4", m.rows(), m.cols(), raw);
}

inline std::vector<std::uint16_t> raw_u16(const NpyArray& a) {
    std::vector<std::uint16_t> v(a.rows * a.cols);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint16_t>(a.data[2 * i] | (a.data[2 * i + 1] << 8));
    return v;
}

// Converts to FP16 bits: <f2 verbatim, wider floats rounded to nearest even.
inline Matrix<Fp16Bits> to_fp16_matrix(const NpyArray& a) {
    Matrix<Fp16Bits> m(a.rows, a.cols);
    auto out = m.flat();
    if (a.descr == "<f2" || a.descr == "<u2") {
        const auto raw = raw_u16(a);
        for (std::size_t i = 0; i < raw.size(); ++i) out[i] = Fp16Bits{raw[i]};
    } else if (a.descr == "<f4") {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(a.data[4 * i + b]) << (8 * b);
            out[i] = fp16_from_float(std::bit_cast<float>(u));
        }
    } else if (a.descr == "<f8") {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint64_t u = 0;
            for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(a.data[8 * i + b]) << (8 * b);
            out[i] = fp16_from_double(std::bit_cast<double>(u));
        }
    } else {
        throw MalformedFileError("unsupported npy dtype " + a.descr);
    }
    return m;
}

inline Matrix<Bf16Bits> to_bf16_matrix(const NpyArray& a) {
    if (a.descr != "<u2") throw MalformedFileError("BF16 tensors must be stored as raw <u2 bit patterns");
    Matrix<Bf16Bits> m(a.rows, a.cols);
    const auto raw = raw_u16(a);
    for (std::size_t i = 0; i < raw.size(); ++i) m.flat()[i] = Bf16Bits{raw[i]};
    return m;
}

}  // namespace speq::io
