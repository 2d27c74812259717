#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "speq/bsfp.hpp"
#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/matrix.hpp"

namespace speq {

// 4-bit draft encodings. Only E3M0Remap is bit-sharing: its 4-bit record is
// a slice of a lossless 16-bit word. The others are comparison baselines
// and store nothing beyond the 4-bit codes.
enum class QuantFormat : std::uint8_t {
    E3M0Remap = 0,
    E3M0Naive = 1,
    E2M1 = 2,
    E1M2 = 3,
};

inline std::string_view to_string(QuantFormat f) noexcept {
    switch (f) {
        case QuantFormat::E3M0Remap: return "e3m0-remap";
        case QuantFormat::E3M0Naive: return "e3m0";
        case QuantFormat::E2M1: return "e2m1";
        case QuantFormat::E1M2: return "e1m2";
    }
    return "?";
}

inline QuantFormat parse_quant_format(std::string_view s) {
    for (auto f : {QuantFormat::E3M0Remap, QuantFormat::E3M0Naive, QuantFormat::E2M1, QuantFormat::E1M2}) {
        if (to_string(f) == s) return f;
    }
    throw InvalidInputError("unknown format '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultGroupSize = 128;

// Unscaled value of a 4-bit code (sign in bit 3) for each format.
inline double code_value(QuantFormat f, unsigned code) noexcept {
    const unsigned mag = code & 0b111u;
    double v = 0.0;
    switch (f) {
        case QuantFormat::E3M0Remap: return bsfp::wq_value(code);
        case QuantFormat::E3M0Naive: v = std::ldexp(1.0, static_cast<int>(mag << 1) - 15); break;
        case QuantFormat::E2M1: {
            const unsigned e = mag >> 1, m = mag & 1u;
            v = e == 0 ? 0.5 * m : std::ldexp(1.0 + 0.5 * m, static_cast<int>(e) - 1);
            break;
        }
        case QuantFormat::E1M2: {
            const unsigned e = mag >> 2, m = mag & 3u;
            v = e == 0 ? 0.25 * m : 1.0 + 0.25 * m;
            break;
        }
    }
    return (code & 0b1000u) ? -v : v;
}

// Packed 4-bit records, two per byte, low nibble first.
inline std::size_t nibble_stream_bytes(std::size_t count) noexcept { return (count + 1) / 2; }
// Packed 12-bit records, two per three bytes, little-endian bit order.
inline std::size_t twelve_bit_stream_bytes(std::size_t count) noexcept { return (3 * count + 1) / 2; }

inline unsigned read_nibble(std::span<const std::uint8_t> s, std::size_t i) noexcept {
    const std::uint8_t b = s[i >> 1];
    return (i & 1u) ? (b >> 4) : (b & 0xFu);
}

inline void write_nibble(std::span<std::uint8_t> s, std::size_t i, unsigned v) noexcept {
    std::uint8_t& b = s[i >> 1];
    if (i & 1u) {
        b = static_cast<std::uint8_t>((b & 0x0Fu) | ((v & 0xFu) << 4));
    } else {
        b = static_cast<std::uint8_t>((b & 0xF0u) | (v & 0xFu));
    }
}

inline unsigned read_twelve(std::span<const std::uint8_t> s, std::size_t i) noexcept {
    const std::size_t base = (i >> 1) * 3;
    if ((i & 1u) == 0) return s[base] | ((s[base + 1] & 0x0Fu) << 8);
    return (s[base + 1] >> 4) | (static_cast<unsigned>(s[base + 2]) << 4);
}

inline void write_twelve(std::span<std::uint8_t> s, std::size_t i, unsigned v) noexcept {
    v &= 0xFFFu;
    const std::size_t base = (i >> 1) * 3;
    if ((i & 1u) == 0) {
        s[base] = static_cast<std::uint8_t>(v & 0xFFu);
        s[base + 1] = static_cast<std::uint8_t>((s[base + 1] & 0xF0u) | (v >> 8));
    } else {
        s[base + 1] = static_cast<std::uint8_t>((s[base + 1] & 0x0Fu) | ((v & 0xFu) << 4));
        s[base + 2] = static_cast<std::uint8_t>(v >> 4);
    }
}

// A quantized K x N weight matrix (K = reduction dimension). Element (k, n)
// lives at linear index n * K + k, so each output column's groups are
// contiguous. Group g of column n covers k in [g * group_size, ...) and
// its scale is group_scales()[n * groups_per_column() + g].
class PackedTensor {
public:
    PackedTensor() = default;

    // Validating constructor used by quantize_tensor and by file readers.
    PackedTensor(std::size_t rows, std::size_t cols, std::size_t group_size, QuantFormat format, float tensor_scale,
                 std::vector<float> group_scales, std::vector<std::uint8_t> wq_stream,
                 std::vector<std::uint8_t> wr_stream)
        : rows_(rows),
          cols_(cols),
          group_size_(group_size),
          format_(format),
          tensor_scale_(tensor_scale),
          group_scales_(std::move(group_scales)),
          wq_(std::move(wq_stream)),
          wr_(std::move(wr_stream)) {
        validate();
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return rows_ * cols_; }
    std::size_t group_size() const noexcept { return group_size_; }
    std::size_t groups_per_column() const noexcept { return group_size_ ? (rows_ + group_size_ - 1) / group_size_ : 0; }
    QuantFormat format() const noexcept { return format_; }
    bool bit_sharing() const noexcept { return format_ == QuantFormat::E3M0Remap; }
    float tensor_scale() const noexcept { return tensor_scale_; }

    std::span<const float> group_scales() const noexcept { return group_scales_; }
    std::span<const std::uint8_t> wq_stream() const noexcept { return wq_; }
    std::span<const std::uint8_t> wr_stream() const noexcept { return wr_; }

    std::size_t index(std::size_t k, std::size_t n) const noexcept { return n * rows_ + k; }
    unsigned wq(std::size_t k, std::size_t n) const noexcept { return read_nibble(wq_, index(k, n)); }
    unsigned wr(std::size_t k, std::size_t n) const noexcept { return read_twelve(wr_, index(k, n)); }
    float group_scale(std::size_t n, std::size_t g) const noexcept { return group_scales_[n * groups_per_column() + g]; }

    bsfp::BsfpWord word(std::size_t k, std::size_t n) const {
        if (!bit_sharing()) throw FormatMismatchError("format " + std::string(to_string(format_)) + " stores no remainder");
        return bsfp::BsfpWord::from_views(wq(k, n), wr(k, n));
    }

    // Bytes of weight payload excluding scales and metadata.
    std::size_t payload_bytes() const noexcept { return wq_.size() + wr_.size(); }
    std::size_t scale_bytes() const noexcept { return group_scales_.size() * sizeof(float); }

    friend bool operator==(const PackedTensor&, const PackedTensor&) = default;

private:
    void validate() const {
        if (rows_ == 0 || cols_ == 0) throw DimensionError("packed tensor dimensions must be positive");
        if (group_size_ == 0) throw DimensionError("group size must be positive");
        if (!std::isfinite(tensor_scale_) || tensor_scale_ <= 0.0f) throw InvalidInputError("tensor scale must be finite and positive");
        if (group_scales_.size() != cols_ * groups_per_column()) throw DimensionError("group scale count mismatch");
        for (float s : group_scales_) {
            if (!std::isfinite(s) || s < 0.0f) throw InvalidInputError("group scales must be finite and nonnegative");
        }
        if (wq_.size() != nibble_stream_bytes(size())) throw DimensionError("wq stream length mismatch");
        const std::size_t wr_expected = bit_sharing() ? twelve_bit_stream_bytes(size()) : 0;
        if (wr_.size() != wr_expected) throw DimensionError("wr stream length mismatch");
        if (bit_sharing()) {
            for (std::size_t i = 0; i < size(); ++i) {
                (void)bsfp::full_value(bsfp::BsfpWord::from_views(read_nibble(wq_, i), read_twelve(wr_, i)));
            }
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t group_size_ = kDefaultGroupSize;
    QuantFormat format_ = QuantFormat::E3M0Remap;
    float tensor_scale_ = 1.0f;
    std::vector<float> group_scales_;
    std::vector<std::uint8_t> wq_;
    std::vector<std::uint8_t> wr_;
};

struct OutlierResult {
    Matrix<Fp16Bits> weights;
    float tensor_scale = 1.0f;
};

inline double max_abs(const Matrix<Fp16Bits>& w) {
    double m = 0.0;
    for (Fp16Bits h : w.flat()) {
        if (!h.is_finite()) throw InvalidInputError("weights contain NaN or Inf");
        m = std::max(m, std::fabs(to_double(h)));
    }
    return m;
}

// Per-tensor rescaling that brings every weight below 2.0 (exp5 <= 15).
// The trigger includes max == 2.0 itself, since 2.0 already has exp5 = 16.
inline OutlierResult handle_outliers(const Matrix<Fp16Bits>& w) {
    const double wmax = max_abs(w);
    if (wmax < 2.0) return {w, 1.0f};
    const float scale = static_cast<float>(1.999 / wmax);
    Matrix<Fp16Bits> out(w.rows(), w.cols());
    auto dst = out.flat();
    auto src = w.flat();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = fp16_from_double(to_double(src[i]) * static_cast<double>(scale));
    }
    return {std::move(out), scale};
}

// Least-squares scale s minimizing sum (w_i - s q_i)^2. Zero when every q is
// zero (only reachable for baseline formats with a zero code).
inline double fit_group_scale(std::span<const double> w, std::span<const double> q) {
    if (w.size() != q.size()) throw DimensionError("fit_group_scale: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        num += w[i] * q[i];
        den += q[i] * q[i];
    }
    return den > 0.0 ? num / den : 0.0;
}

namespace detail {

// Round-to-nearest onto an 8-value magnitude grid, ties to the even code.
inline unsigned nearest_code(QuantFormat f, double mag) noexcept {
    unsigned best = 0;
    double best_err = std::fabs(mag - code_value(f, 0));
    for (unsigned c = 1; c < 8; ++c) {
        const double err = std::fabs(mag - code_value(f, c));
        if (err < best_err || (err == best_err && (c & 1u) == 0 && (best & 1u) == 1)) {
            best = c;
            best_err = err;
        }
    }
    return best;
}

inline unsigned encode_code(QuantFormat f, Fp16Bits x, double prescale) noexcept {
    switch (f) {
        case QuantFormat::E3M0Remap: return bsfp::encode(x).wq();
        case QuantFormat::E3M0Naive: return (x.sign() << 3) | ((x.exp5() >> 1) & 0b111u);
        case QuantFormat::E2M1:
        case QuantFormat::E1M2: {
            const double v = to_double(x);
            return (x.sign() << 3) | nearest_code(f, std::fabs(v) * prescale);
        }
    }
    return 0;
}

inline double grid_max(QuantFormat f) noexcept { return code_value(f, 7); }

}  // namespace detail

// Quantizes a K x N FP16 matrix. Outliers are rescaled first, then each
// contiguous run of group_size reduction indices per output column gets a
// least-squares scale. The last group of a column may be shorter.
inline PackedTensor quantize_tensor(const Matrix<Fp16Bits>& w, std::size_t group_size = kDefaultGroupSize,
                                    QuantFormat format = QuantFormat::E3M0Remap) {
    if (w.rows() == 0 || w.cols() == 0) throw DimensionError("cannot quantize an empty tensor");
    if (group_size == 0) throw DimensionError("group size must be positive");
    OutlierResult scaled = handle_outliers(w);
    const Matrix<Fp16Bits>& x = scaled.weights;
    const std::size_t K = x.rows(), N = x.cols();
    const std::size_t groups = (K + group_size - 1) / group_size;
    const bool sharing = format == QuantFormat::E3M0Remap;

    std::vector<float> scales(N * groups);
    std::vector<std::uint8_t> wq(nibble_stream_bytes(K * N), 0);
    std::vector<std::uint8_t> wr(sharing ? twelve_bit_stream_bytes(K * N) : 0, 0);
    std::vector<double> wv, qv;
    wv.reserve(group_size);
    qv.reserve(group_size);

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t k0 = g * group_size, k1 = std::min(K, k0 + group_size);
            double prescale = 1.0;
            if (format == QuantFormat::E2M1 || format == QuantFormat::E1M2) {
                double gmax = 0.0;
                for (std::size_t k = k0; k < k1; ++k) gmax = std::max(gmax, std::fabs(to_double(x(k, n))));
                prescale = gmax > 0.0 ? detail::grid_max(format) / gmax : 1.0;
            }
            wv.clear();
            qv.clear();
            for (std::size_t k = k0; k < k1; ++k) {
                const Fp16Bits h = x(k, n);
                const std::size_t i = n * K + k;
                const unsigned code = detail::encode_code(format, h, prescale);
                write_nibble(wq, i, code);
                if (sharing) write_twelve(wr, i, bsfp::encode(h).wr());
                wv.push_back(to_double(h));
                qv.push_back(code_value(format, code));
            }
            scales[n * groups + g] = static_cast<float>(fit_group_scale(wv, qv));
        }
    }
    return PackedTensor(K, N, group_size, format, scaled.tensor_scale, std::move(scales), std::move(wq), std::move(wr));
}

// Exact FP16 reconstruction of the (outlier-scaled) tensor from both streams.
inline Matrix<Fp16Bits> dequantize_full(const PackedTensor& p) {
    if (!p.bit_sharing()) {
        throw FormatMismatchError("dequantize_full needs e3m0-remap, got " + std::string(to_string(p.format())));
    }
    Matrix<Fp16Bits> out(p.rows(), p.cols());
    for (std::size_t n = 0; n < p.cols(); ++n) {
        for (std::size_t k = 0; k < p.rows(); ++k) out(k, n) = bsfp::full_value(p.word(k, n));
    }
    return out;
}

// Draft reconstruction s * Q(w) in the outlier-scaled domain, any format.
inline Matrix<double> dequantize_draft(const PackedTensor& p) {
    Matrix<double> out(p.rows(), p.cols());
    const std::size_t gs = p.group_size();
    for (std::size_t n = 0; n < p.cols(); ++n) {
        for (std::size_t k = 0; k < p.rows(); ++k) {
            out(k, n) = static_cast<double>(p.group_scale(n, k / gs)) * code_value(p.format(), p.wq(k, n));
        }
    }
    return out;
}

// Mean squared error of the draft reconstruction against the outlier-scaled
// reference, averaged over all elements.
inline double reconstruction_mse(const Matrix<Fp16Bits>& reference, const PackedTensor& p) {
    if (reference.rows() != p.rows() || reference.cols() != p.cols()) throw DimensionError("reconstruction_mse: shape mismatch");
    const Matrix<double> r = dequantize_draft(p);
    double acc = 0.0;
    for (std::size_t k = 0; k < p.rows(); ++k) {
        for (std::size_t n = 0; n < p.cols(); ++n) {
            const double d = to_double(reference(k, n)) - r(k, n);
            acc += d * d;
        }
    }
    return acc / static_cast<double>(p.size());
}

// BF16 -> internal S1E5M10. Exponents below 112 are raised to 112, which
// lands on the FP16 subnormal range; everything else is value-exact.
inline Fp16Bits ingest_bf16(Bf16Bits b) {
    if (!b.is_finite() || b.exp8() > 127) {
        throw RangeError("bf16 exponent " + std::to_string(b.exp8()) + " exceeds 127; rescale outliers first");
    }
    const unsigned e = std::max(b.exp8(), 112u);
    if (e == 112) return Fp16Bits::from_fields(b.sign(), 0, (0x80u | b.man7()) << 2);
    return Fp16Bits::from_fields(b.sign(), e - 112, b.man7() << 3);
}

inline Matrix<Fp16Bits> ingest_bf16(const Matrix<Bf16Bits>& w) {
    Matrix<Fp16Bits> out(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) out.flat()[i] = ingest_bf16(w.flat()[i]);
    return out;
}

// BF16 variant of the outlier rescaling, applied before ingest_bf16.
inline std::pair<Matrix<Bf16Bits>, float> handle_outliers_bf16(const Matrix<Bf16Bits>& w) {
    double wmax = 0.0;
    for (Bf16Bits b : w.flat()) {
        if (!b.is_finite()) throw InvalidInputError("weights contain NaN or Inf");
        wmax = std::max(wmax, std::fabs(to_double(b)));
    }
    if (wmax < 2.0) return {w, 1.0f};
    const float scale = static_cast<float>(1.999 / wmax);
    Matrix<Bf16Bits> out(w.rows(), w.cols());
    // BF16 keeps 7 mantissa bits, so 1.999 itself rounds up to 2.0. Results
    // that land on exponent 128 saturate to the largest value below 2.
    for (std::size_t i = 0; i < w.size(); ++i) {
        Bf16Bits b = bf16_from_double(to_double(w.flat()[i]) * static_cast<double>(scale));
        if (b.exp8() > 127) b = Bf16Bits::from_fields(b.sign(), 127, 0x7F);
        out.flat()[i] = b;
    }
    return {std::move(out), scale};
}

struct ExpHistogram {
    std::array<std::uint64_t, 32> counts{};
    std::uint64_t total = 0;
    double frac_unused = 0.0;  // share of elements with exp5 >= 16
};

inline ExpHistogram exponent_histogram(std::span<const Fp16Bits> w) noexcept {
    ExpHistogram h;
    std::uint64_t unused = 0;
    for (Fp16Bits x : w) {
        ++h.counts[x.exp5()];
        if (x.exp5() >= 16) ++unused;
    }
    h.total = w.size();
    h.frac_unused = w.empty() ? 0.0 : static_cast<double>(unused) / static_cast<double>(w.size());
    return h;
}

}  // namespace speq
