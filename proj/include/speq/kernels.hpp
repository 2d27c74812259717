#pragma once

// Reference dual-path GEMM over a PackedTensor.
//
// Accumulation contract, per output element (m, n):
//   full : acc = 0; for k ascending: acc += a[m,k] * w[k,n]      (fp32)
//   draft: acc = 0; for g ascending: { p = 0; for k in g ascending:
//              p += a[m,k] * q[k,n]; acc += s[n,g] * p }         (fp32)
//   out = acc * (1 / tensor_scale)
// Every product is exact in fp32, so the only roundings are the ones the
// loops above spell out. Parallel execution splits columns and never
// changes the per-element order.

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "speq/bsfp.hpp"
#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/matrix.hpp"
#include "speq/quantizer.hpp"

namespace speq {

// Byte traffic observed by a GEMM. Weights count once per call (a column is
// loaded, then reused for every activation row). Weight traffic is kept in
// bits because the draft stream is half a byte per weight.
struct TrafficCounters {
    std::uint64_t weight_bits = 0;
    std::uint64_t scale_bytes = 0;
    std::uint64_t activation_bytes = 0;
    std::uint64_t output_bytes = 0;

    double weight_bytes() const noexcept { return static_cast<double>(weight_bits) / 8.0; }

    TrafficCounters& operator+=(const TrafficCounters& o) noexcept {
        weight_bits += o.weight_bits;
        scale_bytes += o.scale_bytes;
        activation_bytes += o.activation_bytes;
        output_bytes += o.output_bytes;
        return *this;
    }
    friend bool operator==(const TrafficCounters&, const TrafficCounters&) = default;
};

// Read-only view a draft kernel gets: 4-bit records and scales, nothing else.
class DraftWeights {
public:
    explicit DraftWeights(const PackedTensor& p)
        : rows_(p.rows()),
          cols_(p.cols()),
          group_size_(p.group_size()),
          groups_(p.groups_per_column()),
          tensor_scale_(p.tensor_scale()),
          wq_(p.wq_stream()),
          scales_(p.group_scales()) {
        if (p.format() != QuantFormat::E3M0Remap) throw FormatMismatchError("draft GEMM requires e3m0-remap weights");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t group_size() const noexcept { return group_size_; }
    std::size_t groups() const noexcept { return groups_; }
    float tensor_scale() const noexcept { return tensor_scale_; }
    unsigned wq(std::size_t k, std::size_t n) const noexcept { return read_nibble(wq_, n * rows_ + k); }
    float scale(std::size_t n, std::size_t g) const noexcept { return scales_[n * groups_ + g]; }

private:
    std::size_t rows_, cols_, group_size_, groups_;
    float tensor_scale_;
    std::span<const std::uint8_t> wq_;
    std::span<const float> scales_;
};

// View for the verification kernel: both streams, no scales.
class FullWeights {
public:
    explicit FullWeights(const PackedTensor& p)
        : rows_(p.rows()), cols_(p.cols()), tensor_scale_(p.tensor_scale()), wq_(p.wq_stream()), wr_(p.wr_stream()) {
        if (!p.bit_sharing()) throw FormatMismatchError("full GEMM requires e3m0-remap weights");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    float tensor_scale() const noexcept { return tensor_scale_; }
    bsfp::BsfpWord word(std::size_t k, std::size_t n) const noexcept {
        const std::size_t i = n * rows_ + k;
        return bsfp::BsfpWord::from_views(read_nibble(wq_, i), read_twelve(wr_, i));
    }

private:
    std::size_t rows_, cols_;
    float tensor_scale_;
    std::span<const std::uint8_t> wq_;
    std::span<const std::uint8_t> wr_;
};

// Exact product of two binary16 values: 11x11-bit significands need at most
// 22 bits, so the fp32 multiply never rounds.
inline float exact_fp16_product(Fp16Bits a, Fp16Bits w) noexcept { return to_float_lut(a) * to_float_lut(w); }

inline float tensor_scale_inverse(float tensor_scale) noexcept { return 1.0f / tensor_scale; }

// Validates and widens activations once per GEMM (exact conversion).
inline Matrix<float> load_activations(const Matrix<Fp16Bits>& a) {
    Matrix<float> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Fp16Bits h = a.flat()[i];
        if (!h.is_finite()) throw InvalidInputError("activations contain NaN or Inf");
        out.flat()[i] = to_float_lut(h);
    }
    return out;
}

namespace detail {

// Runs body(n_begin, n_end, counters) over column blocks.
template <typename Body>
TrafficCounters for_column_blocks(std::size_t cols, unsigned threads, Body&& body) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cols)));
    if (threads == 1) {
        TrafficCounters c;
        body(std::size_t{0}, cols, c);
        return c;
    }
    std::vector<TrafficCounters> partial(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (cols + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        const std::size_t b = t * chunk, e = std::min(cols, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&, b, e, t] { body(b, e, partial[t]); });
    }
    for (auto& th : pool) th.join();
    TrafficCounters total;
    for (const auto& c : partial) total += c;
    return total;
}

inline const std::array<float, 16>& wq_value_table() {
    static const auto table = [] {
        std::array<float, 16> t{};
        for (unsigned c = 0; c < 16; ++c) t[c] = static_cast<float>(bsfp::wq_value(c));
        return t;
    }();
    return table;
}

}  // namespace detail

inline Matrix<float> gemm_full(const Matrix<Fp16Bits>& a, const FullWeights& w, TrafficCounters* counters = nullptr,
                               unsigned threads = 1) {
    if (a.cols() != w.rows()) {
        throw DimensionError("gemm_full: A is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " but W has " + std::to_string(w.rows()) + " rows");
    }
    const Matrix<float> af = load_activations(a);
    const std::size_t M = a.rows(), K = a.cols(), N = w.cols();
    const float inv = tensor_scale_inverse(w.tensor_scale());
    Matrix<float> out(M, N);
    TrafficCounters c = detail::for_column_blocks(N, threads, [&](std::size_t nb, std::size_t ne, TrafficCounters& tc) {
        std::vector<float> column(K);
        for (std::size_t n = nb; n < ne; ++n) {
            for (std::size_t k = 0; k < K; ++k) column[k] = bsfp::full_value_lut(w.word(k, n));
            tc.weight_bits += 16 * K;
            for (std::size_t m = 0; m < M; ++m) {
                const auto row = af.row(m);
                float acc = 0.0f;
                for (std::size_t k = 0; k < K; ++k) acc += row[k] * column[k];
                out(m, n) = acc * inv;
            }
        }
    });
    if (counters) {
        c.activation_bytes = 2 * M * K;
        c.output_bytes = 4 * M * N;
        *counters += c;
    }
    return out;
}

inline Matrix<float> gemm_full(const Matrix<Fp16Bits>& a, const PackedTensor& w, TrafficCounters* counters = nullptr,
                               unsigned threads = 1) {
    return gemm_full(a, FullWeights(w), counters, threads);
}

inline Matrix<float> gemm_draft(const Matrix<Fp16Bits>& a, const DraftWeights& w, TrafficCounters* counters = nullptr,
                                unsigned threads = 1) {
    if (a.cols() != w.rows()) {
        throw DimensionError("gemm_draft: A is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " but W has " + std::to_string(w.rows()) + " rows");
    }
    const Matrix<float> af = load_activations(a);
    const std::size_t M = a.rows(), K = a.cols(), N = w.cols(), G = w.groups(), gs = w.group_size();
    const float inv = tensor_scale_inverse(w.tensor_scale());
    const auto& qtable = detail::wq_value_table();
    Matrix<float> out(M, N);
    TrafficCounters c = detail::for_column_blocks(N, threads, [&](std::size_t nb, std::size_t ne, TrafficCounters& tc) {
        std::vector<float> column(K);
        std::vector<float> scales(G);
        for (std::size_t n = nb; n < ne; ++n) {
            for (std::size_t k = 0; k < K; ++k) column[k] = qtable[w.wq(k, n)];
            for (std::size_t g = 0; g < G; ++g) scales[g] = w.scale(n, g);
            tc.weight_bits += 4 * K;
            tc.scale_bytes += sizeof(float) * G;
            for (std::size_t m = 0; m < M; ++m) {
                const auto row = af.row(m);
                float acc = 0.0f;
                for (std::size_t g = 0; g < G; ++g) {
                    const std::size_t k1 = std::min(K, (g + 1) * gs);
                    float partial = 0.0f;
                    // a * (+-2^e) only shifts the activation exponent: exact.
                    for (std::size_t k = g * gs; k < k1; ++k) partial += row[k] * column[k];
                    acc += scales[g] * partial;
                }
                out(m, n) = acc * inv;
            }
        }
    });
    if (counters) {
        c.activation_bytes = 2 * M * K;
        c.output_bytes = 4 * M * N;
        *counters += c;
    }
    return out;
}

inline Matrix<float> gemm_draft(const Matrix<Fp16Bits>& a, const PackedTensor& w, TrafficCounters* counters = nullptr,
                                unsigned threads = 1) {
    return gemm_draft(a, DraftWeights(w), counters, threads);
}

// Plain FP16 x FP16 GEMM over an unquantized weight matrix, same
// accumulation order as gemm_full. Used for layers kept in FP16 and as the
// never-quantized reference.
inline Matrix<float> gemm_fp16(const Matrix<Fp16Bits>& a, const Matrix<Fp16Bits>& w, TrafficCounters* counters = nullptr) {
    if (a.cols() != w.rows()) throw DimensionError("gemm_fp16: inner dimension mismatch");
    const Matrix<float> af = load_activations(a);
    const std::size_t M = a.rows(), K = a.cols(), N = w.cols();
    Matrix<float> out(M, N);
    std::vector<float> column(K);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) column[k] = to_float_lut(w(k, n));
        for (std::size_t m = 0; m < M; ++m) {
            const auto row = af.row(m);
            float acc = 0.0f;
            for (std::size_t k = 0; k < K; ++k) acc += row[k] * column[k];
            out(m, n) = acc;
        }
    }
    if (counters) {
        counters->weight_bits += 16 * K * N;
        counters->activation_bytes += 2 * M * K;
        counters->output_bytes += 4 * M * N;
    }
    return out;
}

}  // namespace speq
