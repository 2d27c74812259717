#pragma once

// Functional and cycle model of the reconfigurable PE array.
//
// Full mode: one FP16 activation x one 15-bit weight (sign, exp4, man10) per
// PE per cycle. The 11-bit weight significand is split hi6/lo5 and each half
// goes through its own multiplier; the two partial products are shifted and
// summed.
//
// Quantize mode: one FP16 activation x three 5-bit weights (sign, exp4) per
// PE per cycle. Multiplying by +-2^(exp4 - 15) is an exponent add, so the
// three products reuse the exponent adder and the two multiplier adders.
//
// Mapping: PEs in a tile cover the reduction indices of one group, tiles
// cover output columns, and a quantize-mode PE carries three columns.
// Accumulation follows the kernels contract so results match bit-exactly.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "speq/bsfp.hpp"
#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/kernels.hpp"
#include "speq/matrix.hpp"
#include "speq/quantizer.hpp"

namespace speq::pe {

struct PeConfig {
    unsigned tiles = 8;
    unsigned pes_per_tile = 128;
    unsigned array_rows = 32;
    unsigned array_cols = 32;
    double frequency_hz = 500e6;   // reporting only
    std::uint64_t pipeline_fill = 0;  // fixed cycles added per GEMM

    unsigned total_pes() const noexcept { return tiles * pes_per_tile; }

    void validate() const {
        if (tiles == 0 || pes_per_tile == 0) throw InvalidInputError("PE config needs at least one PE");
        if (total_pes() != array_rows * array_cols) {
            throw InvalidInputError("tiles x pes_per_tile (" + std::to_string(total_pes()) + ") != array size (" +
                                    std::to_string(array_rows * array_cols) + ")");
        }
        if (!(frequency_hz > 0.0)) throw InvalidInputError("frequency must be positive");
    }
};

enum class GemmMode : std::uint8_t { Draft, Full };

inline const char* to_string(GemmMode m) noexcept { return m == GemmMode::Draft ? "draft" : "full"; }

// Decoded full-mode weight: the unused exponent bit is dropped.
struct PeWeightFull {
    std::uint8_t sign = 0;
    std::uint8_t exp4 = 0;
    std::uint16_t man10 = 0;

    static constexpr unsigned kWidth = 1 + 4 + 10;

    static PeWeightFull from_word(bsfp::BsfpWord w) {
        const Fp16Bits h = bsfp::full_value(w);
        return {static_cast<std::uint8_t>(h.sign()), static_cast<std::uint8_t>(h.exp5() & 0xFu),
                static_cast<std::uint16_t>(h.man10())};
    }
};

struct PeQuantWeight {
    std::uint8_t sign = 0;
    std::uint8_t exp4 = 0;

    static constexpr unsigned kWidth = 1 + 4;

    static PeQuantWeight from_wq(unsigned wq) noexcept {
        return {static_cast<std::uint8_t>((wq >> 3) & 1u), static_cast<std::uint8_t>(bsfp::decode_q_exp(wq & 0b111u))};
    }
};

struct PeOperandsFull {
    Fp16Bits activation;
    PeWeightFull weight;
    static constexpr unsigned kInputWidth = 16 + PeWeightFull::kWidth;
};

struct PeOperandsQuant {
    Fp16Bits activation;
    std::array<PeQuantWeight, 3> weights{};
    static constexpr unsigned kInputWidth = 16 + 3 * PeQuantWeight::kWidth;
};

static_assert(PeOperandsFull::kInputWidth == 31);
static_assert(PeOperandsQuant::kInputWidth == PeOperandsFull::kInputWidth);

// Full-mode multiply through the split significand datapath.
inline float pe_full_mac(Fp16Bits a, PeWeightFull w) noexcept {
    const std::uint32_t a_sig = a.significand();
    const std::uint32_t w_sig = w.exp4 == 0 ? w.man10 : (0x400u | w.man10);
    const int a_exp = a.effective_exp();
    const int w_exp = w.exp4 == 0 ? 1 : w.exp4;

    const std::uint32_t hi6 = w_sig >> 5;
    const std::uint32_t lo5 = w_sig & 0x1Fu;
    const std::uint32_t product = ((a_sig * hi6) << 5) + a_sig * lo5;  // < 2^22
    const int exp_sum = a_exp + w_exp;                                   // exponent adder

    const float mag = std::ldexp(static_cast<float>(product), exp_sum - 2 * Fp16Bits::kBias - 20);
    return (a.sign() ^ w.sign) ? -mag : mag;
}

// Quantize-mode multiply: three exponent additions sharing one activation.
inline std::array<float, 3> pe_quant_mac3(const PeOperandsQuant& ops) noexcept {
    const Fp16Bits a = ops.activation;
    const float a_sig = static_cast<float>(a.significand());
    std::array<float, 3> out{};
    for (std::size_t i = 0; i < 3; ++i) {
        const PeQuantWeight& w = ops.weights[i];
        const int exp_sum = a.effective_exp() + w.exp4;
        const float mag = std::ldexp(a_sig, exp_sum - 2 * Fp16Bits::kBias - 10);
        out[i] = (a.sign() ^ w.sign) ? -mag : mag;
    }
    return out;
}

struct CycleReport {
    GemmMode mode = GemmMode::Full;
    std::uint64_t m = 0, n = 0, k = 0;
    std::uint64_t macs = 0;
    std::uint64_t lanes = 0;        // MACs the array retires per cycle
    std::uint64_t mac_cycles = 0;   // ceil(macs / lanes)
    std::uint64_t cycles = 0;       // mac_cycles + pipeline fill
    std::uint64_t pe_ops = 0;       // PE invocations issued by the mapping
    double weight_bytes = 0.0;
    double scale_bytes = 0.0;
    double activation_bytes = 0.0;
    double seconds = 0.0;

    // MAC-cycles as the exact rational macs / lanes.
    double ideal_mac_cycles() const noexcept { return static_cast<double>(macs) / static_cast<double>(lanes); }
};

inline unsigned macs_per_pe_per_cycle(GemmMode mode) noexcept { return mode == GemmMode::Draft ? 3u : 1u; }

// Analytic part of the simulation: counts only.
inline CycleReport estimate_cycles(std::uint64_t m, std::uint64_t n, std::uint64_t k, GemmMode mode, const PeConfig& cfg) {
    cfg.validate();
    if (m == 0 || n == 0 || k == 0) throw DimensionError("GEMM dimensions must be positive");
    CycleReport r;
    r.mode = mode;
    r.m = m;
    r.n = n;
    r.k = k;
    r.macs = m * n * k;
    r.lanes = static_cast<std::uint64_t>(cfg.total_pes()) * macs_per_pe_per_cycle(mode);
    r.mac_cycles = (r.macs + r.lanes - 1) / r.lanes;
    r.cycles = r.mac_cycles + cfg.pipeline_fill;
    const std::uint64_t weights = n * k;
    if (mode == GemmMode::Draft) {
        r.pe_ops = m * ((n + 2) / 3) * k;
        r.weight_bytes = 0.5 * static_cast<double>(weights);
    } else {
        r.pe_ops = r.macs;
        r.weight_bytes = 2.0 * static_cast<double>(weights);
    }
    r.activation_bytes = 2.0 * static_cast<double>(m * k);
    r.seconds = static_cast<double>(r.cycles) / cfg.frequency_hz;
    return r;
}

struct SimResult {
    Matrix<float> outputs;
    CycleReport report;
};

// Runs the GEMM through the PE functional models. Outputs are bit-identical
// to gemm_full / gemm_draft.
inline SimResult simulate_gemm(const Matrix<Fp16Bits>& a, const PackedTensor& w, GemmMode mode, const PeConfig& cfg) {
    if (a.cols() != w.rows()) throw DimensionError("simulate_gemm: inner dimension mismatch");
    if (!w.bit_sharing()) throw FormatMismatchError("PE array consumes e3m0-remap weights");
    (void)load_activations(a);
    const std::size_t M = a.rows(), K = a.cols(), N = w.cols();
    SimResult res{Matrix<float>(M, N), estimate_cycles(M, N, K, mode, cfg)};
    const float inv = tensor_scale_inverse(w.tensor_scale());
    std::uint64_t pe_ops = 0;

    if (mode == GemmMode::Full) {
        std::vector<PeWeightFull> column(K);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t k = 0; k < K; ++k) column[k] = PeWeightFull::from_word(w.word(k, n));
            for (std::size_t m = 0; m < M; ++m) {
                float acc = 0.0f;
                for (std::size_t k = 0; k < K; ++k) {
                    acc += pe_full_mac(a(m, k), column[k]);
                    ++pe_ops;
                }
                res.outputs(m, n) = acc * inv;
            }
        }
    } else {
        const std::size_t gs = w.group_size(), G = w.groups_per_column();
        // One PE column slot handles output columns n0, n0+1, n0+2.
        for (std::size_t n0 = 0; n0 < N; n0 += 3) {
            const std::size_t lanes = std::min<std::size_t>(3, N - n0);
            for (std::size_t m = 0; m < M; ++m) {
                std::array<float, 3> acc{};
                for (std::size_t g = 0; g < G; ++g) {
                    std::array<float, 3> partial{};
                    const std::size_t k1 = std::min(K, (g + 1) * gs);
                    for (std::size_t k = g * gs; k < k1; ++k) {
                        PeOperandsQuant ops{a(m, k), {}};
                        for (std::size_t j = 0; j < lanes; ++j) ops.weights[j] = PeQuantWeight::from_wq(w.wq(k, n0 + j));
                        const auto addends = pe_quant_mac3(ops);
                        ++pe_ops;
                        for (std::size_t j = 0; j < lanes; ++j) partial[j] += addends[j];
                    }
                    for (std::size_t j = 0; j < lanes; ++j) acc[j] += w.group_scale(n0 + j, g) * partial[j];
                }
                for (std::size_t j = 0; j < lanes; ++j) res.outputs(m, n0 + j) = acc[j] * inv;
            }
        }
        res.report.scale_bytes = static_cast<double>(w.scale_bytes());
    }
    if (pe_ops != res.report.pe_ops) throw Error("PE op count diverged from the mapping model");
    return res;
}

}  // namespace speq::pe
