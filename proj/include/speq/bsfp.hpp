#pragma once

// Bit-sharing floating point (BSFP).
//
// A BSFP word re-arranges the 16 bits of an FP16 weight whose exponent is at
// most 15 (so the top exponent bit is always zero) into two views:
//
//   Wq (4 bits)  = sign | qcode[2:0]           -> E3M0 draft weight
//   Wr (12 bits) = flag | elsb | man10[9:0]    -> remainder
//
// qcode is the middle three exponent bits, remapped so that exponents 9 and
// 11 get codes of their own (000 and 010). The freed codes pull exponents
// {0,1} into 001 and {4,5} into 011. flag takes the place of the unused top
// exponent bit and marks words whose qcode differs from the plain middle
// bits; together with elsb it makes the mapping invertible.
//
// The packed 16-bit word is Wq << 12 | Wr, which keeps the sign at bit 15 and
// the mantissa at bits 9..0, the same positions as in FP16.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "speq/errors.hpp"
#include "speq/fp16.hpp"

namespace speq::bsfp {

struct RemapCode {
    std::uint8_t qcode = 0;  // 3 bits
    std::uint8_t flag = 0;   // 1 bit
    std::uint8_t elsb = 0;   // 1 bit, original exponent LSB

    friend constexpr bool operator==(RemapCode, RemapCode) = default;
};

// exp5 -> (qcode, flag); elsb is always exp5 & 1.
inline constexpr std::array<RemapCode, 16> kRemapTable = {{
    {0b001, 1, 0}, {0b001, 1, 1}, {0b001, 0, 0}, {0b001, 0, 1},  // 0..3
    {0b011, 1, 0}, {0b011, 1, 1}, {0b011, 0, 0}, {0b011, 0, 1},  // 4..7
    {0b100, 0, 0}, {0b000, 1, 1}, {0b101, 0, 0}, {0b010, 1, 1},  // 8..11
    {0b110, 0, 0}, {0b110, 0, 1}, {0b111, 0, 0}, {0b111, 0, 1},  // 12..15
}};

// qcode -> decoded 4-bit exponent of the draft weight.
inline constexpr std::array<std::uint8_t, 8> kQExpTable = {9, 2, 11, 6, 8, 10, 12, 14};

constexpr RemapCode remap_encode(unsigned exp5) {
    if (exp5 > 15) {
        throw RangeError("exponent " + std::to_string(exp5) + " exceeds 15; apply outlier rescaling first");
    }
    return kRemapTable[exp5];
}

// Gate-level decoder for the draft exponent: NOR of bits 0 and 2 selects
// between "append a zero" and the looked-up values 4'b1001 / 4'b1011.
constexpr unsigned decode_q_exp(unsigned qcode) noexcept {
    qcode &= 0b111u;
    const unsigned b0 = qcode & 1u;
    const unsigned b1 = (qcode >> 1) & 1u;
    const unsigned b2 = (qcode >> 2) & 1u;
    const bool nor = !(b0 | b2);
    if (!nor) return qcode << 1;
    return 0b1001u | (b1 << 1);
}

// Lossless exponent decoder. flag = 0 concatenates qcode and elsb; flag = 1
// routes qcode bits [1:0] through a 2->3 MUX first. Combinations that
// remap_encode never emits are rejected.
constexpr unsigned decode_full_exp(unsigned qcode, unsigned flag, unsigned elsb) {
    qcode &= 0b111u;
    flag &= 1u;
    elsb &= 1u;
    unsigned top3 = qcode;
    if (flag) {
        if (qcode & 0b100u) throw MalformedWordError("flag set on qcode " + std::to_string(qcode));
        constexpr std::array<unsigned, 4> mux = {0b100, 0b000, 0b101, 0b010};  // index = qcode[1:0]
        top3 = mux[qcode & 0b11u];
    }
    const unsigned exp5 = (top3 << 1) | elsb;
    if (kRemapTable[exp5] != RemapCode{static_cast<std::uint8_t>(qcode), static_cast<std::uint8_t>(flag),
                                       static_cast<std::uint8_t>(elsb)}) {
        throw MalformedWordError("unreachable exponent code (qcode=" + std::to_string(qcode) +
                                 ", flag=" + std::to_string(flag) + ", elsb=" + std::to_string(elsb) + ")");
    }
    return exp5;
}

class BsfpWord {
public:
    constexpr BsfpWord() = default;

    static constexpr BsfpWord from_bits(std::uint16_t bits) noexcept { return BsfpWord(bits); }
    static constexpr BsfpWord from_views(unsigned wq, unsigned wr) noexcept {
        return BsfpWord(static_cast<std::uint16_t>(((wq & 0xFu) << 12) | (wr & 0xFFFu)));
    }
    static constexpr BsfpWord from_fields(unsigned sign, unsigned qcode, unsigned flag, unsigned elsb,
                                          unsigned man10) noexcept {
        return from_views(((sign & 1u) << 3) | (qcode & 0b111u), ((flag & 1u) << 11) | ((elsb & 1u) << 10) | (man10 & 0x3FFu));
    }

    constexpr std::uint16_t bits() const noexcept { return bits_; }
    constexpr unsigned wq() const noexcept { return bits_ >> 12; }
    constexpr unsigned wr() const noexcept { return bits_ & 0xFFFu; }

    constexpr unsigned sign() const noexcept { return bits_ >> 15; }
    constexpr unsigned qcode() const noexcept { return (bits_ >> 12) & 0b111u; }
    constexpr unsigned flag() const noexcept { return (bits_ >> 11) & 1u; }
    constexpr unsigned elsb() const noexcept { return (bits_ >> 10) & 1u; }
    constexpr unsigned man10() const noexcept { return bits_ & 0x3FFu; }

    friend constexpr bool operator==(BsfpWord, BsfpWord) = default;

private:
    constexpr explicit BsfpWord(std::uint16_t bits) noexcept : bits_(bits) {}
    std::uint16_t bits_ = 0;
};

// Zero and subnormals go through the same bit extraction as normal values.
constexpr BsfpWord encode(Fp16Bits x) {
    const RemapCode rc = remap_encode(x.exp5());
    return BsfpWord::from_fields(x.sign(), rc.qcode, rc.flag, rc.elsb, x.man10());
}

constexpr Fp16Bits full_value(BsfpWord w) {
    return Fp16Bits::from_fields(w.sign(), decode_full_exp(w.qcode(), w.flag(), w.elsb()), w.man10());
}

// Value of a 4-bit draft record (sign | qcode): +-2^(decoded exponent - 15).
// The E3M0 significand is exactly 1.0; the mantissa does not participate.
inline double wq_value(unsigned wq) noexcept {
    const double mag = std::ldexp(1.0, static_cast<int>(decode_q_exp(wq & 0b111u)) - 15);
    return (wq & 0b1000u) ? -mag : mag;
}

inline double q_magnitude(BsfpWord w) noexcept { return wq_value(w.wq()); }

// full_value as a float, by table. Unreachable words map to NaN; callers
// validate words before using this (PackedTensor does on construction).
inline float full_value_lut(BsfpWord w) noexcept {
    static const auto table = [] {
        std::array<float, 65536> t{};
        for (unsigned i = 0; i < t.size(); ++i) {
            const auto word = BsfpWord::from_bits(static_cast<std::uint16_t>(i));
            try {
                t[i] = static_cast<float>(to_double(full_value(word)));
            } catch (const MalformedWordError&) {
                t[i] = std::numeric_limits<float>::quiet_NaN();
            }
        }
        return t;
    }();
    return table[w.bits()];
}

}  // namespace speq::bsfp
