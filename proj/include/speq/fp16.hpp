#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

#include "speq/errors.hpp"

namespace speq {

// IEEE binary16 bit pattern: 1 sign bit, 5-bit exponent (bias 15), 10-bit
// mantissa. Kept as raw bits so every encode/decode step stays bit-exact.
struct Fp16Bits {
    std::uint16_t bits = 0;

    static constexpr int kBias = 15;

    static constexpr Fp16Bits from_fields(unsigned sign, unsigned exp5, unsigned man10) noexcept {
        return Fp16Bits{static_cast<std::uint16_t>(((sign & 1u) << 15) | ((exp5 & 0x1Fu) << 10) | (man10 & 0x3FFu))};
    }

    constexpr unsigned sign() const noexcept { return bits >> 15; }
    constexpr unsigned exp5() const noexcept { return (bits >> 10) & 0x1Fu; }
    constexpr unsigned man10() const noexcept { return bits & 0x3FFu; }
    constexpr bool is_finite() const noexcept { return exp5() != 0x1F; }
    constexpr bool is_zero() const noexcept { return (bits & 0x7FFFu) == 0; }

    // Significand including the implicit bit, and the exponent it is scaled by:
    // value = (-1)^sign * significand() * 2^(effective_exp() - 25).
    constexpr unsigned significand() const noexcept { return exp5() == 0 ? man10() : (man10() | 0x400u); }
    constexpr int effective_exp() const noexcept { return exp5() == 0 ? 1 : static_cast<int>(exp5()); }

    friend constexpr bool operator==(Fp16Bits, Fp16Bits) = default;
};

// bfloat16 bit pattern: 1 sign, 8-bit exponent (bias 127), 7-bit mantissa.
struct Bf16Bits {
    std::uint16_t bits = 0;

    static constexpr int kBias = 127;

    static constexpr Bf16Bits from_fields(unsigned sign, unsigned exp8, unsigned man7) noexcept {
        return Bf16Bits{static_cast<std::uint16_t>(((sign & 1u) << 15) | ((exp8 & 0xFFu) << 7) | (man7 & 0x7Fu))};
    }

    constexpr unsigned sign() const noexcept { return bits >> 15; }
    constexpr unsigned exp8() const noexcept { return (bits >> 7) & 0xFFu; }
    constexpr unsigned man7() const noexcept { return bits & 0x7Fu; }
    constexpr bool is_finite() const noexcept { return exp8() != 0xFF; }

    friend constexpr bool operator==(Bf16Bits, Bf16Bits) = default;
};

inline double to_double(Fp16Bits h) noexcept {
    if (!h.is_finite()) {
        if (h.man10() != 0) return std::numeric_limits<double>::quiet_NaN();
        return h.sign() ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    }
    const double mag = std::ldexp(static_cast<double>(h.significand()), h.effective_exp() - 25);
    return h.sign() ? -mag : mag;
}

// Exact: every binary16 value is representable in binary32.
inline float to_float(Fp16Bits h) noexcept { return static_cast<float>(to_double(h)); }

// Round-to-nearest-even conversion. Values beyond the largest finite half
// become infinity; tiny values flush through the subnormal range to zero.
inline Fp16Bits fp16_from_double(double x) noexcept {
    if (std::isnan(x)) return Fp16Bits{0x7E00};
    const unsigned sign = std::signbit(x) ? 1u : 0u;
    const double a = std::fabs(x);
    if (a == 0.0) return Fp16Bits::from_fields(sign, 0, 0);
    if (a >= 65520.0) return Fp16Bits::from_fields(sign, 0x1F, 0);

    int e = 0;
    std::frexp(a, &e);  // a = f * 2^e, f in [0.5, 1)
    const int unbiased = e - 1;
    if (unbiased < -14) {
        // Subnormal grid spacing is 2^-24; a rounded count of 1024 lands on
        // the smallest normal, whose bit pattern is that same integer.
        const auto r = static_cast<unsigned>(std::nearbyint(std::ldexp(a, 24)));
        return Fp16Bits{static_cast<std::uint16_t>((sign << 15) | r)};
    }
    auto r = static_cast<unsigned>(std::nearbyint(std::ldexp(a, 10 - unbiased)));
    int exp5 = unbiased + 15;
    if (r == 2048) {
        r = 1024;
        ++exp5;
    }
    if (exp5 >= 31) return Fp16Bits::from_fields(sign, 0x1F, 0);
    return Fp16Bits::from_fields(sign, static_cast<unsigned>(exp5), r & 0x3FFu);
}

// Table-driven variant of to_float for inner loops.
inline float to_float_lut(Fp16Bits h) noexcept {
    static const auto table = [] {
        std::array<float, 65536> t{};
        for (unsigned i = 0; i < t.size(); ++i) t[i] = to_float(Fp16Bits{static_cast<std::uint16_t>(i)});
        return t;
    }();
    return table[h.bits];
}

inline Fp16Bits fp16_from_float(float x) noexcept { return fp16_from_double(static_cast<double>(x)); }

inline double to_double(Bf16Bits b) noexcept {
    return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(b.bits) << 16));
}

// Round-to-nearest-even from binary32 (the value is first rounded to float).
inline Bf16Bits bf16_from_double(double x) noexcept {
    const float f = static_cast<float>(x);
    auto u = std::bit_cast<std::uint32_t>(f);
    if (std::isnan(f)) return Bf16Bits{static_cast<std::uint16_t>((u >> 16) | 0x40u)};
    const std::uint32_t lsb = (u >> 16) & 1u;
    u += 0x7FFFu + lsb;
    return Bf16Bits{static_cast<std::uint16_t>(u >> 16)};
}

}  // namespace speq
