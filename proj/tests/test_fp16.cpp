#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "oracles.hpp"
#include "speq/fp16.hpp"

using speq::Bf16Bits;
using speq::Fp16Bits;

TEST(Fp16, DecodeMatchesFieldFormulaForAllFinitePatterns) {
    for (unsigned b = 0; b < 65536; ++b) {
        const Fp16Bits h{static_cast<std::uint16_t>(b)};
        if (!h.is_finite()) continue;
        ASSERT_EQ(speq::to_double(h), oracle::fp16_value(h.bits)) << b;
        ASSERT_EQ(speq::to_float_lut(h), static_cast<float>(oracle::fp16_value(h.bits))) << b;
    }
}

TEST(Fp16, FieldAccessors) {
    const auto h = Fp16Bits::from_fields(1, 15, 0x200);  // -1.5
    EXPECT_EQ(h.bits, 0xBE00);
    EXPECT_EQ(h.sign(), 1u);
    EXPECT_EQ(h.exp5(), 15u);
    EXPECT_EQ(h.man10(), 0x200u);
    EXPECT_EQ(h.significand(), 0x600u);
    EXPECT_EQ(Fp16Bits{0x0001}.significand(), 1u);
    EXPECT_EQ(Fp16Bits{0x0001}.effective_exp(), 1);
    EXPECT_TRUE(Fp16Bits{0x8000}.is_zero());
    EXPECT_FALSE(Fp16Bits{0x7C00}.is_finite());
}

TEST(Fp16, RoundTripThroughDoubleIsIdentity) {
    for (unsigned b = 0; b < 65536; ++b) {
        const Fp16Bits h{static_cast<std::uint16_t>(b)};
        if (!h.is_finite()) continue;
        ASSERT_EQ(speq::fp16_from_double(speq::to_double(h)), h) << b;
    }
}

TEST(Fp16, RoundingMatchesNearestEvenOracle) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> expo(-27.0, 16.5);
    std::uniform_int_distribution<int> sign(0, 1);
    for (int i = 0; i < 200000; ++i) {
        const double x = (sign(rng) ? -1.0 : 1.0) * std::pow(2.0, expo(rng));
        ASSERT_EQ(speq::fp16_from_double(x).bits, oracle::fp16_round(x)) << x;
    }
}

TEST(Fp16, RoundingTiesGoToEven) {
    // Midpoint between 1.0 and 1.0 + 2^-10 rounds down; next midpoint rounds up.
    EXPECT_EQ(speq::fp16_from_double(1.0 + std::ldexp(1.0, -11)).bits, 0x3C00);
    EXPECT_EQ(speq::fp16_from_double(1.0 + 3 * std::ldexp(1.0, -11)).bits, 0x3C02);
    // Subnormal midpoint: 0.5 * 2^-24 ties to zero, 1.5 * 2^-24 ties to 2 * 2^-24.
    EXPECT_EQ(speq::fp16_from_double(std::ldexp(1.0, -25)).bits, 0x0000);
    EXPECT_EQ(speq::fp16_from_double(3 * std::ldexp(1.0, -25)).bits, 0x0002);
    // Largest finite value and overflow threshold.
    EXPECT_EQ(speq::fp16_from_double(65504.0).bits, 0x7BFF);
    EXPECT_EQ(speq::fp16_from_double(65519.99).bits, 0x7BFF);
    EXPECT_EQ(speq::fp16_from_double(65520.0).bits, 0x7C00);
    EXPECT_EQ(speq::fp16_from_double(-0.0).bits, 0x8000);
}

TEST(Fp16, NonFiniteInputs) {
    EXPECT_EQ(speq::fp16_from_double(std::numeric_limits<double>::infinity()).bits, 0x7C00);
    EXPECT_FALSE(speq::fp16_from_double(std::numeric_limits<double>::quiet_NaN()).is_finite());
}

TEST(Bf16, DecodeAndRound) {
    EXPECT_EQ(speq::to_double(Bf16Bits{0x3F80}), 1.0);
    EXPECT_EQ(speq::to_double(Bf16Bits::from_fields(0, 112, 0)), std::ldexp(1.0, -15));
    EXPECT_EQ(speq::bf16_from_double(1.0).bits, 0x3F80);
    // 1 + 2^-8 is the midpoint of 1.0 and 1 + 2^-7: ties to even.
    EXPECT_EQ(speq::bf16_from_double(1.0 + std::ldexp(1.0, -8)).bits, 0x3F80);
    EXPECT_EQ(speq::bf16_from_double(1.0 + 3 * std::ldexp(1.0, -8)).bits, 0x3F82);
    for (unsigned b = 0; b < 65536; ++b) {
        const Bf16Bits x{static_cast<std::uint16_t>(b)};
        if (!x.is_finite()) continue;
        ASSERT_EQ(speq::bf16_from_double(speq::to_double(x)), x) << b;
    }
}
