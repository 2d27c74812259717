#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "speq/specdec.hpp"

using namespace speq::specdec;
using speq::Fp16Bits;
using speq::Matrix;
using speq::lm::ModelConfig;
using speq::lm::ToyModel;
using speq::lm::ToyWeights;

namespace {

// Plain geometric sum, term by term.
double accept_length_oracle(double r, unsigned L) {
    double s = 0.0, p = 1.0;
    for (unsigned i = 0; i <= L; ++i) {
        s += p;
        p *= r;
    }
    return s;
}

ModelConfig small_config(std::uint64_t seed) {
    ModelConfig c;
    c.vocab = 64;
    c.d_model = 32;
    c.heads = 2;
    c.d_ff = 64;
    c.context = 128;
    c.seed = seed;
    return c;
}

std::vector<Token> random_prompt(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::vector<Token> p(n);
    for (auto& t : p) t = static_cast<Token>(rng() % vocab);
    return p;
}

// Every column of w gets one power-of-two magnitude with random signs. With a
// single group per column the draft scale then cancels exactly and both
// kernels round identically.
void make_power_of_two(Matrix<Fp16Bits>& w, std::mt19937_64& rng) {
    for (std::size_t n = 0; n < w.cols(); ++n) {
        const unsigned e = 9 + static_cast<unsigned>(rng() % 3);
        for (std::size_t k = 0; k < w.rows(); ++k) w(k, n) = Fp16Bits::from_fields(rng() & 1, e, 0);
    }
}

ToyModel draft_equals_full_model() {
    ModelConfig c;
    c.vocab = 64;
    c.d_model = 64;
    c.heads = 4;
    c.d_ff = 128;
    c.context = 256;
    c.seed = 3;
    ToyWeights w = speq::lm::generate_weights(c);
    std::mt19937_64 rng(77);
    for (auto& p : w.layers) {
        for (auto* m : {&p.query, &p.key, &p.value, &p.output, &p.up, &p.down}) make_power_of_two(*m, rng);
    }
    make_power_of_two(w.head, rng);
    return ToyModel::from_weights(w);
}

}  // namespace

TEST(AcceptLength, Examples) {
    EXPECT_DOUBLE_EQ(expected_accept_length(0.5, 1), 1.5);
    EXPECT_DOUBLE_EQ(expected_accept_length(0.0, 8), 1.0);
    EXPECT_DOUBLE_EQ(expected_accept_length(1.0, 16), 17.0);
    EXPECT_EQ(expected_speedup_approx(1.0, 16, 0.25), 3.4);
    EXPECT_EQ(expected_speedup(1.0, 16, PerfParams{0.25, 1.0, 1.0}), 3.4);
    EXPECT_DOUBLE_EQ(expected_speedup_approx(0.0, 4, 0.25), 1.0 / 2.0);
}

TEST(AcceptLength, MatchesGeometricSum) {
    for (double r : {0.0, 0.1, 0.5, 0.9, 0.977, 0.999}) {
        for (unsigned L : {1u, 2u, 4u, 8u, 16u, 64u}) {
            EXPECT_NEAR(expected_accept_length(r, L), accept_length_oracle(r, L), 1e-12) << r << ' ' << L;
        }
    }
}

TEST(AcceptLength, MonotoneInRateAndLength) {
    for (unsigned L = 1; L < 20; ++L) {
        double prev = 0.0;
        for (int i = 0; i <= 100; ++i) {
            const double v = expected_accept_length(i / 100.0, L);
            EXPECT_GE(v, prev);
            EXPECT_LE(v, L + 1.0);
            prev = v;
        }
        EXPECT_LE(expected_accept_length(0.7, L), expected_accept_length(0.7, L + 1));
    }
}

TEST(AcceptLength, ZeroRateSpeedupIsInverseCost) {
    for (unsigned L : {1u, 4u, 16u}) EXPECT_DOUBLE_EQ(expected_speedup(0.0, L, PerfParams{1.0, 1.0, 1.0}), 1.0 / (L + 1.0));
}

TEST(AcceptLength, DomainChecks) {
    EXPECT_THROW(expected_accept_length(1.1, 4), speq::InvalidInputError);
    EXPECT_THROW(expected_accept_length(-0.1, 4), speq::InvalidInputError);
    EXPECT_THROW(expected_accept_length(0.5, 0), speq::InvalidInputError);
    EXPECT_THROW(expected_speedup(0.5, 4, PerfParams{0.0, 1.0, 1.0}), speq::InvalidInputError);
}

TEST(MonteCarlo, AgreesWithClosedForm) {
    for (double r : {0.5, 0.9, 0.977}) {
        for (unsigned L : {4u, 16u}) {
            const auto mc = simulate_accept_length(r, L, 200000, 17);
            const double expect = expected_accept_length(r, L);
            EXPECT_NEAR(mc.mean_accept_len, expect, 5 * mc.std_error + 1e-12) << r << ' ' << L;
        }
    }
    EXPECT_EQ(simulate_accept_length(0.0, 8, 1000, 1).mean_accept_len, 1.0);
    EXPECT_EQ(simulate_accept_length(1.0, 8, 1000, 1).mean_accept_len, 9.0);
}

TEST(SpecDec, LosslessAgainstGreedy) {
    const ToyModel model = ToyModel::create(small_config(1));
    std::mt19937_64 rng(8);
    for (int i = 0; i < 6; ++i) {
        const auto prompt = random_prompt(1 + rng() % 12, model.vocab(), rng);
        const std::size_t gen = 1 + rng() % 80;
        const auto greedy = greedy_generate(model, prompt, gen);
        for (unsigned L : {1u, 4u, 16u}) {
            for (double gamma : {0.0, 0.6, 0.95}) {
                const auto spec = speculative_generate(model, prompt, SpecDecConfig{L, gamma, 0}, gen);
                ASSERT_EQ(spec.tokens, greedy.tokens) << i << ' ' << L << ' ' << gamma;
                EXPECT_EQ(spec.kv_high_water, greedy.kv_high_water);
                EXPECT_EQ(spec.kv_high_water, prompt.size() + gen - 1);
                EXPECT_EQ(spec.stats.tokens_generated, gen);
                EXPECT_EQ(spec.stats.round_tokens + 1, gen);
                EXPECT_LE(spec.stats.accepted, spec.stats.proposed);
                EXPECT_LE(spec.stats.proposed, spec.stats.rounds * L);
            }
        }
    }
}

TEST(SpecDec, GammaOneNeverDrafts) {
    const ToyModel model = ToyModel::create(small_config(2));
    const std::vector<Token> prompt = {1, 2, 3};
    const auto spec = speculative_generate(model, prompt, SpecDecConfig{16, 1.0, 0}, 40);
    EXPECT_EQ(spec.stats.proposed, 0u);
    EXPECT_EQ(spec.stats.rounds, 39u);
    EXPECT_EQ(spec.stats.mean_accept_len(), 1.0);
    EXPECT_EQ(spec.stats.accept_rate(), 0.0);
    EXPECT_EQ(spec.tokens, greedy_generate(model, prompt, 40).tokens);
}

TEST(SpecDec, AllDraftsAcceptedWhenDraftEqualsFull) {
    const ToyModel model = draft_equals_full_model();
    const std::vector<Token> prompt = {5, 9, 2, 7};
    for (unsigned L : {1u, 3u, 8u}) {
        const std::size_t R = 6, gen = 1 + R * (L + 1);
        const auto spec = speculative_generate(model, prompt, SpecDecConfig{L, 0.0, 0}, gen);
        EXPECT_EQ(spec.stats.rounds, R);
        EXPECT_EQ(spec.stats.proposed, R * L);
        EXPECT_EQ(spec.stats.accepted, R * L);
        EXPECT_DOUBLE_EQ(spec.stats.accept_rate(), 1.0);
        EXPECT_DOUBLE_EQ(spec.stats.mean_accept_len(), L + 1.0);
        EXPECT_EQ(spec.tokens, greedy_generate(model, prompt, gen).tokens);
    }
}

TEST(SpecDec, DraftCapKeepsHighWaterAtGreedy) {
    const ToyModel model = draft_equals_full_model();
    const std::vector<Token> prompt = {1};
    for (std::size_t gen : {1u, 2u, 5u, 17u, 30u}) {
        const auto spec = speculative_generate(model, prompt, SpecDecConfig{16, 0.0, 0}, gen);
        EXPECT_EQ(spec.tokens.size(), gen);
        EXPECT_EQ(spec.kv_high_water, greedy_generate(model, prompt, gen).kv_high_water);
    }
}

TEST(SpecDec, ContextOverflowIsRejected) {
    const ToyModel model = ToyModel::create(small_config(4));
    const std::vector<Token> prompt(100, 1);
    EXPECT_THROW(speculative_generate(model, prompt, SpecDecConfig{}, 29), speq::ContextOverflowError);
    EXPECT_THROW(greedy_generate(model, prompt, 29), speq::ContextOverflowError);
    EXPECT_NO_THROW(speculative_generate(model, prompt, SpecDecConfig{}, 28));
    EXPECT_THROW(speculative_generate(model, std::vector<Token>{}, SpecDecConfig{}, 4), speq::InvalidInputError);
    EXPECT_THROW(speculative_generate(model, prompt, SpecDecConfig{0, 0.5, 0}, 4), speq::InvalidInputError);
    EXPECT_THROW(speculative_generate(model, prompt, SpecDecConfig{4, 1.5, 0}, 4), speq::InvalidInputError);
}

TEST(SpecDecStats, Accumulate) {
    SpecDecStats a{2, 6, 3, 5, 6}, b{1, 2, 2, 3, 4};
    a += b;
    EXPECT_EQ(a.rounds, 3u);
    EXPECT_DOUBLE_EQ(a.accept_rate(), 5.0 / 8.0);
    EXPECT_DOUBLE_EQ(a.mean_draft_len(), 8.0 / 3.0);
    EXPECT_DOUBLE_EQ(a.mean_accept_len(), 8.0 / 3.0);
    EXPECT_EQ(SpecDecStats{}.accept_rate(), 0.0);
}
