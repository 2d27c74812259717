#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "speq/model_io.hpp"
#include "speq/toy_lm.hpp"

using namespace speq::lm;
using speq::Fp16Bits;
using speq::Matrix;
using speq::PackedTensor;
using speq::TrafficCounters;

namespace {

ModelConfig small_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.vocab = 96;
    c.d_model = 32;
    c.heads = 4;
    c.d_ff = 160;  // two groups for the down projection, one of them short
    c.context = 64;
    c.seed = seed;
    return c;
}

constexpr Slot kSlots[] = {Slot::Query, Slot::Key, Slot::Value, Slot::Output, Slot::Up, Slot::Down};

}  // namespace

TEST(ToyModel, WeightsAreDeterministicInTheSeed) {
    const auto a = generate_weights(small_config(5));
    const auto b = generate_weights(small_config(5));
    const auto c = generate_weights(small_config(6));
    EXPECT_EQ(a.embedding, b.embedding);
    EXPECT_EQ(a.head, b.head);
    EXPECT_EQ(a.layers[1].down, b.layers[1].down);
    EXPECT_NE(a.head, c.head);
}

TEST(ToyModel, Shapes) {
    const auto cfg = small_config();
    const ToyModel m = ToyModel::create(cfg);
    EXPECT_EQ(m.layers().size(), cfg.layers);
    EXPECT_EQ(m.layers()[0].up.rows(), cfg.d_model);
    EXPECT_EQ(m.layers()[0].up.cols(), cfg.d_ff);
    EXPECT_EQ(m.layers()[0].down.groups_per_column(), 2u);
    EXPECT_EQ(m.packed_weight_count(), cfg.layers * (4 * 32 * 32 + 2 * 32 * 160) + 32 * 96);

    auto cache = m.make_cache();
    const std::vector<Token> prompt = {1, 2, 3, 4, 5};
    const auto logits = m.forward_full(prompt, cache);
    EXPECT_EQ(logits.rows(), prompt.size());
    EXPECT_EQ(logits.cols(), cfg.vocab);
    EXPECT_EQ(cache.size(), prompt.size());
    EXPECT_EQ(m.forward_draft(6, cache).size(), cfg.vocab);
    EXPECT_EQ(cache.size(), prompt.size() + 1);
}

TEST(ToyModel, ConfigValidation) {
    auto c = small_config();
    c.heads = 5;
    EXPECT_THROW(ToyModel::create(c), speq::InvalidInputError);
    c = small_config();
    c.d_model = 0;
    EXPECT_THROW(ToyModel::create(c), speq::InvalidInputError);
    const ToyModel m = ToyModel::create(small_config());
    auto cache = m.make_cache();
    const std::vector<Token> bad = {96};
    EXPECT_THROW(m.forward_full(bad, cache), speq::InvalidInputError);
}

TEST(ToyModel, QuantizationKeepsEveryWeightRecoverable) {
    const auto w = generate_weights(small_config(2));
    const ToyModel m = ToyModel::from_weights(w);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        for (Slot s : kSlots) {
            const PackedTensor& p = m.layers()[l].get(s);
            EXPECT_EQ(p.tensor_scale(), 1.0f);
            EXPECT_EQ(speq::dequantize_full(p), w.layers[l].get(s));
        }
    }
    EXPECT_EQ(speq::dequantize_full(std::get<PackedTensor>(m.head())), w.head);
}

TEST(ToyModel, FullPathMatchesUnquantizedReferenceBitForBit) {
    const auto w = generate_weights(small_config(3));
    const ToyModel m = ToyModel::from_weights(w);
    std::mt19937_64 rng(1);
    std::vector<Token> tokens(20);
    for (auto& t : tokens) t = static_cast<Token>(rng() % 96);

    auto c1 = m.make_cache();
    auto c2 = m.make_cache();
    const auto full = m.forward_full(tokens, c1);
    const auto ref = reference_forward(w, tokens, c2);
    EXPECT_TRUE(oracle::same_bits(full, ref));
}

TEST(ToyModel, MultiTokenPassEqualsOneTokenAtATime) {
    const ToyModel m = ToyModel::create(small_config(4));
    const std::vector<Token> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
    auto batch_cache = m.make_cache();
    const auto batch = m.forward_full(tokens, batch_cache);
    auto step_cache = m.make_cache();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto one = m.forward_full(std::span(tokens).subspan(i, 1), step_cache);
        for (std::size_t v = 0; v < m.vocab(); ++v) ASSERT_TRUE(oracle::same_float_bits(one(0, v), batch(i, v))) << i;
    }
}

TEST(ToyModel, DraftReadsOnlyTheFourBitStreamAndScales) {
    const ToyModel m = ToyModel::create(small_config(1));
    const std::size_t weights = m.packed_weight_count();
    std::size_t scales = 0;
    for (const auto& p : m.layers()) {
        for (Slot s : kSlots) scales += p.get(s).scale_bytes();
    }
    scales += std::get<PackedTensor>(m.head()).scale_bytes();

    auto cache = m.make_cache();
    const std::vector<Token> prompt = {7};
    TrafficCounters full, draft;
    (void)m.forward_full(prompt, cache, &full);
    (void)m.forward_draft(8, cache, &draft);
    EXPECT_EQ(draft.weight_bits, 4 * weights);
    EXPECT_EQ(draft.scale_bytes, scales);
    EXPECT_EQ(full.weight_bits, 16 * weights);
    EXPECT_EQ(full.scale_bytes, 0u);
    EXPECT_EQ(4 * draft.weight_bits, full.weight_bits);
}

TEST(ToyModel, DraftDiffersFromFullButStaysClose) {
    const ToyModel m = ToyModel::create(small_config(6));
    auto c1 = m.make_cache();
    auto c2 = m.make_cache();
    const std::vector<Token> t = {11};
    const auto full = m.forward_full(t, c1);
    const auto draft = m.forward_draft(11, c2);
    double diff = 0.0, norm = 0.0;
    for (std::size_t v = 0; v < m.vocab(); ++v) {
        diff += (full(0, v) - draft[v]) * (full(0, v) - draft[v]);
        norm += full(0, v) * full(0, v);
    }
    EXPECT_GT(diff, 0.0);
    EXPECT_LT(diff, norm);
}

TEST(ToyModel, UnquantizedHeadOption) {
    auto cfg = small_config(7);
    cfg.quantize_head = false;
    const ToyModel m = ToyModel::create(cfg);
    ASSERT_TRUE(std::holds_alternative<Matrix<Fp16Bits>>(m.head()));
    auto cache = m.make_cache();
    const std::vector<Token> t = {1, 2};
    EXPECT_EQ(m.forward_full(t, cache).cols(), cfg.vocab);
}

TEST(KvCache, TruncateAndHighWater) {
    KvCache c(1, 8, 4);
    c.advance(5);
    EXPECT_EQ(c.high_water(), 5u);
    c.truncate(2);
    EXPECT_EQ(c.size(), 2u);
    EXPECT_EQ(c.high_water(), 5u);
    EXPECT_THROW(c.truncate(3), speq::InvalidInputError);
    EXPECT_THROW(c.advance(7), speq::ContextOverflowError);
    c.advance(6);
    EXPECT_EQ(c.high_water(), 8u);
}

TEST(Sampling, ArgmaxAndMaxProbability) {
    const std::vector<float> logits = {0.0f, 2.0f, 2.0f, -1.0f};
    EXPECT_EQ(argmax(logits), 1u);
    const std::vector<float> flat(4, 3.0f);
    EXPECT_FLOAT_EQ(max_probability(flat), 0.25f);
    const std::vector<float> peaked = {100.0f, 0.0f};
    EXPECT_FLOAT_EQ(max_probability(peaked), 1.0f);
}

TEST(ModelFile, RoundTripPreservesBehaviour) {
    auto cfg = small_config(8);
    const ToyModel m = ToyModel::create(cfg);
    const auto bytes = speq::io::serialize_model(m);
    const ToyModel back = speq::io::deserialize_model(bytes);
    EXPECT_EQ(speq::io::serialize_model(back), bytes);

    const std::vector<Token> t = {4, 5, 6};
    auto c1 = m.make_cache();
    auto c2 = back.make_cache();
    EXPECT_TRUE(oracle::same_bits(m.forward_full(t, c1), back.forward_full(t, c2)));

    const auto path = std::filesystem::temp_directory_path() / "speq_test_model.bin";
    speq::io::save_model(path, m);
    EXPECT_EQ(speq::io::serialize_model(speq::io::load_model(path)), bytes);
    std::filesystem::remove(path);

    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x10;
    EXPECT_THROW(speq::io::deserialize_model(corrupt), speq::Error);
    EXPECT_THROW(speq::io::deserialize_model(std::span(bytes).first(bytes.size() - 9)), speq::Error);
}
