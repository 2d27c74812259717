#pragma once

// A small pre-norm decoder-only transformer whose linear layers are stored as
// PackedTensors. forward_full runs the exact FP16 weights through gemm_full;
// forward_draft runs the 4-bit view through gemm_draft. Both write into the
// same KvCache.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/kernels.hpp"
#include "speq/matrix.hpp"
#include "speq/quantizer.hpp"

namespace speq::lm {

using Token = std::uint32_t;

struct ModelConfig {
    std::size_t vocab = 256;
    std::size_t d_model = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t d_ff = 256;
    std::size_t context = 512;
    std::uint64_t seed = 0;
    std::size_t group_size = kDefaultGroupSize;
    double weight_std = 0.02;
    float logit_scale = 32.0f;  // sharpens the output distribution of random weights
    bool quantize_head = true;

    void validate() const {
        if (vocab == 0 || d_model == 0 || layers == 0 || heads == 0 || d_ff == 0 || context == 0) {
            throw InvalidInputError("model dimensions must be positive");
        }
        if (d_model % heads != 0) throw InvalidInputError("d_model must be divisible by heads");
        if (d_model % 2 != 0) throw InvalidInputError("d_model must be even for sinusoidal positions");
        if (group_size == 0) throw InvalidInputError("group size must be positive");
    }
};

enum class Slot : std::uint8_t { Query, Key, Value, Output, Up, Down };

template <typename W>
struct LayerParams {
    W query, key, value, output, up, down;
    std::vector<float> attn_norm, ffn_norm;

    const W& get(Slot s) const noexcept {
        switch (s) {
            case Slot::Query: return query;
            case Slot::Key: return key;
            case Slot::Value: return value;
            case Slot::Output: return output;
            case Slot::Up: return up;
            case Slot::Down: return down;
        }
        return query;
    }
};

// Unquantized FP16 parameters as drawn from the seed.
struct ToyWeights {
    ModelConfig cfg;
    Matrix<Fp16Bits> embedding;  // vocab x d_model
    std::vector<LayerParams<Matrix<Fp16Bits>>> layers;
    std::vector<float> final_norm;
    Matrix<Fp16Bits> head;  // d_model x vocab
};

inline Matrix<Fp16Bits> random_fp16(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<Fp16Bits> m(rows, cols);
    for (auto& x : m.flat()) x = fp16_from_double(dist(rng));
    return m;
}

inline ToyWeights generate_weights(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    ToyWeights w;
    w.cfg = cfg;
    w.embedding = random_fp16(cfg.vocab, cfg.d_model, 1.0, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerParams<Matrix<Fp16Bits>> p;
        p.query = random_fp16(cfg.d_model, cfg.d_model, cfg.weight_std, rng);
        p.key = random_fp16(cfg.d_model, cfg.d_model, cfg.weight_std, rng);
        p.value = random_fp16(cfg.d_model, cfg.d_model, cfg.weight_std, rng);
        p.output = random_fp16(cfg.d_model, cfg.d_model, cfg.weight_std, rng);
        p.up = random_fp16(cfg.d_model, cfg.d_ff, cfg.weight_std, rng);
        p.down = random_fp16(cfg.d_ff, cfg.d_model, cfg.weight_std, rng);
        p.attn_norm.assign(cfg.d_model, 1.0f);
        p.ffn_norm.assign(cfg.d_model, 1.0f);
        w.layers.push_back(std::move(p));
    }
    w.final_norm.assign(cfg.d_model, 1.0f);
    w.head = random_fp16(cfg.d_model, cfg.vocab, cfg.weight_std, rng);
    return w;
}

// Keys and values for every layer, stored as FP16. One instance serves both
// the draft and the verification pass.
class KvCache {
public:
    KvCache() = default;
    KvCache(std::size_t layers, std::size_t capacity, std::size_t width)
        : layers_(layers), capacity_(capacity), width_(width), keys_(layers * capacity * width), values_(keys_.size()) {}

    std::size_t size() const noexcept { return len_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t high_water() const noexcept { return high_water_; }
    std::size_t storage_bytes() const noexcept { return 2 * keys_.size() * sizeof(Fp16Bits); }

    void truncate(std::size_t len) {
        if (len > len_) throw InvalidInputError("cannot truncate KV cache forward");
        len_ = len;
    }

    void clear() noexcept { len_ = 0; }

    std::span<Fp16Bits> key(std::size_t layer, std::size_t pos) noexcept { return {&keys_[offset(layer, pos)], width_}; }
    std::span<Fp16Bits> value(std::size_t layer, std::size_t pos) noexcept { return {&values_[offset(layer, pos)], width_}; }
    std::span<const Fp16Bits> key(std::size_t layer, std::size_t pos) const noexcept { return {&keys_[offset(layer, pos)], width_}; }
    std::span<const Fp16Bits> value(std::size_t layer, std::size_t pos) const noexcept {
        return {&values_[offset(layer, pos)], width_};
    }

    void check_room(std::size_t n) const {
        if (len_ + n > capacity_) {
            throw ContextOverflowError("KV cache holds " + std::to_string(len_) + " of " + std::to_string(capacity_) +
                                       " positions; cannot append " + std::to_string(n));
        }
    }

    void advance(std::size_t n) {
        check_room(n);
        len_ += n;
        high_water_ = std::max(high_water_, len_);
    }

private:
    std::size_t offset(std::size_t layer, std::size_t pos) const noexcept { return (layer * capacity_ + pos) * width_; }

    std::size_t layers_ = 0, capacity_ = 0, width_ = 0;
    std::size_t len_ = 0, high_water_ = 0;
    std::vector<Fp16Bits> keys_, values_;
};

namespace detail {

inline Matrix<Fp16Bits> to_fp16(const Matrix<float>& x) {
    Matrix<Fp16Bits> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out.flat()[i] = fp16_from_float(x.flat()[i]);
    return out;
}

inline Matrix<Fp16Bits> rms_norm_fp16(const Matrix<float>& x, std::span<const float> weight) {
    constexpr float kEps = 1e-5f;
    Matrix<Fp16Bits> out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        float ss = 0.0f;
        for (float v : row) ss += v * v;
        const float inv = 1.0f / std::sqrt(ss / static_cast<float>(row.size()) + kEps);
        for (std::size_t c = 0; c < row.size(); ++c) out(r, c) = fp16_from_float(row[c] * inv * weight[c]);
    }
    return out;
}

inline float gelu(float x) noexcept {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

inline Matrix<float> sinusoid_table(std::size_t context, std::size_t d) {
    Matrix<float> t(context, d);
    for (std::size_t p = 0; p < context; ++p) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double angle = static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
            t(p, 2 * i) = static_cast<float>(std::sin(angle));
            t(p, 2 * i + 1) = static_cast<float>(std::cos(angle));
        }
    }
    return t;
}

// Shared transformer body. linear(x, layer, slot) and head(x) perform the
// matrix products; everything else (norms, attention, residuals) is fixed
// fp32 code with a defined summation order, so two backends that agree on
// their GEMMs agree on the logits bit for bit. Each row depends only on its
// own prefix, which makes a multi-token pass row-identical to the same
// tokens fed one at a time.
template <typename ParamsVec, typename Linear, typename Head>
Matrix<float> transformer_forward(const ModelConfig& cfg, const Matrix<Fp16Bits>& embedding, const ParamsVec& layers,
                                  std::span<const float> final_norm, const Matrix<float>& positions,
                                  std::span<const Token> tokens, KvCache& cache, Linear&& linear, Head&& head) {
    const std::size_t n = tokens.size(), d = cfg.d_model, heads = cfg.heads, dh = d / heads;
    if (n == 0) throw InvalidInputError("forward needs at least one token");
    cache.check_room(n);
    const std::size_t p0 = cache.size();

    Matrix<float> x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[i] >= cfg.vocab) throw InvalidInputError("token " + std::to_string(tokens[i]) + " outside vocabulary");
        for (std::size_t c = 0; c < d; ++c) x(i, c) = to_float_lut(embedding(tokens[i], c)) + positions(p0 + i, c);
    }

    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> scores(p0 + n);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& p = layers[l];
        const Matrix<Fp16Bits> h = rms_norm_fp16(x, p.attn_norm);
        const Matrix<float> q = linear(h, l, Slot::Query);
        const Matrix<float> k = linear(h, l, Slot::Key);
        const Matrix<float> v = linear(h, l, Slot::Value);
        for (std::size_t i = 0; i < n; ++i) {
            auto kd = cache.key(l, p0 + i);
            auto vd = cache.value(l, p0 + i);
            for (std::size_t c = 0; c < d; ++c) {
                kd[c] = fp16_from_float(k(i, c));
                vd[c] = fp16_from_float(v(i, c));
            }
        }

        Matrix<float> attn(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t span_len = p0 + i + 1;
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const std::size_t c0 = hh * dh;
                float best = -INFINITY;
                for (std::size_t j = 0; j < span_len; ++j) {
                    const auto kj = cache.key(l, j);
                    float s = 0.0f;
                    for (std::size_t t = 0; t < dh; ++t) s += q(i, c0 + t) * to_float_lut(kj[c0 + t]);
                    scores[j] = s * inv_sqrt;
                    best = std::max(best, scores[j]);
                }
                float denom = 0.0f;
                for (std::size_t j = 0; j < span_len; ++j) {
                    scores[j] = std::exp(scores[j] - best);
                    denom += scores[j];
                }
                for (std::size_t j = 0; j < span_len; ++j) {
                    const float pj = scores[j] / denom;
                    const auto vj = cache.value(l, j);
                    for (std::size_t t = 0; t < dh; ++t) attn(i, c0 + t) += pj * to_float_lut(vj[c0 + t]);
                }
            }
        }
        const Matrix<float> o = linear(to_fp16(attn), l, Slot::Output);
        for (std::size_t i = 0; i < x.size(); ++i) x.flat()[i] += o.flat()[i];

        const Matrix<Fp16Bits> h2 = rms_norm_fp16(x, p.ffn_norm);
        Matrix<float> u = linear(h2, l, Slot::Up);
        for (float& val : u.flat()) val = gelu(val);
        const Matrix<float> dn = linear(to_fp16(u), l, Slot::Down);
        for (std::size_t i = 0; i < x.size(); ++i) x.flat()[i] += dn.flat()[i];
    }

    Matrix<float> logits = head(rms_norm_fp16(x, final_norm));
    for (float& val : logits.flat()) val *= cfg.logit_scale;
    cache.advance(n);
    return logits;
}

}  // namespace detail

// A linear layer stored either packed (quantized) or as plain FP16.
using LinearWeights = std::variant<PackedTensor, Matrix<Fp16Bits>>;

class ToyModel {
public:
    static ToyModel from_weights(const ToyWeights& w) {
        w.cfg.validate();
        ToyModel m;
        m.cfg_ = w.cfg;
        m.embedding_ = w.embedding;
        m.final_norm_ = w.final_norm;
        m.positions_ = detail::sinusoid_table(w.cfg.context, w.cfg.d_model);
        const std::size_t gs = w.cfg.group_size;
        for (const auto& p : w.layers) {
            LayerParams<PackedTensor> q;
            q.query = quantize_tensor(p.query, gs);
            q.key = quantize_tensor(p.key, gs);
            q.value = quantize_tensor(p.value, gs);
            q.output = quantize_tensor(p.output, gs);
            q.up = quantize_tensor(p.up, gs);
            q.down = quantize_tensor(p.down, gs);
            q.attn_norm = p.attn_norm;
            q.ffn_norm = p.ffn_norm;
            m.layers_.push_back(std::move(q));
        }
        if (w.cfg.quantize_head) {
            m.head_ = quantize_tensor(w.head, gs);
        } else {
            m.head_ = w.head;
        }
        return m;
    }

    // Reassembles a model from already-packed parameters (model files).
    static ToyModel from_parts(const ModelConfig& cfg, Matrix<Fp16Bits> embedding, std::vector<LayerParams<PackedTensor>> layers,
                               std::vector<float> final_norm, LinearWeights head) {
        cfg.validate();
        ToyModel m;
        m.cfg_ = cfg;
        m.embedding_ = std::move(embedding);
        m.layers_ = std::move(layers);
        m.final_norm_ = std::move(final_norm);
        m.head_ = std::move(head);
        m.positions_ = detail::sinusoid_table(cfg.context, cfg.d_model);
        m.check_shapes();
        return m;
    }

    static ToyModel create(const ModelConfig& cfg) { return from_weights(generate_weights(cfg)); }

    const ModelConfig& config() const noexcept { return cfg_; }
    std::size_t context() const noexcept { return cfg_.context; }
    std::size_t vocab() const noexcept { return cfg_.vocab; }
    KvCache make_cache() const { return KvCache(cfg_.layers, cfg_.context, cfg_.d_model); }

    const Matrix<Fp16Bits>& embedding() const noexcept { return embedding_; }
    const std::vector<LayerParams<PackedTensor>>& layers() const noexcept { return layers_; }
    const std::vector<float>& final_norm() const noexcept { return final_norm_; }
    const LinearWeights& head() const noexcept { return head_; }

    // Verification pass over tokens.size() positions: (n x vocab) logits.
    Matrix<float> forward_full(std::span<const Token> tokens, KvCache& cache, TrafficCounters* counters = nullptr) const {
        return detail::transformer_forward(
            cfg_, embedding_, layers_, final_norm_, positions_, tokens, cache,
            [&](const Matrix<Fp16Bits>& x, std::size_t l, Slot s) { return gemm_full(x, layers_[l].get(s), counters); },
            [&](const Matrix<Fp16Bits>& x) { return apply_head(x, false, counters); });
    }

    // Draft pass for a single token.
    std::vector<float> forward_draft(Token token, KvCache& cache, TrafficCounters* counters = nullptr) const {
        const Token t[1] = {token};
        Matrix<float> logits = detail::transformer_forward(
            cfg_, embedding_, layers_, final_norm_, positions_, t, cache,
            [&](const Matrix<Fp16Bits>& x, std::size_t l, Slot s) { return gemm_draft(x, layers_[l].get(s), counters); },
            [&](const Matrix<Fp16Bits>& x) { return apply_head(x, true, counters); });
        auto row = logits.row(0);
        return {row.begin(), row.end()};
    }

    // Number of weights stored in packed form.
    std::size_t packed_weight_count() const noexcept {
        std::size_t n = 0;
        for (const auto& p : layers_) {
            for (Slot s : {Slot::Query, Slot::Key, Slot::Value, Slot::Output, Slot::Up, Slot::Down}) n += p.get(s).size();
        }
        if (const auto* h = std::get_if<PackedTensor>(&head_)) n += h->size();
        return n;
    }

private:
    Matrix<float> apply_head(const Matrix<Fp16Bits>& x, bool draft, TrafficCounters* counters) const {
        if (const auto* p = std::get_if<PackedTensor>(&head_)) return draft ? gemm_draft(x, *p, counters) : gemm_full(x, *p, counters);
        return gemm_fp16(x, std::get<Matrix<Fp16Bits>>(head_), counters);
    }

    void check_shapes() const {
        const std::size_t d = cfg_.d_model;
        auto expect = [](bool ok, const char* what) {
            if (!ok) throw DimensionError(std::string("model shape mismatch: ") + what);
        };
        expect(embedding_.rows() == cfg_.vocab && embedding_.cols() == d, "embedding");
        expect(layers_.size() == cfg_.layers, "layer count");
        expect(final_norm_.size() == d, "final norm");
        for (const auto& p : layers_) {
            for (Slot s : {Slot::Query, Slot::Key, Slot::Value, Slot::Output}) expect(p.get(s).rows() == d && p.get(s).cols() == d, "attention");
            expect(p.up.rows() == d && p.up.cols() == cfg_.d_ff, "up projection");
            expect(p.down.rows() == cfg_.d_ff && p.down.cols() == d, "down projection");
            expect(p.attn_norm.size() == d && p.ffn_norm.size() == d, "norm");
        }
        std::visit([&](const auto& h) { expect(h.rows() == d && h.cols() == cfg_.vocab, "head"); }, head_);
    }

    ModelConfig cfg_;
    Matrix<Fp16Bits> embedding_;
    std::vector<LayerParams<PackedTensor>> layers_;
    std::vector<float> final_norm_;
    LinearWeights head_;
    Matrix<float> positions_;
};

// Forward pass over never-quantized FP16 weights with the same fp32 math.
inline Matrix<float> reference_forward(const ToyWeights& w, std::span<const Token> tokens, KvCache& cache) {
    static thread_local Matrix<float> positions;
    if (positions.rows() != w.cfg.context || positions.cols() != w.cfg.d_model) {
        positions = detail::sinusoid_table(w.cfg.context, w.cfg.d_model);
    }
    return detail::transformer_forward(
        w.cfg, w.embedding, w.layers, w.final_norm, positions, tokens, cache,
        [&](const Matrix<Fp16Bits>& x, std::size_t l, Slot s) { return gemm_fp16(x, w.layers[l].get(s)); },
        [&](const Matrix<Fp16Bits>& x) { return gemm_fp16(x, w.head); });
}

// Greedy token choice; ties go to the lowest index.
inline Token argmax(std::span<const float> logits) noexcept {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<Token>(best);
}

// Largest softmax probability, computed in fp32 with max subtraction.
inline float max_probability(std::span<const float> logits) noexcept {
    float best = logits[0];
    for (float v : logits) best = std::max(best, v);
    float denom = 0.0f;
    for (float v : logits) denom += std::exp(v - best);
    return 1.0f / denom;
}

}  // namespace speq::lm
