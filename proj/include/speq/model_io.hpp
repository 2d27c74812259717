#pragma once

// Toy model files: "SPEQM1", config, FP16 embedding, then for each layer its
// norms and six length-prefixed SPEQ tensor containers, the final norm and
// the head (container, or raw FP16 when the head is not quantized), and a
// trailing crc32 over everything after the magic.

#include <cstring>
#include <filesystem>
#include <string_view>

#include "speq/container.hpp"
#include "speq/toy_lm.hpp"

namespace speq::io {

inline constexpr std::string_view kModelMagic = "SPEQM1";

namespace detail {

inline void put_blob(ByteWriter& w, std::span<const std::uint8_t> blob) {
    w.u32(static_cast<std::uint32_t>(blob.size()));
    w.bytes(blob);
}

inline void put_floats(ByteWriter& w, std::span<const float> v) {
    for (float f : v) w.f32(f);
}

inline std::vector<float> get_floats(ByteReader& r, std::size_t n) {
    std::vector<float> v(n);
    for (float& f : v) f = r.f32();
    return v;
}

inline void put_fp16(ByteWriter& w, const Matrix<Fp16Bits>& m) {
    for (Fp16Bits h : m.flat()) {
        w.u8(static_cast<std::uint8_t>(h.bits & 0xFFu));
        w.u8(static_cast<std::uint8_t>(h.bits >> 8));
    }
}

inline Matrix<Fp16Bits> get_fp16(ByteReader& r, std::size_t rows, std::size_t cols) {
    Matrix<Fp16Bits> m(rows, cols);
    for (auto& h : m.flat()) {
        const auto b = r.bytes(2);
        h.bits = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    return m;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const lm::ToyModel& m) {
    const lm::ModelConfig& c = m.config();
    ByteWriter w;
    w.text(kModelMagic);
    for (std::size_t v : {c.vocab, c.d_model, c.layers, c.heads, c.d_ff, c.context, c.group_size}) {
        w.u32(static_cast<std::uint32_t>(v));
    }
    w.u64(c.seed);
    w.f64(c.weight_std);
    w.f32(c.logit_scale);
    w.u8(c.quantize_head ? 1 : 0);
    detail::put_fp16(w, m.embedding());
    for (const auto& p : m.layers()) {
        detail::put_floats(w, p.attn_norm);
        detail::put_floats(w, p.ffn_norm);
        for (lm::Slot s : {lm::Slot::Query, lm::Slot::Key, lm::Slot::Value, lm::Slot::Output, lm::Slot::Up, lm::Slot::Down}) {
            detail::put_blob(w, serialize(p.get(s)));
        }
    }
    detail::put_floats(w, m.final_norm());
    if (const auto* h = std::get_if<PackedTensor>(&m.head())) {
        detail::put_blob(w, serialize(*h));
    } else {
        detail::put_fp16(w, std::get<Matrix<Fp16Bits>>(m.head()));
    }
    const auto payload = std::span<const std::uint8_t>(w.data()).subspan(kModelMagic.size());
    w.u32(crc32(payload));
    return w.take();
}

inline lm::ToyModel deserialize_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kModelMagic.size() || std::memcmp(bytes.data(), kModelMagic.data(), kModelMagic.size()) != 0) {
        throw BadMagicError("not a SPEQ model file");
    }
    const auto body = bytes.subspan(kModelMagic.size());
    if (body.size() < 4) throw TruncatedError("model file too short");
    {
        ByteReader tail(body.last(4));
        if (crc32(body.first(body.size() - 4)) != tail.u32()) throw ChecksumError("model file checksum mismatch");
    }
    ByteReader r(body.first(body.size() - 4));
    lm::ModelConfig c;
    c.vocab = r.u32();
    c.d_model = r.u32();
    c.layers = r.u32();
    c.heads = r.u32();
    c.d_ff = r.u32();
    c.context = r.u32();
    c.group_size = r.u32();
    c.seed = r.u64();
    c.weight_std = r.f64();
    c.logit_scale = r.f32();
    c.quantize_head = r.u8() != 0;
    c.validate();

    auto get_tensor = [&r] {
        const std::uint32_t len = r.u32();
        return deserialize(r.bytes(len));
    };
    Matrix<Fp16Bits> embedding = detail::get_fp16(r, c.vocab, c.d_model);
    std::vector<lm::LayerParams<PackedTensor>> layers(c.layers);
    for (auto& p : layers) {
        p.attn_norm = detail::get_floats(r, c.d_model);
        p.ffn_norm = detail::get_floats(r, c.d_model);
        p.query = get_tensor();
        p.key = get_tensor();
        p.value = get_tensor();
        p.output = get_tensor();
        p.up = get_tensor();
        p.down = get_tensor();
    }
    std::vector<float> final_norm = detail::get_floats(r, c.d_model);
    lm::LinearWeights head;
    if (c.quantize_head) {
        head = get_tensor();
    } else {
        head = detail::get_fp16(r, c.d_model, c.vocab);
    }
    if (r.remaining() != 0) throw MalformedFileError("trailing bytes in model file");
    return lm::ToyModel::from_parts(c, std::move(embedding), std::move(layers), std::move(final_norm), std::move(head));
}

inline void save_model(const std::filesystem::path& path, const lm::ToyModel& m) { write_file(path, serialize_model(m)); }

inline lm::ToyModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace speq::io
