#pragma once

// Command-line front end. run() takes the argument list and two streams so
// tests can drive it in-process; main() only forwards to it.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage or I/O error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "speq/speq.hpp"

namespace speq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFailed = 1;
inline constexpr int kExitUsage = 2;

struct Options {
    bool no_timestamp = false;

    struct {
        std::string in, out, format = "e3m0-remap";
        std::size_t group_size = kDefaultGroupSize;
        bool bf16 = false;
        bool compare = false;
    } quantize;

    struct {
        std::string file;
    } inspect;

    struct {
        std::string file;
    } roundtrip;

    struct {
        std::string mode = "full", a, w, out;
        unsigned threads = 1;
    } gemm;

    struct {
        std::uint64_t seed = 0;
        std::optional<std::uint64_t> model_seed;
        double gamma = 0.6;
        unsigned max_draft_len = 16;
        std::size_t gen_len = 256;
        std::size_t prompts = 1;
        std::size_t prompt_len = 16;
        float logit_scale = lm::ModelConfig{}.logit_scale;
        std::string model, save_model;
    } specdec;

    struct {
        double r = 0.977;
        unsigned L = 16;
        double td_ratio = 0.25;
        double tv_ratio = 1.0;
        std::uint64_t mc_rounds = 1000000;
        std::uint64_t mc_seed = 0;
        std::size_t pe_n = 0, pe_k = 0;
    } perf;

    struct {
        std::uint64_t m = 1, n = 1024, k = 4096;
        std::string mode = "full";
        std::uint64_t fill = 0;
        bool functional = false;
        std::uint64_t seed = 0;
    } simulate;
};

namespace detail {

inline bool is_container(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return bytes.size() >= io::kTensorMagic.size() &&
           std::equal(io::kTensorMagic.begin(), io::kTensorMagic.end(), bytes.begin());
}

inline pe::GemmMode parse_mode(const std::string& s) { return s == "draft" ? pe::GemmMode::Draft : pe::GemmMode::Full; }

// Loads a weight tensor from .npy. BF16 input goes through the BF16 outlier
// step and the exponent clamp; the returned scale is the one applied there.
inline std::pair<Matrix<Fp16Bits>, float> load_weights(const std::string& path, bool bf16) {
    const io::NpyArray a = io::read_npy(path);
    if (!bf16) return {io::to_fp16_matrix(a), 1.0f};
    auto [scaled, scale] = handle_outliers_bf16(io::to_bf16_matrix(a));
    return {ingest_bf16(scaled), scale};
}

inline PackedTensor with_tensor_scale(const PackedTensor& p, float scale) {
    const auto s = p.group_scales();
    const auto q = p.wq_stream();
    const auto r = p.wr_stream();
    return PackedTensor(p.rows(), p.cols(), p.group_size(), p.format(), scale, {s.begin(), s.end()}, {q.begin(), q.end()},
                        {r.begin(), r.end()});
}

inline Matrix<Fp16Bits> random_activations(std::size_t m, std::size_t k, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<Fp16Bits> a(m, k);
    for (auto& x : a.flat()) x = fp16_from_double(dist(rng));
    return a;
}

inline bool same_bits(const Matrix<float>& x, const Matrix<float>& y) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(x.flat()[i]) != std::bit_cast<std::uint32_t>(y.flat()[i])) return false;
    }
    return true;
}

inline void add_cycle_report(Record& r, const pe::CycleReport& c) {
    r.add("mode", pe::to_string(c.mode))
        .add("m", c.m)
        .add("n", c.n)
        .add("k", c.k)
        .add("macs", c.macs)
        .add("lanes", c.lanes)
        .add("mac_cycles", c.mac_cycles)
        .add("cycles", c.cycles)
        .add("pe_ops", c.pe_ops)
        .add("weight_bytes", c.weight_bytes)
        .add("scale_bytes", c.scale_bytes)
        .add("activation_bytes", c.activation_bytes)
        .add("seconds", c.seconds);
}

// Each command fills the report and returns an exit code.

inline int cmd_quantize(const Options& o, Report& rep) {
    const QuantFormat fmt = parse_quant_format(o.quantize.format);
    auto [w, bf16_scale] = load_weights(o.quantize.in, o.quantize.bf16);
    PackedTensor p = quantize_tensor(w, o.quantize.group_size, fmt);
    if (o.quantize.bf16) p = with_tensor_scale(p, bf16_scale);
    io::write_container(o.quantize.out, p);

    const Matrix<Fp16Bits> reference = handle_outliers(w).weights;
    const double n = static_cast<double>(p.size());
    rep.record("quantize")
        .add("in", o.quantize.in)
        .add("out", o.quantize.out)
        .add("format", to_string(fmt))
        .add("rows", p.rows())
        .add("cols", p.cols())
        .add("group_size", p.group_size())
        .add("tensor_scale", p.tensor_scale())
        .add("mse", reconstruction_mse(reference, p))
        .add("payload_bytes", p.payload_bytes())
        .add("scale_bytes", p.scale_bytes())
        .add("payload_bits_per_weight", 8.0 * static_cast<double>(p.payload_bytes()) / n)
        .add("draft_bits_per_weight", 8.0 * static_cast<double>(p.wq_stream().size()) / n)
        .add("scale_overhead_bits_per_weight", 8.0 * static_cast<double>(p.scale_bytes()) / n);
    if (o.quantize.compare) {
        for (QuantFormat f : {QuantFormat::E3M0Remap, QuantFormat::E3M0Naive, QuantFormat::E2M1, QuantFormat::E1M2}) {
            const PackedTensor q = quantize_tensor(w, o.quantize.group_size, f);
            rep.record("mse").add("format", to_string(f)).add("mse", reconstruction_mse(reference, q));
        }
    }
    return kExitOk;
}

inline int cmd_inspect(const Options& o, Report& rep) {
    const std::string& path = o.inspect.file;
    Matrix<Fp16Bits> w;
    std::string source;
    if (is_container(path)) {
        w = dequantize_full(io::read_container(path));
        source = "container";
    } else {
        w = io::to_fp16_matrix(io::read_npy(path));
        source = "npy";
    }
    const ExpHistogram h = exponent_histogram(w.flat());
    rep.record("histogram").add("file", path).add("source", source).add("elements", h.total).add("frac_unused", h.frac_unused);
    for (unsigned e = 0; e < 32; ++e) {
        const double frac = h.total ? static_cast<double>(h.counts[e]) / static_cast<double>(h.total) : 0.0;
        rep.record("exp").add("exp5", e).add("count", h.counts[e]).add("fraction", frac);
    }
    return kExitOk;
}

// Without a file: all 2^16 FP16 patterns whose top exponent bit is clear.
// With an .npy file: quantize, reconstruct, serialize and re-read.
// With a container: reconstruct, re-encode, and re-serialize.
inline int cmd_roundtrip(const Options& o, Report& rep) {
    const std::string& path = o.roundtrip.file;
    std::uint64_t checked = 0, mismatches = 0;
    std::string mode;
    if (path.empty()) {
        mode = "exhaustive";
        for (unsigned bits = 0; bits < 65536; ++bits) {
            const Fp16Bits x{static_cast<std::uint16_t>(bits)};
            if (x.exp5() > 15) continue;
            ++checked;
            if (bsfp::full_value(bsfp::encode(x)) != x) ++mismatches;
        }
    } else if (is_container(path)) {
        mode = "container";
        const auto bytes = io::read_file(path);
        const PackedTensor p = io::deserialize(bytes);
        if (io::serialize(p) != bytes) ++mismatches;
        if (p.bit_sharing()) {
            const Matrix<Fp16Bits> w = dequantize_full(p);
            for (std::size_t n = 0; n < p.cols(); ++n) {
                for (std::size_t k = 0; k < p.rows(); ++k) {
                    ++checked;
                    if (bsfp::encode(w(k, n)) != p.word(k, n)) ++mismatches;
                }
            }
        }
    } else {
        mode = "npy";
        const Matrix<Fp16Bits> w = io::to_fp16_matrix(io::read_npy(path));
        const Matrix<Fp16Bits> scaled = handle_outliers(w).weights;
        const PackedTensor p = quantize_tensor(w);
        const PackedTensor back = io::deserialize(io::serialize(p));
        const Matrix<Fp16Bits> r = dequantize_full(back);
        for (std::size_t i = 0; i < r.size(); ++i) {
            ++checked;
            if (r.flat()[i] != scaled.flat()[i]) ++mismatches;
        }
    }
    rep.record("roundtrip").add("mode", mode).add("checked", checked).add("mismatches", mismatches).add("ok", mismatches == 0);
    return mismatches == 0 ? kExitOk : kExitVerifyFailed;
}

inline int cmd_gemm(const Options& o, Report& rep) {
    const Matrix<Fp16Bits> a = io::to_fp16_matrix(io::read_npy(o.gemm.a));
    const PackedTensor w = io::read_container(o.gemm.w);
    TrafficCounters c;
    const bool draft = o.gemm.mode == "draft";
    const Matrix<float> out = draft ? gemm_draft(a, w, &c, o.gemm.threads) : gemm_full(a, w, &c, o.gemm.threads);
    rep.record("gemm")
        .add("mode", o.gemm.mode)
        .add("m", out.rows())
        .add("n", out.cols())
        .add("k", a.cols())
        .add("weight_bytes", c.weight_bytes())
        .add("scale_bytes", c.scale_bytes)
        .add("activation_bytes", c.activation_bytes)
        .add("output_bytes", c.output_bytes);
    if (!o.gemm.out.empty()) {
        io::write_file(o.gemm.out, io::encode_npy(out));
        rep.record("output").add("file", o.gemm.out);
    } else {
        for (std::size_t m = 0; m < out.rows(); ++m) {
            std::string values;
            for (std::size_t n = 0; n < out.cols(); ++n) {
                if (n) values += ',';
                values += fmt::format("{}", out(m, n));
            }
            rep.record("output").add("row", m).add("values", values);
        }
    }
    return kExitOk;
}

inline int cmd_specdec(const Options& o, Report& rep) {
    const auto& s = o.specdec;
    if (s.prompts == 0) throw InvalidInputError("--prompts must be at least 1");
    if (s.prompt_len == 0) throw InvalidInputError("--prompt-len must be at least 1");
    lm::ToyModel model = [&] {
        if (!s.model.empty()) return io::load_model(s.model);
        lm::ModelConfig cfg;
        cfg.seed = s.model_seed.value_or(s.seed);
        cfg.logit_scale = s.logit_scale;
        return lm::ToyModel::create(cfg);
    }();
    if (!s.save_model.empty()) io::save_model(s.save_model, model);

    specdec::SpecDecConfig cfg{s.max_draft_len, s.gamma, s.seed};
    std::mt19937_64 rng(s.seed);
    std::uniform_int_distribution<lm::Token> tok(0, static_cast<lm::Token>(model.vocab() - 1));
    specdec::SpecDecStats total;
    std::uint64_t mismatches = 0, kv_mismatches = 0;
    for (std::size_t i = 0; i < s.prompts; ++i) {
        std::vector<lm::Token> prompt(s.prompt_len);
        for (auto& t : prompt) t = tok(rng);
        const auto greedy = specdec::greedy_generate(model, prompt, s.gen_len);
        const auto spec = specdec::speculative_generate(model, prompt, cfg, s.gen_len);
        if (greedy.tokens != spec.tokens) ++mismatches;
        if (greedy.kv_high_water != spec.kv_high_water) ++kv_mismatches;
        total += spec.stats;
    }
    rep.record("specdec")
        .add("seed", s.seed)
        .add("model_seed", model.config().seed)
        .add("gamma", s.gamma)
        .add("max_draft_len", s.max_draft_len)
        .add("gen_len", s.gen_len)
        .add("prompts", s.prompts)
        .add("prompt_len", s.prompt_len)
        .add("rounds", total.rounds)
        .add("proposed", total.proposed)
        .add("accepted", total.accepted)
        .add("accept_rate", total.accept_rate())
        .add("mean_draft_len", total.mean_draft_len())
        .add("mean_accept_len", total.mean_accept_len())
        .add("tokens_generated", total.tokens_generated)
        .add("mismatches", mismatches)
        .add("kv_mismatches", kv_mismatches)
        .add("lossless", mismatches == 0 && kv_mismatches == 0);
    return mismatches == 0 && kv_mismatches == 0 ? kExitOk : kExitVerifyFailed;
}

inline int cmd_perf(const Options& o, Report& rep) {
    const auto& p = o.perf;
    double td = p.td_ratio, tv = p.tv_ratio;
    std::string source = "flags";
    if (p.pe_n || p.pe_k) {
        if (!p.pe_n || !p.pe_k) throw InvalidInputError("--pe-n and --pe-k go together");
        // Memory-bound decoding: a step costs the weight bytes it streams.
        const pe::PeConfig cfg;
        const auto full = pe::estimate_cycles(1, p.pe_n, p.pe_k, pe::GemmMode::Full, cfg);
        auto draft = pe::estimate_cycles(1, p.pe_n, p.pe_k, pe::GemmMode::Draft, cfg);
        const double groups = std::ceil(static_cast<double>(p.pe_k) / static_cast<double>(kDefaultGroupSize));
        draft.scale_bytes = 4.0 * groups * static_cast<double>(p.pe_n);
        td = (draft.weight_bytes + draft.scale_bytes) / full.weight_bytes;
        tv = 1.0;
        source = "pe_model_traffic";
    }
    const specdec::PerfParams perf{td, tv, 1.0};
    const double la = specdec::expected_accept_length(p.r, p.L);
    const auto mc = specdec::simulate_accept_length(p.r, p.L, p.mc_rounds, p.mc_seed);
    rep.record("perf")
        .add("r", p.r)
        .add("L", p.L)
        .add("td_ratio", td)
        .add("tv_ratio", tv)
        .add("source", source)
        .add("accept_len", la)
        .add("speedup", specdec::expected_speedup(p.r, p.L, perf))
        .add("speedup_approx", specdec::expected_speedup_approx(p.r, p.L, td));
    rep.record("montecarlo")
        .add("rounds", mc.rounds)
        .add("seed", p.mc_seed)
        .add("mean_accept_len", mc.mean_accept_len)
        .add("std_error", mc.std_error)
        .add("rel_diff", std::fabs(mc.mean_accept_len - la) / la);
    return kExitOk;
}

inline int cmd_simulate(const Options& o, Report& rep) {
    const auto& s = o.simulate;
    pe::PeConfig cfg;
    cfg.pipeline_fill = s.fill;
    const pe::GemmMode mode = parse_mode(s.mode);
    if (!s.functional) {
        Record& r = rep.record("cycles");
        add_cycle_report(r, pe::estimate_cycles(s.m, s.n, s.k, mode, cfg));
        return kExitOk;
    }
    std::mt19937_64 rng(s.seed);
    const Matrix<Fp16Bits> a = random_activations(s.m, s.k, rng);
    const PackedTensor w = quantize_tensor(lm::random_fp16(s.k, s.n, 0.02, rng));
    const pe::SimResult sim = pe::simulate_gemm(a, w, mode, cfg);
    const Matrix<float> ref = mode == pe::GemmMode::Draft ? gemm_draft(a, w) : gemm_full(a, w);
    const bool same = same_bits(sim.outputs, ref);
    Record& r = rep.record("cycles");
    add_cycle_report(r, sim.report);
    r.add("bit_identical", same);
    return same ? kExitOk : kExitVerifyFailed;
}

inline std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Bit-sharing weight format, dual-path kernels and self-speculative decoding tools", "speq"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_flag("--no-timestamp", o.no_timestamp, "Omit the timestamp record (for byte-level comparisons)");

    auto* quantize = app.add_subcommand("quantize", "Quantize an .npy weight tensor into a container");
    quantize->add_option("--in", o.quantize.in, "Input .npy (K x N, <f2/<f4/<f8, or <u2 with --bf16)")->required()->check(CLI::ExistingFile);
    quantize->add_option("--out", o.quantize.out, "Output container")->required();
    quantize->add_option("--format", o.quantize.format, "e3m0-remap | e3m0 | e2m1 | e1m2")
        ->check(CLI::IsMember({"e3m0-remap", "e3m0", "e2m1", "e1m2"}));
    quantize->add_option("--group-size", o.quantize.group_size, "Reduction indices per scale group")->check(CLI::PositiveNumber);
    quantize->add_flag("--bf16", o.quantize.bf16, "Input holds BF16 bit patterns");
    quantize->add_flag("--compare", o.quantize.compare, "Also report the MSE of every format");

    auto* inspect = app.add_subcommand("inspect", "Exponent histogram of an .npy tensor or container");
    inspect->add_option("file", o.inspect.file)->required()->check(CLI::ExistingFile);

    auto* roundtrip = app.add_subcommand("roundtrip", "Bit-exactness check (exhaustive when no file is given)");
    roundtrip->add_option("file", o.roundtrip.file)->check(CLI::ExistingFile);

    auto* gemm = app.add_subcommand("gemm", "Run a draft or full GEMM");
    gemm->add_option("--mode", o.gemm.mode)->check(CLI::IsMember({"draft", "full"}));
    gemm->add_option("--a", o.gemm.a, "Activations .npy (M x K)")->required()->check(CLI::ExistingFile);
    gemm->add_option("--w", o.gemm.w, "Weight container (K x N)")->required()->check(CLI::ExistingFile);
    gemm->add_option("--out", o.gemm.out, "Write outputs as <f4 .npy instead of printing them");
    gemm->add_option("--threads", o.gemm.threads)->check(CLI::PositiveNumber);

    auto* sd = app.add_subcommand("specdec", "Speculative vs greedy decoding on the toy model");
    sd->add_option("--seed", o.specdec.seed, "Seed for prompts (and the model unless --model-seed)");
    sd->add_option("--model-seed", o.specdec.model_seed);
    sd->add_option("--gamma", o.specdec.gamma)->check(CLI::Range(0.0, 1.0));
    sd->add_option("--max-draft-len", o.specdec.max_draft_len)->check(CLI::PositiveNumber);
    sd->add_option("--gen-len", o.specdec.gen_len)->check(CLI::PositiveNumber);
    sd->add_option("--prompts", o.specdec.prompts)->check(CLI::PositiveNumber);
    sd->add_option("--prompt-len", o.specdec.prompt_len)->check(CLI::PositiveNumber);
    sd->add_option("--logit-scale", o.specdec.logit_scale);
    sd->add_option("--model", o.specdec.model, "Load a saved model instead of building one")->check(CLI::ExistingFile);
    sd->add_option("--save-model", o.specdec.save_model);

    auto* perf = app.add_subcommand("perf", "Accept-length and speedup model with a Monte-Carlo check");
    perf->add_option("--r", o.perf.r)->check(CLI::Range(0.0, 1.0));
    perf->add_option("--L", o.perf.L)->check(CLI::PositiveNumber);
    perf->add_option("--td-ratio", o.perf.td_ratio, "T_d / T_ar")->check(CLI::PositiveNumber);
    perf->add_option("--tv-ratio", o.perf.tv_ratio, "T_v / T_ar")->check(CLI::PositiveNumber);
    perf->add_option("--mc-rounds", o.perf.mc_rounds)->check(CLI::PositiveNumber);
    perf->add_option("--mc-seed", o.perf.mc_seed);
    perf->add_option("--pe-n", o.perf.pe_n, "Derive ratios from PE-model traffic for an N x K layer");
    perf->add_option("--pe-k", o.perf.pe_k);

    auto* sim = app.add_subcommand("simulate", "PE-array cycle report");
    sim->add_option("--m", o.simulate.m)->check(CLI::PositiveNumber);
    sim->add_option("--n", o.simulate.n)->check(CLI::PositiveNumber);
    sim->add_option("--k", o.simulate.k)->check(CLI::PositiveNumber);
    sim->add_option("--mode", o.simulate.mode)->check(CLI::IsMember({"draft", "full"}));
    sim->add_option("--fill", o.simulate.fill, "Pipeline fill cycles per GEMM");
    sim->add_flag("--functional", o.simulate.functional, "Also run random operands and compare with the kernels");
    sim->add_option("--seed", o.simulate.seed);

    std::vector<const char*> argv;
    argv.push_back("speq");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    Report rep;
    if (!o.no_timestamp) rep.record("run").add("timestamp", detail::timestamp());
    int code = kExitOk;
    try {
        if (*quantize) code = detail::cmd_quantize(o, rep);
        else if (*inspect) code = detail::cmd_inspect(o, rep);
        else if (*roundtrip) code = detail::cmd_roundtrip(o, rep);
        else if (*gemm) code = detail::cmd_gemm(o, rep);
        else if (*sd) code = detail::cmd_specdec(o, rep);
        else if (*perf) code = detail::cmd_perf(o, rep);
        else if (*sim) code = detail::cmd_simulate(o, rep);
    } catch (const std::exception& e) {
        rep.write(out);
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    rep.write(out);
    return code;
}

}  // namespace speq::cli
