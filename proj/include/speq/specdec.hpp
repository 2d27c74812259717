#pragma once

// Self-speculative decoding with early exit, plus the analytic
// accept-length / speedup model and a Monte-Carlo check of it.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "speq/errors.hpp"
#include "speq/matrix.hpp"
#include "speq/toy_lm.hpp"

namespace speq::specdec {

using lm::Token;

struct SpecDecConfig {
    unsigned max_draft_len = 16;
    double gamma = 0.6;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_draft_len < 1) throw InvalidInputError("max draft length must be at least 1");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidInputError("gamma must lie in [0, 1]");
    }
};

struct SpecDecStats {
    std::uint64_t rounds = 0;            // verification passes
    std::uint64_t proposed = 0;          // draft tokens sent to verification
    std::uint64_t accepted = 0;          // draft tokens confirmed
    std::uint64_t round_tokens = 0;      // tokens emitted by rounds (accepted + 1 each)
    std::uint64_t tokens_generated = 0;  // includes the token produced by prefill

    // Zero when nothing was proposed.
    double accept_rate() const noexcept { return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0; }
    double mean_draft_len() const noexcept { return rounds ? static_cast<double>(proposed) / static_cast<double>(rounds) : 0.0; }
    // Tokens per verification round, bonus token included (comparable to L_a).
    double mean_accept_len() const noexcept { return rounds ? static_cast<double>(round_tokens) / static_cast<double>(rounds) : 0.0; }

    SpecDecStats& operator+=(const SpecDecStats& o) noexcept {
        rounds += o.rounds;
        proposed += o.proposed;
        accepted += o.accepted;
        round_tokens += o.round_tokens;
        tokens_generated += o.tokens_generated;
        return *this;
    }
};

struct PerfParams {
    double t_draft = 0.25;   // one draft token
    double t_verify = 1.0;   // one verification pass
    double t_ar = 1.0;       // one autoregressive full-model token

    void validate() const {
        if (!(t_draft > 0.0 && t_verify > 0.0 && t_ar > 0.0)) throw InvalidInputError("perf times must be positive");
    }
};

inline void check_domain(double r, unsigned L) {
    if (!(r >= 0.0 && r <= 1.0)) throw InvalidInputError("accept rate must lie in [0, 1]");
    if (L < 1) throw InvalidInputError("draft length must be at least 1");
}

// L_a = (1 - r^(L+1)) / (1 - r), with the r = 1 limit L + 1.
inline double expected_accept_length(double r, unsigned L) {
    check_domain(r, L);
    if (r == 1.0) return static_cast<double>(L) + 1.0;
    return (1.0 - std::pow(r, static_cast<double>(L) + 1.0)) / (1.0 - r);
}

inline double expected_speedup(double r, unsigned L, const PerfParams& perf) {
    perf.validate();
    return expected_accept_length(r, L) * perf.t_ar / (static_cast<double>(L) * perf.t_draft + perf.t_verify);
}

// Speedup with T_v taken equal to T_ar.
inline double expected_speedup_approx(double r, unsigned L, double draft_ratio) {
    if (!(draft_ratio > 0.0)) throw InvalidInputError("draft time ratio must be positive");
    return expected_accept_length(r, L) / (static_cast<double>(L) * draft_ratio + 1.0);
}

struct MonteCarloResult {
    std::uint64_t rounds = 0;
    double mean_accept_len = 0.0;
    double stddev = 0.0;
    double std_error = 0.0;
};

// Rounds of i.i.d. Bernoulli(r) acceptance: drafts are accepted until the
// first rejection or L acceptances, then one more token is emitted.
inline MonteCarloResult simulate_accept_length(double r, unsigned L, std::uint64_t rounds, std::uint64_t seed) {
    check_domain(r, L);
    if (rounds == 0) throw InvalidInputError("need at least one round");
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution accept(r);
    double sum = 0.0, sum_sq = 0.0;
    for (std::uint64_t i = 0; i < rounds; ++i) {
        unsigned a = 0;
        while (a < L && accept(rng)) ++a;
        const double emitted = a + 1.0;
        sum += emitted;
        sum_sq += emitted * emitted;
    }
    MonteCarloResult res;
    res.rounds = rounds;
    res.mean_accept_len = sum / static_cast<double>(rounds);
    const double var = std::max(0.0, sum_sq / static_cast<double>(rounds) - res.mean_accept_len * res.mean_accept_len);
    res.stddev = std::sqrt(var);
    res.std_error = res.stddev / std::sqrt(static_cast<double>(rounds));
    return res;
}

// What the controller needs from a model: a cache factory, a multi-token
// verification pass and a single-token draft pass over that same cache.
template <typename M>
concept DecoderModel = requires(const M& m, typename std::remove_cvref_t<decltype(m.make_cache())>& cache,
                                std::span<const Token> tokens, Token t) {
    { m.make_cache() };
    { m.context() } -> std::convertible_to<std::size_t>;
    { m.forward_full(tokens, cache) } -> std::same_as<Matrix<float>>;
    { m.forward_draft(t, cache) } -> std::same_as<std::vector<float>>;
    { cache.size() } -> std::convertible_to<std::size_t>;
    { cache.high_water() } -> std::convertible_to<std::size_t>;
    cache.truncate(std::size_t{});
};

struct Generation {
    std::vector<Token> tokens;  // generated tokens only, prompt excluded
    SpecDecStats stats;
    std::size_t kv_high_water = 0;
};

inline void check_request(std::size_t prompt_len, std::size_t gen_len, std::size_t context) {
    if (prompt_len == 0) throw InvalidInputError("prompt must not be empty");
    if (gen_len == 0) throw InvalidInputError("gen_len must be at least 1");
    if (prompt_len + gen_len > context) {
        throw ContextOverflowError("prompt (" + std::to_string(prompt_len) + ") + gen_len (" + std::to_string(gen_len) +
                                   ") exceeds context " + std::to_string(context));
    }
}

// Plain autoregressive decoding with the full model: the losslessness oracle.
template <DecoderModel Model>
Generation greedy_generate(const Model& model, std::span<const Token> prompt, std::size_t gen_len) {
    check_request(prompt.size(), gen_len, model.context());
    auto cache = model.make_cache();
    Generation out;
    Matrix<float> logits = model.forward_full(prompt, cache);
    Token next = lm::argmax(logits.row(logits.rows() - 1));
    out.tokens.push_back(next);
    while (out.tokens.size() < gen_len) {
        const Token t[1] = {next};
        logits = model.forward_full(t, cache);
        next = lm::argmax(logits.row(0));
        out.tokens.push_back(next);
    }
    out.stats.tokens_generated = out.tokens.size();
    out.kv_high_water = cache.high_water();
    return out;
}

// Draft/verify loop. Each round starts from the last emitted token x, which
// is not yet in the cache:
//   1. draft: feed x, then each drafted token, through forward_draft; stop
//      when the draft's top probability falls below gamma or L tokens exist;
//   2. verify: rewind the cache to the round start and run forward_full over
//      [x, d1..dk], overwriting draft KV entries with full-precision ones;
//   3. accept the longest prefix of drafts matching the target argmax, emit
//      the target's token after it, and drop KV entries past the accepted
//      prefix.
// Drafts are capped so a round never emits past gen_len, which keeps the KV
// high-water mark equal to plain decoding.
template <DecoderModel Model>
Generation speculative_generate(const Model& model, std::span<const Token> prompt, const SpecDecConfig& cfg,
                                std::size_t gen_len) {
    cfg.validate();
    check_request(prompt.size(), gen_len, model.context());
    auto cache = model.make_cache();
    Generation out;

    Matrix<float> prefill = model.forward_full(prompt, cache);
    Token pending = lm::argmax(prefill.row(prefill.rows() - 1));
    out.tokens.push_back(pending);

    std::vector<Token> window;
    while (out.tokens.size() < gen_len) {
        const std::size_t start = cache.size();
        const std::size_t remaining = gen_len - out.tokens.size();
        const std::size_t max_drafts = std::min<std::size_t>(cfg.max_draft_len, remaining - 1);

        window.assign(1, pending);
        while (window.size() - 1 < max_drafts) {
            const std::vector<float> draft_logits = model.forward_draft(window.back(), cache);
            if (static_cast<double>(lm::max_probability(draft_logits)) < cfg.gamma) break;
            window.push_back(lm::argmax(draft_logits));
        }
        const std::size_t drafted = window.size() - 1;

        cache.truncate(start);
        const Matrix<float> verify = model.forward_full(window, cache);
        std::size_t accepted = 0;
        while (accepted < drafted && window[accepted + 1] == lm::argmax(verify.row(accepted))) ++accepted;
        const Token next = lm::argmax(verify.row(accepted));

        for (std::size_t i = 1; i <= accepted; ++i) out.tokens.push_back(window[i]);
        out.tokens.push_back(next);
        cache.truncate(start + accepted + 1);
        pending = next;

        out.stats.rounds += 1;
        out.stats.proposed += drafted;
        out.stats.accepted += accepted;
        out.stats.round_tokens += accepted + 1;
    }
    out.stats.tokens_generated = out.tokens.size();
    out.kv_high_water = cache.high_water();
    return out;
}

}  // namespace speq::specdec
