#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "t1lab/error.hpp"
#include "t1lab/parallel.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/rng.hpp"
#include "t1lab/trajectory.hpp"

namespace t1lab {

struct SamplingConfig {
    double temperature = 1.2;
    double top_p = 0.95;
    double min_p = 0.0;
    int max_new_tokens = 256;
    int k = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
        if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
        if (!(min_p >= 0.0 && min_p < 1.0)) throw ConfigError("min_p must be in [0, 1)");
        if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
        if (k < 2) throw ConfigError("k must be >= 2 (leave-one-out baseline undefined)");
    }
};

/// softmax(logits / tau), then the min-p mask, then the top-p nucleus, then
/// renormalization. Nucleus ordering is by descending probability with ties
/// broken by ascending token id.
inline std::vector<double> transform_distribution(std::span<const double> logits, const SamplingConfig& cfg) {
    if (logits.empty() || !all_finite(logits)) throw NumericError("logits must be finite and non-empty");
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& z : scaled) z /= cfg.temperature;
    std::vector<double> p = softmax(scaled);

    if (cfg.min_p > 0.0) {
        const double cutoff = cfg.min_p * *std::max_element(p.begin(), p.end());
        for (double& x : p)
            if (x < cutoff) x = 0.0;
    }

    if (cfg.top_p < 1.0) {
        std::vector<std::size_t> order(p.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
        double total = 0.0;
        for (double x : p) total += x;
        double cum = 0.0;
        std::size_t keep = 0;
        while (keep < order.size() && p[order[keep]] > 0.0) {
            cum += p[order[keep]];
            ++keep;
            if (cum >= cfg.top_p * total) break;
        }
        for (std::size_t i = keep; i < order.size(); ++i) p[order[i]] = 0.0;
    }

    double total = 0.0;
    for (double x : p) total += x;
    for (double& x : p) x /= total;
    return p;
}

/// Inverse-CDF draw; never returns a zero-probability index.
inline Token sample_categorical(std::span<const double> probs, SplitMix64& rng) {
    const double u = rng.uniform();
    double cdf = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last = i;
        cdf += probs[i];
        if (u < cdf) return static_cast<Token>(i);
    }
    return static_cast<Token>(last);
}

inline Token argmax_token(std::span<const double> logits) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

/// Samples one response. Log-probs are recorded under the untransformed
/// (tau = 1, full vocabulary) distributions of both models, at the contexts
/// produced by the transformed sampler.
inline Trajectory generate(const PolicyEvaluator& policy, const PolicyEvaluator& ref, std::span<const Token> prompt,
                           const SamplingConfig& cfg, SplitMix64& rng) {
    Trajectory t;
    t.prompt.assign(prompt.begin(), prompt.end());
    TokenSeq ctx(prompt.begin(), prompt.end());
    Activations act, ref_act;
    t.finish = FinishReason::max_length;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        policy.forward(ctx, act);
        const std::span<const double> logits(act.logits.data(), static_cast<std::size_t>(act.logits.size()));
        const auto probs = transform_distribution(logits, cfg);
        const Token y = sample_categorical(probs, rng);
        t.response.push_back(y);
        ctx.push_back(y);
        if (y == tok::PAD) {
            // contributes nothing, matching sequence_log_prob and the gradient
            t.policy_logprobs.push_back(0.0);
            t.ref_logprobs.push_back(0.0);
            continue;
        }
        const auto lp = log_softmax(logits);
        double h = 0.0;
        for (double l : lp) h -= std::exp(l) * l;
        t.entropy_sum += std::max(h, 0.0);
        ref_act.window = act.window;
        ref.forward_window(ref_act);
        const auto ref_lp = log_softmax(std::span<const double>(ref_act.logits.data(),
                                                                static_cast<std::size_t>(ref_act.logits.size())));
        t.policy_logprobs.push_back(lp[static_cast<std::size_t>(y)]);
        t.ref_logprobs.push_back(ref_lp[static_cast<std::size_t>(y)]);
        if (y == tok::EOS) {
            t.finish = FinishReason::eos;
            break;
        }
    }
    double d = 0.0;
    for (std::size_t j = 0; j < t.response.size(); ++j) d += t.policy_logprobs[j] - t.ref_logprobs[j];
    t.kl = d;
    return t;
}

inline Trajectory generate(const PolicyParams& params, const ReferenceSnapshot& ref, std::span<const Token> prompt,
                           const SamplingConfig& cfg, SplitMix64& rng) {
    PolicyEvaluator pe(params), re(ref.arch, ref.theta);
    return generate(pe, re, prompt, cfg, rng);
}

/// K independent samples for one prompt; sample i uses the stream
/// derived from (cfg.seed, prompt_index, i). Output order is sample order.
inline std::vector<Trajectory> oversample(const PolicyEvaluator& policy, const PolicyEvaluator& ref,
                                          std::span<const Token> prompt, const SamplingConfig& cfg,
                                          std::uint64_t prompt_index = 0) {
    cfg.validate();
    std::vector<Trajectory> out(static_cast<std::size_t>(cfg.k));
    parallel_for(out.size(), [&](std::size_t i) {
        SplitMix64 rng = substream(cfg.seed, {prompt_index, i});
        out[i] = generate(policy, ref, prompt, cfg, rng);
        out[i].sample_index = static_cast<std::int64_t>(i);
    });
    return out;
}

inline std::vector<Trajectory> oversample(const PolicyParams& params, const ReferenceSnapshot& ref,
                                          std::span<const Token> prompt, const SamplingConfig& cfg,
                                          std::uint64_t prompt_index = 0) {
    PolicyEvaluator pe(params), re(ref.arch, ref.theta);
    return oversample(pe, re, prompt, cfg, prompt_index);
}

struct Decoded {
    TokenSeq response;
    FinishReason finish = FinishReason::max_length;
};

/// Argmax decoding (ties go to the lowest id).
inline Decoded greedy_decode(const PolicyEvaluator& policy, std::span<const Token> prompt, int max_new_tokens) {
    Decoded out;
    TokenSeq ctx(prompt.begin(), prompt.end());
    Activations act;
    for (int step = 0; step < max_new_tokens; ++step) {
        policy.forward(ctx, act);
        const Token y = argmax_token(std::span<const double>(act.logits.data(), static_cast<std::size_t>(act.logits.size())));
        out.response.push_back(y);
        ctx.push_back(y);
        if (y == tok::EOS) {
            out.finish = FinishReason::eos;
            break;
        }
    }
    return out;
}

}  // namespace t1lab
