#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

#include "t1lab/error.hpp"
#include "t1lab/trajectory.hpp"
#include "t1lab/vocab.hpp"

namespace t1lab {

struct PenaltyConfig {
    int ngram_n = 8;
    int ngram_max_repeats = 4;
    int max_length = 256;           // must equal the sampler's max_new_tokens
    std::vector<bool> alphabet;     // allowed token ids; empty = everything allowed
    double ppl_threshold = 8.0;     // per-token reference perplexity ceiling

    void validate() const {
        if (ngram_n < 2) throw ConfigError("ngram_n must be >= 2");
        if (ngram_max_repeats < 2) throw ConfigError("ngram_max_repeats must be >= 2");
        if (max_length < 1) throw ConfigError("max_length must be >= 1");
        if (!(ppl_threshold > 1.0)) throw ConfigError("ppl_threshold must be > 1");
    }
};

/// True iff some n-gram occurs at least ngram_max_repeats times (overlapping
/// occurrences count).
inline bool detect_repetition(std::span<const Token> tokens, const PenaltyConfig& cfg) {
    const std::size_t n = static_cast<std::size_t>(cfg.ngram_n);
    if (tokens.size() < n) return false;
    // Polynomial rolling hash buckets; candidates are confirmed by comparison.
    constexpr std::uint64_t kBase = 1000003ULL;
    std::uint64_t top = 1;
    for (std::size_t i = 1; i < n; ++i) top *= kBase;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < n; ++i) h = h * kBase + static_cast<std::uint64_t>(tokens[i] + 1);
    for (std::size_t start = 0;; ++start) {
        auto& starts = buckets[h];
        int same = 1;
        for (std::size_t s : starts)
            if (std::equal(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                           tokens.begin() + static_cast<std::ptrdiff_t>(s + n),
                           tokens.begin() + static_cast<std::ptrdiff_t>(start)))
                ++same;
        if (same >= cfg.ngram_max_repeats) return true;
        starts.push_back(start);
        if (start + n >= tokens.size()) break;
        h = (h - top * static_cast<std::uint64_t>(tokens[start] + 1)) * kBase +
            static_cast<std::uint64_t>(tokens[start + n] + 1);
    }
    return false;
}

/// No EOS within the budget. A response ending in EOS exactly at the budget
/// counts as complete.
inline bool detect_overlong(const Trajectory& traj, const PenaltyConfig&) {
    return traj.finish == FinishReason::max_length;
}

/// exp of the mean reference NLL over non-PAD response positions.
inline double reference_perplexity(const Trajectory& traj) {
    double sum = 0.0, n = 0.0;
    for (std::size_t j = 0; j < traj.ref_logprobs.size(); ++j) {
        if (j < traj.response.size() && traj.response[j] == tok::PAD) continue;
        sum += traj.ref_logprobs[j];
        n += 1.0;
    }
    return n == 0.0 ? 1.0 : std::exp(-sum / n);
}

inline bool detect_garbage_alphabet(const Trajectory& traj, const PenaltyConfig& cfg) {
    if (cfg.alphabet.empty()) return false;
    for (Token t : traj.response) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.alphabet.size() || !cfg.alphabet[static_cast<std::size_t>(t)])
            return true;
    }
    return false;
}

inline bool detect_garbage_perplexity(const Trajectory& traj, const PenaltyConfig& cfg) {
    if (traj.ref_logprobs.size() != traj.response.size())
        throw ShapeError("reference log-probs missing on trajectory");
    return reference_perplexity(traj) > cfg.ppl_threshold;
}

/// Out-of-alphabet token, or reference per-token perplexity above the ceiling.
inline bool detect_garbage(const Trajectory& traj, const PenaltyConfig& cfg) {
    return detect_garbage_alphabet(traj, cfg) || detect_garbage_perplexity(traj, cfg);
}

inline PenaltyFlags detect_all(const Trajectory& traj, const PenaltyConfig& cfg) {
    PenaltyFlags f;
    if (detect_repetition(traj.response, cfg)) f.insert(PenaltyFlag::repetition);
    if (detect_overlong(traj, cfg)) f.insert(PenaltyFlag::overlong);
    if (detect_garbage_alphabet(traj, cfg)) f.insert(PenaltyFlag::garbage_alphabet);
    if (detect_garbage_perplexity(traj, cfg)) f.insert(PenaltyFlag::garbage_perplexity);
    return f;
}

/// -1 when any penalty fired (even if the answer is right), else r.
inline double shape_reward(int r, PenaltyFlags flags) {
    if (r != 0 && r != 1) throw ConfigError("raw reward must be 0 or 1");
    return flags.empty() ? static_cast<double>(r) : -1.0;
}

struct DetectorReport {
    std::size_t total = 0;
    std::size_t repetition = 0;
    std::size_t overlong = 0;
    std::size_t garbage_alphabet = 0;
    std::size_t garbage_perplexity = 0;
    std::size_t penalized = 0;

    double overlong_ratio() const { return total == 0 ? 0.0 : static_cast<double>(overlong) / static_cast<double>(total); }

    void add(PenaltyFlags f) {
        ++total;
        repetition += f.contains(PenaltyFlag::repetition);
        overlong += f.contains(PenaltyFlag::overlong);
        garbage_alphabet += f.contains(PenaltyFlag::garbage_alphabet);
        garbage_perplexity += f.contains(PenaltyFlag::garbage_perplexity);
        penalized += !f.empty();
    }
};

inline DetectorReport detector_report(std::span<const Trajectory> trajs) {
    DetectorReport r;
    for (const auto& t : trajs) r.add(t.flags);
    return r;
}

}  // namespace t1lab
