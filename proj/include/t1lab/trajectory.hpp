#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "t1lab/vocab.hpp"

namespace t1lab {

enum class FinishReason { eos, max_length };

inline std::string_view to_string(FinishReason f) { return f == FinishReason::eos ? "eos" : "max_length"; }

enum class PenaltyFlag : std::uint8_t {
    repetition = 1u << 0,
    overlong = 1u << 1,
    garbage_alphabet = 1u << 2,
    garbage_perplexity = 1u << 3,
};

inline constexpr PenaltyFlag kAllPenaltyFlags[] = {PenaltyFlag::repetition, PenaltyFlag::overlong,
                                                   PenaltyFlag::garbage_alphabet,
                                                   PenaltyFlag::garbage_perplexity};

inline std::string_view to_string(PenaltyFlag f) {
    switch (f) {
        case PenaltyFlag::repetition: return "repetition";
        case PenaltyFlag::overlong: return "overlong";
        case PenaltyFlag::garbage_alphabet: return "garbage_alphabet";
        case PenaltyFlag::garbage_perplexity: return "garbage_perplexity";
    }
    return "unknown";
}

/// Small value-type set over PenaltyFlag.
class PenaltyFlags {
public:
    constexpr PenaltyFlags() = default;
    constexpr PenaltyFlags(std::initializer_list<PenaltyFlag> fs) {
        for (auto f : fs) insert(f);
    }
    constexpr void insert(PenaltyFlag f) { bits_ |= static_cast<std::uint8_t>(f); }
    constexpr bool contains(PenaltyFlag f) const { return (bits_ & static_cast<std::uint8_t>(f)) != 0; }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr std::uint8_t bits() const { return bits_; }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (auto f : kAllPenaltyFlags)
            if (contains(f)) out.emplace_back(to_string(f));
        return out;
    }
    constexpr bool operator==(const PenaltyFlags&) const = default;

private:
    std::uint8_t bits_ = 0;
};

/// One sampled response and everything the trainer derives from it.
struct Trajectory {
    std::int64_t instance_id = -1;
    std::int64_t sample_index = 0;
    TokenSeq prompt;
    TokenSeq response;
    std::vector<double> policy_logprobs;
    std::vector<double> ref_logprobs;
    double entropy_sum = 0.0;  // sum of per-position policy entropies (untransformed)
    FinishReason finish = FinishReason::eos;
    int reward = 0;
    PenaltyFlags flags;
    double shaped_reward = 0.0;
    double normalized_reward = 0.0;
    double kl = 0.0;
    double normalized_kl = 0.0;
    double advantage = 0.0;
};

}  // namespace t1lab
