#pragma once

// Synthetic verifiable tasks.
//
// Addition (default family), difficulty d = operand digit count:
//   question  BOS a.. + b.. =
//   label     decimal digits of a+b, no leading zeros
//
// Reversal, difficulty n = string length over letters a..h:
//   question  BOS REV x1..xn =
//   label     xn..x1
//
// Synthesized traces interleave attempts with checks. For addition the work
// of a line is column-by-column, least-significant column first, each column
// written as (carry-in, a digit, b digit, sum digit), then the final carry:
//
//   ATTEMPT <work> ANS <answer read off the work> STEP
//   CHECK   <correct work> OK|FAIL STEP
//   REVISE  a.. + b.. =                   only after FAIL, then a new ATTEMPT
//   VERIFY  <work with operands swapped> OK STEP
//   ANS <label> EOS
//
// Steps are delimited by STEP, so a REVISE and the attempt that follows it
// form one step.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "t1lab/error.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/rng.hpp"
#include "t1lab/sampler.hpp"
#include "t1lab/vocab.hpp"

namespace t1lab {

enum class TaskFamily { addition, reversal };

inline std::string to_string(TaskFamily f) { return f == TaskFamily::addition ? "addition" : "reversal"; }

inline TaskFamily parse_task_family(const std::string& s) {
    if (s == "addition") return TaskFamily::addition;
    if (s == "reversal") return TaskFamily::reversal;
    throw ConfigError("unknown task family '" + s + "'");
}

struct TaskInstance {
    std::int64_t id = 0;
    TaskFamily family = TaskFamily::addition;
    TokenSeq question;
    TokenSeq label;
    int difficulty = 1;

    bool operator==(const TaskInstance&) const = default;
};

struct Segment {
    std::size_t begin = 0;  // index into the response
    std::size_t end = 0;    // one past the last token
    Token role = tok::ATTEMPT;  // ATTEMPT/CHECK/REVISE/VERIFY, or ANS for the closing answer

    bool operator==(const Segment&) const = default;
};

struct SftTrace {
    std::int64_t instance_id = 0;
    TokenSeq tokens;  // response only; the prompt is the instance question
    std::vector<Segment> segments;
};

/// Token ids a response of the given family may contain.
inline std::vector<bool> task_alphabet(TaskFamily family, int vocab_size = tok::kStandardSize) {
    std::vector<bool> allowed(static_cast<std::size_t>(vocab_size), false);
    for (Token t = 0; t < std::min(vocab_size, static_cast<int>(tok::DIGIT0)); ++t) allowed[static_cast<std::size_t>(t)] = true;
    allowed[tok::PAD] = false;
    allowed[tok::BOS] = false;
    if (family == TaskFamily::addition) {
        for (int d = 0; d < 10; ++d) allowed[static_cast<std::size_t>(tok::digit(d))] = true;
    } else {
        allowed[tok::PLUS] = false;
        allowed[tok::REVQ] = true;
        for (int i = 0; i < tok::kNumLetters; ++i) allowed[static_cast<std::size_t>(tok::letter(i))] = true;
    }
    return allowed;
}

namespace detail {

inline TokenSeq number_digits(std::uint64_t n) {
    TokenSeq out;
    do {
        out.push_back(tok::digit(static_cast<int>(n % 10)));
        n /= 10;
    } while (n > 0);
    std::reverse(out.begin(), out.end());
    return out;
}

inline std::uint64_t pow10(int d) {
    std::uint64_t p = 1;
    for (int i = 0; i < d; ++i) p *= 10;
    return p;
}

/// Operand digit tokens, MSB first, from a question "BOS a + b =".
inline std::pair<TokenSeq, TokenSeq> addition_operands(const TaskInstance& inst) {
    const auto& q = inst.question;
    const auto plus = std::find(q.begin(), q.end(), tok::PLUS);
    const auto eq = std::find(q.begin(), q.end(), tok::EQ);
    if (plus == q.end() || eq == q.end() || q.empty() || q.front() != tok::BOS)
        throw ShapeError("malformed addition question");
    return {TokenSeq(q.begin() + 1, plus), TokenSeq(plus + 1, eq)};
}

/// Column-by-column work, least-significant column first: for each column
/// the carry-in, both operand digits and the sum digit, then the final carry.
/// Every token is a function of the previous four, so one local rule covers
/// all columns.
inline TokenSeq column_work(const TokenSeq& a, const TokenSeq& b) {
    const std::size_t width = std::max(a.size(), b.size());
    TokenSeq out;
    int carry = 0;
    for (std::size_t i = 0; i < width; ++i) {
        const int da = i < a.size() ? tok::digit_value(a[a.size() - 1 - i]) : 0;
        const int db = i < b.size() ? tok::digit_value(b[b.size() - 1 - i]) : 0;
        const int s = da + db + carry;
        out.push_back(tok::digit(carry));
        out.push_back(tok::digit(da));
        out.push_back(tok::digit(db));
        out.push_back(tok::digit(s % 10));
        carry = s / 10;
    }
    out.push_back(tok::digit(carry));
    return out;
}

/// Reads the answer off column work: final carry then sum digits from the
/// most significant column, leading zeros dropped.
inline TokenSeq answer_from_work(const TokenSeq& work) {
    TokenSeq ans{work.back()};
    for (std::size_t i = work.size() - 1; i >= 4; i -= 4) ans.push_back(work[i - 1]);
    auto first = std::find_if(ans.begin(), ans.end(), [](Token t) { return t != tok::digit(0); });
    if (first == ans.end()) return {tok::digit(0)};
    return TokenSeq(first, ans.end());
}

inline void append(TokenSeq& out, std::initializer_list<Token> ts) { out.insert(out.end(), ts); }
inline void append(TokenSeq& out, const TokenSeq& ts) { out.insert(out.end(), ts.begin(), ts.end()); }

}  // namespace detail

/// Deterministic instance list with ids first_id.. first_id+count-1. Within one
/// call instances are distinct while the problem space allows it.
inline std::vector<TaskInstance> gen_instances(std::uint64_t seed, std::size_t count, int difficulty,
                                               TaskFamily family = TaskFamily::addition,
                                               std::int64_t first_id = 0) {
    if (difficulty < 1) throw ConfigError("difficulty must be >= 1");
    if (family == TaskFamily::addition && difficulty > 9) throw ConfigError("addition difficulty must be <= 9");
    SplitMix64 rng = substream(seed, {static_cast<std::uint64_t>(difficulty),
                                      static_cast<std::uint64_t>(family == TaskFamily::addition ? 0 : 1)});
    std::vector<TaskInstance> out;
    out.reserve(count);
    std::set<TokenSeq> seen;
    double space = 1.0;
    if (family == TaskFamily::addition) {
        const double per = difficulty == 1 ? 10.0 : 9.0 * static_cast<double>(detail::pow10(difficulty - 1));
        space = per * per;
    } else {
        for (int i = 0; i < difficulty; ++i) space *= tok::kNumLetters;
    }
    const bool unique = static_cast<double>(count) <= space;
    while (out.size() < count) {
        TaskInstance inst;
        inst.id = first_id + static_cast<std::int64_t>(out.size());
        inst.family = family;
        inst.difficulty = difficulty;
        if (family == TaskFamily::addition) {
            const std::uint64_t lo = difficulty == 1 ? 0 : detail::pow10(difficulty - 1);
            const std::uint64_t hi = detail::pow10(difficulty);
            const std::uint64_t a = lo + rng.below(hi - lo);
            const std::uint64_t b = lo + rng.below(hi - lo);
            inst.question.push_back(tok::BOS);
            detail::append(inst.question, detail::number_digits(a));
            inst.question.push_back(tok::PLUS);
            detail::append(inst.question, detail::number_digits(b));
            inst.question.push_back(tok::EQ);
            inst.label = detail::number_digits(a + b);
        } else {
            inst.question = {tok::BOS, tok::REVQ};
            TokenSeq s;
            for (int i = 0; i < difficulty; ++i)
                s.push_back(tok::letter(static_cast<int>(rng.below(tok::kNumLetters))));
            detail::append(inst.question, s);
            inst.question.push_back(tok::EQ);
            inst.label.assign(s.rbegin(), s.rend());
        }
        if (unique && !seen.insert(inst.question).second) continue;
        out.push_back(std::move(inst));
    }
    return out;
}

/// Tokens between the last ANS and the next EOS / STEP / end of input.
inline std::optional<TokenSeq> extract_answer(std::span<const Token> tokens) {
    const auto rit = std::find(tokens.rbegin(), tokens.rend(), tok::ANS);
    if (rit == tokens.rend()) return std::nullopt;
    auto it = rit.base();  // one past the marker
    TokenSeq out;
    for (; it != tokens.end() && *it != tok::EOS && *it != tok::STEP; ++it) out.push_back(*it);
    if (out.empty()) return std::nullopt;
    return out;
}

/// 1 iff the extracted answer equals the label token-for-token (PAD stripped).
/// No numeric normalization: "0 7" does not match "7".
inline int check(std::span<const Token> response, const TaskInstance& instance) {
    auto ans = extract_answer(response);
    if (!ans) return 0;
    auto strip = [](TokenSeq s) {
        std::erase(s, tok::PAD);
        return s;
    };
    return strip(*ans) == strip(instance.label) ? 1 : 0;
}

/// Trial-and-error trace: up to n_attempts attempts, each non-final one
/// corrupted with probability error_rate (the final one is always correct);
/// the first attempt that passes its check ends the chain.
inline SftTrace synth_sft_trace(const TaskInstance& inst, std::uint64_t seed, int n_attempts, double error_rate) {
    if (n_attempts < 1) throw ConfigError("n_attempts must be >= 1");
    if (!(error_rate >= 0.0 && error_rate <= 1.0)) throw ConfigError("error_rate must be in [0, 1]");
    SplitMix64 rng = substream(seed, {static_cast<std::uint64_t>(inst.id), 0x7472616365ULL});
    SftTrace trace;
    trace.instance_id = inst.id;
    TokenSeq& out = trace.tokens;
    auto open = [&](Token role) {
        if (!trace.segments.empty()) trace.segments.back().end = out.size();
        trace.segments.push_back(Segment{out.size(), out.size(), role});
        out.push_back(role);
    };

    // Per family: the problem restatement, the column work of an attempt
    // (with the position of each perturbable token), the answer read off the
    // work, and the second-method work used by VERIFY.
    TokenSeq restate;
    std::function<TokenSeq(bool swapped)> work_of;
    std::function<TokenSeq(const TokenSeq&)> answer_of;
    std::vector<std::size_t> result_slots;
    std::function<Token(Token, SplitMix64&)> perturb;
    if (inst.family == TaskFamily::addition) {
        auto [a, b] = detail::addition_operands(inst);
        restate = a;
        restate.push_back(tok::PLUS);
        detail::append(restate, b);
        restate.push_back(tok::EQ);
        work_of = [a = a, b = b](bool swapped) {
            return swapped ? detail::column_work(b, a) : detail::column_work(a, b);
        };
        answer_of = detail::answer_from_work;
        for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) result_slots.push_back(4 * i + 3);
        perturb = [](Token t, SplitMix64& r) {
            return tok::digit((tok::digit_value(t) + 1 + static_cast<int>(r.below(9))) % 10);
        };
    } else {
        const TokenSeq x(inst.question.begin() + 2, inst.question.end() - 1);
        restate = inst.question;
        restate.erase(restate.begin());  // REV x.. =
        work_of = [x, label = inst.label](bool swapped) { return swapped ? x : label; };
        answer_of = [](const TokenSeq& w) { return w; };
        for (std::size_t i = 0; i < x.size(); ++i) result_slots.push_back(i);
        perturb = [](Token t, SplitMix64& r) {
            const int cur = t - tok::LETTER0;
            return tok::letter((cur + 1 + static_cast<int>(r.below(tok::kNumLetters - 1))) % tok::kNumLetters);
        };
    }
    const TokenSeq correct = work_of(false);

    for (int k = 0; k < n_attempts; ++k) {
        const bool final_attempt = k == n_attempts - 1;
        TokenSeq work = correct;
        if (!final_attempt && rng.uniform() < error_rate) {
            const std::size_t pos = result_slots[rng.below(result_slots.size())];
            work[pos] = perturb(work[pos], rng);
        }
        if (k > 0) {
            open(tok::REVISE);
            detail::append(out, restate);
        }
        open(tok::ATTEMPT);
        detail::append(out, work);
        out.push_back(tok::ANS);
        detail::append(out, answer_of(work));
        out.push_back(tok::STEP);
        const bool ok = work == correct;
        open(tok::CHECK);
        detail::append(out, correct);
        out.push_back(ok ? tok::OK : tok::FAIL);
        out.push_back(tok::STEP);
        if (ok) break;
    }
    open(tok::VERIFY);
    detail::append(out, work_of(true));
    out.push_back(tok::OK);
    out.push_back(tok::STEP);
    open(tok::ANS);
    detail::append(out, inst.label);
    out.push_back(tok::EOS);
    trace.segments.back().end = out.size();
    return trace;
}

/// Replaces the closing EOS with a "STEP VERIFY OK" loop running to max_len
/// tokens. The stated answer stays extractable, so such responses are still
/// scored correct; used to build a repetition-prone initialization.
inline SftTrace make_looping(SftTrace trace, std::size_t max_len) {
    if (!trace.tokens.empty() && trace.tokens.back() == tok::EOS) trace.tokens.pop_back();
    const Token loop[] = {tok::STEP, tok::VERIFY, tok::OK};
    for (std::size_t i = 0; trace.tokens.size() < max_len; ++i) trace.tokens.push_back(loop[i % 3]);
    if (!trace.segments.empty()) trace.segments.back().end = trace.tokens.size();
    return trace;
}

/// Structural check on a response: role markers are well ordered, REVISE only
/// follows a failed CHECK, at least one ATTEMPT and one VERIFY, and it closes
/// with ANS <answer> EOS.
inline bool has_trace_structure(std::span<const Token> r) {
    if (r.size() < 3 || r.back() != tok::EOS) return false;
    const auto last_ans = std::find(r.rbegin(), r.rend(), tok::ANS);
    if (last_ans == r.rend()) return false;
    int attempts = 0, verifies = 0;
    bool pending_attempt = false, last_check_failed = false;
    for (std::size_t i = 0; i < r.size(); ++i) {
        switch (r[i]) {
            case tok::ATTEMPT:
                if (verifies > 0 || pending_attempt) return false;
                ++attempts;
                pending_attempt = true;
                break;
            case tok::CHECK:
                if (!pending_attempt) return false;
                pending_attempt = false;
                last_check_failed = false;
                for (std::size_t j = i + 1; j < r.size() && r[j] != tok::STEP; ++j)
                    if (r[j] == tok::FAIL) last_check_failed = true;
                break;
            case tok::REVISE:
                if (!last_check_failed) return false;
                last_check_failed = false;
                break;
            case tok::VERIFY:
                if (attempts == 0 || pending_attempt) return false;
                ++verifies;
                break;
            default: break;
        }
    }
    return attempts >= 1 && verifies >= 1 && extract_answer(r).has_value();
}

struct PassRateResult {
    std::vector<TaskInstance> kept;
    std::vector<double> pass_rates;  // one per input instance, input order
};

/// Keeps instances whose empirical pass rate over n_samples responses lies
/// strictly inside (0, delta). `respond(instance, sample_index)` returns one
/// sampled response; any policy (or a stub) can be plugged in.
template <class Responder>
PassRateResult pass_rate_filter(std::span<const TaskInstance> instances, Responder&& respond, int n_samples = 16,
                                double delta = 0.3) {
    if (n_samples < 2) throw ConfigError("n_samples must be >= 2");
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("delta must be in (0, 1]");
    PassRateResult out;
    out.pass_rates.resize(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        int passes = 0;
        for (int s = 0; s < n_samples; ++s) {
            const TokenSeq response = respond(instances[i], s);
            passes += check(response, instances[i]);
        }
        const double rate = static_cast<double>(passes) / n_samples;
        out.pass_rates[i] = rate;
        if (rate > 0.0 && rate < delta) out.kept.push_back(instances[i]);
    }
    return out;
}

/// Policy-backed filter: the n_samples responses for an instance are the
/// oversampled group seeded by (cfg.seed, instance id).
inline PassRateResult pass_rate_filter(std::span<const TaskInstance> instances, const PolicyParams& params,
                                       const ReferenceSnapshot& ref, SamplingConfig cfg, int n_samples = 16,
                                       double delta = 0.3) {
    cfg.k = n_samples;
    cfg.validate();
    PolicyEvaluator pe(params), re(ref.arch, ref.theta);
    const TaskInstance* cached_for = nullptr;
    std::vector<Trajectory> group;
    return pass_rate_filter(
        instances,
        [&](const TaskInstance& inst, int s) {
            if (cached_for != &inst) {
                group = oversample(pe, re, inst.question, cfg, static_cast<std::uint64_t>(inst.id));
                cached_for = &inst;
            }
            return group[static_cast<std::size_t>(s)].response;
        },
        n_samples, delta);
}

}  // namespace t1lab
