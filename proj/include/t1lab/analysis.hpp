#pragma once

// Inference-scaling measurement: responses are generated once at the full
// budget, then re-truncated at each budget and summarized into an answer.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "t1lab/env.hpp"
#include "t1lab/error.hpp"
#include "t1lab/parallel.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/sampler.hpp"
#include "t1lab/vocab.hpp"

namespace t1lab {

/// First min(budget, |y|) tokens.
inline TokenSeq truncate(std::span<const Token> response, std::size_t budget) {
    if (budget < 1) throw ConfigError("truncation budget must be >= 1");
    const std::size_t n = std::min(budget, response.size());
    return TokenSeq(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(n));
}

/// ceil(fraction * length), with products that land on an integer up to
/// rounding noise (0.3 * 10) treated as that integer. Never below 1.
inline std::size_t fraction_budget(double fraction, std::size_t length) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
    const double x = fraction * static_cast<double>(length);
    const double r = std::round(x);
    const double b = std::abs(x - r) <= 1e-9 * std::max(1.0, x) ? r : std::ceil(x);
    return std::max<std::size_t>(1, std::min(length, static_cast<std::size_t>(b)));
}

struct TruncationSchedule {
    std::vector<double> fractions;     // relative to each response's length
    std::vector<std::size_t> budgets;  // absolute token budgets
    // Exactly one of the two lists is non-empty.

    static TruncationSchedule deciles() {
        TruncationSchedule s;
        for (int i = 1; i <= 10; ++i) s.fractions.push_back(i / 10.0);
        return s;
    }
    static TruncationSchedule of_fractions(std::vector<double> f) {
        TruncationSchedule s;
        s.fractions = std::move(f);
        s.validate();
        return s;
    }
    static TruncationSchedule of_budgets(std::vector<std::size_t> b) {
        TruncationSchedule s;
        s.budgets = std::move(b);
        s.validate();
        return s;
    }

    bool relative() const { return !fractions.empty(); }
    std::size_t size() const { return relative() ? fractions.size() : budgets.size(); }

    void validate() const {
        if (fractions.empty() == budgets.empty())
            throw ConfigError("schedule needs either fractions or absolute budgets");
        for (std::size_t i = 0; i < fractions.size(); ++i) {
            if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) throw ConfigError("schedule fractions must be in (0, 1]");
            if (i > 0 && !(fractions[i] > fractions[i - 1]))
                throw ConfigError("schedule fractions must be strictly increasing");
        }
        for (std::size_t i = 0; i < budgets.size(); ++i) {
            if (budgets[i] < 1) throw ConfigError("schedule budgets must be >= 1");
            if (i > 0 && budgets[i] <= budgets[i - 1]) throw ConfigError("schedule budgets must be strictly increasing");
        }
    }

    std::size_t budget_for(std::size_t point, std::size_t length) const {
        return relative() ? fraction_budget(fractions[point], length) : budgets[point];
    }
};

enum class SummaryMode { extractor, policy_continuation };

inline SummaryMode parse_summary_mode(const std::string& s) {
    if (s == "extractor") return SummaryMode::extractor;
    if (s == "policy_continuation" || s == "policy-continuation") return SummaryMode::policy_continuation;
    throw ConfigError("unknown summary mode '" + s + "'");
}

/// The answer-producing model applied to a thinking prefix. In continuation
/// mode a frozen SFT policy is asked to answer after prefix + ANS.
struct Summarizer {
    SummaryMode mode = SummaryMode::extractor;
    const PolicyParams* sft = nullptr;
    int max_answer_tokens = 8;

    void validate() const {
        if (mode == SummaryMode::policy_continuation && sft == nullptr)
            throw ConfigError("policy-continuation summaries need an SFT checkpoint");
        if (max_answer_tokens < 1) throw ConfigError("max_answer_tokens must be >= 1");
    }
};

/// Answer of the last ANS segment closed by STEP or EOS. A trailing segment
/// that runs into the end of the prefix is ignored unless the prefix is the
/// whole response (generation stopped there).
inline std::optional<TokenSeq> last_completed_answer(std::span<const Token> prefix, bool whole_response) {
    if (whole_response) return extract_answer(prefix);
    std::size_t end = prefix.size();
    while (true) {
        const auto head = prefix.first(end);
        const auto rit = std::find(head.rbegin(), head.rend(), tok::ANS);
        if (rit == head.rend()) return std::nullopt;
        const std::size_t pos = static_cast<std::size_t>(head.rend() - rit) - 1;
        const auto close = std::find_if(prefix.begin() + static_cast<std::ptrdiff_t>(pos) + 1, prefix.end(),
                                        [](Token t) { return t == tok::STEP || t == tok::EOS; });
        if (close != prefix.end()) return extract_answer(prefix.first(static_cast<std::size_t>(close - prefix.begin()) + 1));
        end = pos;
    }
}

inline std::optional<TokenSeq> summarize(std::span<const Token> prefix, const TaskInstance& inst, const Summarizer& s,
                                         bool whole_response = false) {
    s.validate();
    if (s.mode == SummaryMode::extractor) return last_completed_answer(prefix, whole_response);
    TokenSeq ctx = inst.question;
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    ctx.push_back(tok::ANS);
    PolicyEvaluator ev(*s.sft);
    const Decoded cont = greedy_decode(ev, ctx, s.max_answer_tokens);
    TokenSeq tail{tok::ANS};
    tail.insert(tail.end(), cont.response.begin(), cont.response.end());
    return extract_answer(tail);
}

/// Correctness of the summarized answer (absent answer scores 0).
inline int summary_correct(std::span<const Token> prefix, const TaskInstance& inst, const Summarizer& s,
                           bool whole_response = false) {
    const auto ans = summarize(prefix, inst, s, whole_response);
    if (!ans) return 0;
    TokenSeq wrapped{tok::ANS};
    wrapped.insert(wrapped.end(), ans->begin(), ans->end());
    return check(wrapped, inst);
}

struct ScalingPoint {
    std::optional<double> fraction;
    double budget_tokens = 0.0;       // absolute budget, or mean allocated budget for fractions
    double mean_thinking_tokens = 0.0;
    double accuracy = 0.0;
    std::size_t n = 0;
};

struct ScalingCurve {
    std::string checkpoint_id;
    std::string eval_set_id;
    std::vector<ScalingPoint> points;

    std::vector<double> accuracies() const {
        std::vector<double> a;
        for (const auto& p : points) a.push_back(p.accuracy);
        return a;
    }
};

/// Greedy (no sampling config) or seeded sampled responses at the full budget.
inline std::vector<TokenSeq> generate_responses(const PolicyParams& params, std::span<const TaskInstance> instances,
                                                int max_new_tokens,
                                                const std::optional<SamplingConfig>& sampling = std::nullopt) {
    PolicyEvaluator ev(params);
    std::vector<TokenSeq> out(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) {
        if (!sampling) {
            out[i] = greedy_decode(ev, instances[i].question, max_new_tokens).response;
            return;
        }
        SamplingConfig cfg = *sampling;
        cfg.max_new_tokens = max_new_tokens;
        SplitMix64 rng = substream(cfg.seed, {0x7363616cULL, static_cast<std::uint64_t>(instances[i].id)});
        out[i] = generate(ev, ev, instances[i].question, cfg, rng).response;
    });
    return out;
}

inline ScalingCurve scaling_curve(std::span<const TokenSeq> responses, std::span<const TaskInstance> instances,
                                  const TruncationSchedule& schedule, const Summarizer& summarizer = {}) {
    if (instances.empty()) throw ConfigError("scaling curve needs a non-empty eval set");
    if (responses.size() != instances.size()) throw ShapeError("one response per instance required");
    schedule.validate();
    summarizer.validate();
    const std::size_t m = instances.size(), k = schedule.size();
    // correct[p * m + i], tokens[p * m + i]; filled in parallel, reduced in order
    std::vector<int> correct(k * m);
    std::vector<std::size_t> budget(k * m), used(k * m);
    parallel_for(m, [&](std::size_t i) {
        for (std::size_t p = 0; p < k; ++p) {
            const std::size_t b = schedule.budget_for(p, responses[i].size());
            const TokenSeq prefix = truncate(responses[i], b);
            budget[p * m + i] = b;
            used[p * m + i] = prefix.size();
            correct[p * m + i] = summary_correct(prefix, instances[i], summarizer, prefix.size() == responses[i].size());
        }
    });
    ScalingCurve curve;
    for (std::size_t p = 0; p < k; ++p) {
        ScalingPoint pt;
        if (schedule.relative()) pt.fraction = schedule.fractions[p];
        double b = 0.0, u = 0.0, c = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            b += static_cast<double>(budget[p * m + i]);
            u += static_cast<double>(used[p * m + i]);
            c += correct[p * m + i];
        }
        const double dm = static_cast<double>(m);
        pt.budget_tokens = schedule.relative() ? b / dm : static_cast<double>(schedule.budgets[p]);
        pt.mean_thinking_tokens = u / dm;
        pt.accuracy = c / dm;
        pt.n = m;
        curve.points.push_back(pt);
    }
    return curve;
}

inline ScalingCurve scaling_curve(const PolicyParams& params, std::span<const TaskInstance> instances,
                                  const TruncationSchedule& schedule, int max_new_tokens,
                                  const Summarizer& summarizer = {},
                                  const std::optional<SamplingConfig>& sampling = std::nullopt) {
    const auto responses = generate_responses(params, instances, max_new_tokens, sampling);
    return scaling_curve(responses, instances, schedule, summarizer);
}

inline void write_csv(std::ostream& os, const ScalingCurve& curve) {
    os << "budget_tokens,mean_thinking_tokens,accuracy,n\n";
    char buf[128];
    for (const auto& p : curve.points) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%zu\n", p.budget_tokens, p.mean_thinking_tokens, p.accuracy, p.n);
        os << buf;
    }
}

/// End offsets of the reasoning steps: each STEP closes a step, and any tail
/// after the last STEP forms a final step.
inline std::vector<std::size_t> step_ends(std::span<const Token> response) {
    std::vector<std::size_t> ends;
    for (std::size_t i = 0; i < response.size(); ++i)
        if (response[i] == tok::STEP) ends.push_back(i + 1);
    if (ends.empty() || ends.back() != response.size())
        if (!response.empty()) ends.push_back(response.size());
    return ends;
}

struct KeyStep {
    std::int64_t instance_id = 0;
    std::size_t step_index = 0;
    std::size_t begin = 0;  // token range of the step within the response
    std::size_t end = 0;
};

/// Steps whose inclusion flips the summarized answer from incorrect to correct.
/// The empty prefix counts as incorrect.
inline std::vector<KeyStep> key_steps(std::span<const Token> response, const TaskInstance& inst,
                                      const Summarizer& summarizer = {}) {
    std::vector<KeyStep> out;
    std::size_t begin = 0;
    int before = 0;
    const auto ends = step_ends(response);
    for (std::size_t s = 0; s < ends.size(); ++s) {
        const int after = summary_correct(response.first(ends[s]), inst, summarizer, ends[s] == response.size());
        if (before == 0 && after == 1) out.push_back(KeyStep{inst.id, s, begin, ends[s]});
        before = after;
        begin = ends[s];
    }
    return out;
}

struct KeyStepReport {
    std::vector<KeyStep> steps;
    std::vector<std::pair<Token, std::size_t>> frequency;
};

inline std::vector<std::pair<Token, std::size_t>> token_frequency(std::span<const std::span<const Token>> segments) {
    std::map<Token, std::size_t> counts;
    for (auto seg : segments)
        for (Token t : seg) ++counts[t];
    std::vector<std::pair<Token, std::size_t>> table(counts.begin(), counts.end());
    std::stable_sort(table.begin(), table.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return table;
}

inline KeyStepReport key_step_report(std::span<const TokenSeq> responses, std::span<const TaskInstance> instances,
                                     const Summarizer& summarizer = {}) {
    if (responses.size() != instances.size()) throw ShapeError("one response per instance required");
    std::vector<std::vector<KeyStep>> per(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) { per[i] = key_steps(responses[i], instances[i], summarizer); });
    KeyStepReport r;
    std::vector<std::span<const Token>> segs;
    for (std::size_t i = 0; i < per.size(); ++i) {
        for (const auto& k : per[i]) {
            r.steps.push_back(k);
            segs.push_back(std::span<const Token>(responses[i]).subspan(k.begin, k.end - k.begin));
        }
    }
    r.frequency = token_frequency(segs);
    return r;
}

struct PatternCounts {
    std::size_t attempt = 0, check = 0, revise = 0, verify = 0;
    std::size_t other = 0;  // tokens not covered by any role segment

    PatternCounts& operator+=(const PatternCounts& o) {
        attempt += o.attempt;
        check += o.check;
        revise += o.revise;
        verify += o.verify;
        other += o.other;
        return *this;
    }
    bool operator==(const PatternCounts&) const = default;
};

/// A role segment runs from its marker up to the next STEP (inclusive) or the
/// next role marker, whichever comes first.
inline PatternCounts pattern_counts(std::span<const Token> tokens) {
    PatternCounts c;
    bool inside = false;
    for (Token t : tokens) {
        switch (t) {
            case tok::ATTEMPT: ++c.attempt; inside = true; continue;
            case tok::CHECK: ++c.check; inside = true; continue;
            case tok::REVISE: ++c.revise; inside = true; continue;
            case tok::VERIFY: ++c.verify; inside = true; continue;
            default: break;
        }
        if (!inside) ++c.other;
        if (t == tok::STEP) inside = false;
    }
    return c;
}

/// Rank correlation with average ranks for ties. Constant input gives 0.
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ShapeError("spearman needs two equal-length series of length >= 2");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace t1lab
