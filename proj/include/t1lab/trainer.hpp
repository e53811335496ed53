#pragma once

// RL and SFT optimization loops.
//
// RL objective per prompt with K sampled responses:
//   r'_i  shaped reward (-1 if any penalty fired, else 0/1 correctness)
//   rbar  = leave-one-out normalized r'
//   d_i   = sum_j log pi(y_ij) - log pi_ref(y_ij)     (sequence KL estimate)
//   dbar  = leave-one-out normalized d
//   A_i   = rbar_i - beta * dbar_i
// Loss over the N = prompts * K trajectories of a step:
//   L = (1/N) sum_i [ -A_i log pi(y_i|x) - alpha_entropy * sum_j H_ij ]
// followed by global-norm clipping, one Adam update and one EMA update of
// the reference.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "t1lab/env.hpp"
#include "t1lab/error.hpp"
#include "t1lab/parallel.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/rng.hpp"
#include "t1lab/sampler.hpp"
#include "t1lab/shaping.hpp"
#include "t1lab/trajectory.hpp"

namespace t1lab {

/// out_i = v_i - mean of the other K-1 entries.
inline std::vector<double> loo_normalize(std::span<const double> values) {
    const std::size_t k = values.size();
    if (k < 2) throw ConfigError("leave-one-out baseline needs at least 2 values");
    if (!all_finite(values)) throw NumericError("leave-one-out input must be finite");
    const double total = std::accumulate(values.begin(), values.end(), 0.0);
    const double denom = static_cast<double>(k - 1);
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = values[i] - (total - values[i]) / denom;
    return out;
}

struct RolloutGroup {
    std::int64_t instance_id = -1;
    std::vector<Trajectory> trajectories;
    std::vector<double> normalized_rewards;
    std::vector<double> normalized_kls;
    std::vector<double> advantages;
};

inline std::vector<double> assemble_advantages(std::span<const double> normalized_rewards,
                                               std::span<const double> normalized_kls, double beta) {
    if (normalized_rewards.size() != normalized_kls.size()) throw ShapeError("advantage inputs differ in length");
    std::vector<double> a(normalized_rewards.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = normalized_rewards[i] - beta * normalized_kls[i];
    return a;
}

inline std::vector<double> assemble_advantages(const RolloutGroup& g, double beta) {
    return assemble_advantages(g.normalized_rewards, g.normalized_kls, beta);
}

/// theta_ref <- decay * theta_ref + (1 - decay) * theta, step stamp advanced.
inline ReferenceSnapshot ema_update(const ReferenceSnapshot& ref, const PolicyParams& params, double decay) {
    if (ref.theta.size() != params.theta.size()) throw ShapeError("reference and policy lengths differ");
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must be in [0, 1]");
    ReferenceSnapshot out{ref.arch, std::vector<double>(ref.theta.size()), ref.step + 1};
    for (std::size_t i = 0; i < out.theta.size(); ++i)
        out.theta[i] = decay * ref.theta[i] + (1.0 - decay) * params.theta[i];
    return out;
}

struct AdamConfig {
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("Adam moment decays must be in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
    }
};

struct AdamState {
    std::vector<double> m, v;
    std::uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// Returns the updated parameters; the inputs are left untouched.
inline PolicyParams adam_update(const PolicyParams& params, std::span<const double> grad, AdamState& state,
                                const AdamConfig& cfg) {
    const std::size_t n = params.theta.size();
    if (grad.size() != n) throw ShapeError("gradient length mismatch");
    if (state.m.size() != n) state = AdamState(n);
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    PolicyParams out = params;
    for (std::size_t i = 0; i < n; ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        out.theta[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
    return out;
}

/// Scales grad in place so its L2 norm is at most max_norm; returns the norm
/// before clipping. max_norm <= 0 disables clipping.
inline double clip_global_norm(std::span<double> grad, double max_norm) {
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (double& g : grad) g *= s;
    }
    return norm;
}

struct TrainConfig {
    int prompts_per_step = 32;
    SamplingConfig sampling{};
    double beta = 2e-4;
    double entropy_coef = 1e-3;
    double ema_decay = 0.995;
    AdamConfig adam{};
    double clip_norm = 1.0;
    int steps = 200;
    std::uint64_t seed = 0;
    PenaltyConfig penalty{};
    bool penalties_enabled = true;
    int eval_every = 10;

    void validate() const {
        sampling.validate();
        adam.validate();
        penalty.validate();
        if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be >= 1");
        if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
        if (!(entropy_coef >= 0.0)) throw ConfigError("entropy_coef must be >= 0");
        if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must be in [0, 1]");
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (penalty.max_length != sampling.max_new_tokens)
            throw ConfigError("penalty max_length must equal sampling max_new_tokens");
    }
};

struct StepMetrics {
    std::uint64_t step = 0;
    double mean_shaped_reward = 0.0;
    double accuracy = 0.0;
    double mean_response_length = 0.0;
    double mean_kl = 0.0;
    double cumulative_kl = 0.0;
    double entropy = 0.0;  // mean per-token policy entropy over sampled positions
    double overlong_ratio = 0.0;
    DetectorReport flags{};
    double grad_norm = 0.0;
    std::optional<double> eval_accuracy;
    double wall_seconds = 0.0;  // not part of the reproducible metrics stream
};

using RewardFn = std::function<int(const TaskInstance&, std::span<const Token>)>;

inline int default_reward(const TaskInstance& inst, std::span<const Token> response) { return check(response, inst); }

struct TrainerState {
    PolicyParams params;
    ReferenceSnapshot ref;
    AdamState opt;
    std::uint64_t step = 0;  // completed steps
    double cumulative_kl = 0.0;
};

inline TrainerState start_state(const PolicyParams& init) {
    return TrainerState{init, ReferenceSnapshot::from(init), AdamState(init.theta.size()), 0, 0.0};
}

struct StepResult {
    StepMetrics metrics;
    std::vector<RolloutGroup> groups;
};

/// Fills rewards, flags, r', rbar, dbar and A on a freshly sampled group and
/// checks the zero-sum invariants.
inline void score_group(RolloutGroup& g, const TaskInstance& inst, const TrainConfig& cfg, const RewardFn& reward) {
    const std::size_t k = g.trajectories.size();
    std::vector<double> shaped(k), kls(k);
    for (std::size_t i = 0; i < k; ++i) {
        Trajectory& t = g.trajectories[i];
        t.instance_id = inst.id;
        t.reward = reward(inst, t.response);
        t.flags = detect_all(t, cfg.penalty);
        t.shaped_reward = cfg.penalties_enabled ? shape_reward(t.reward, t.flags) : static_cast<double>(t.reward);
        shaped[i] = t.shaped_reward;
        kls[i] = t.kl;
    }
    g.normalized_rewards = loo_normalize(shaped);
    g.normalized_kls = loo_normalize(kls);
    g.advantages = assemble_advantages(g, cfg.beta);
    auto sum = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); };
    if (std::abs(sum(g.normalized_rewards)) > 1e-9 || std::abs(sum(g.normalized_kls)) > 1e-9 ||
        std::abs(sum(g.advantages)) > 1e-9)
        throw NumericError("zero-sum invariant violated in rollout group");
    for (std::size_t i = 0; i < k; ++i) {
        g.trajectories[i].normalized_reward = g.normalized_rewards[i];
        g.trajectories[i].normalized_kl = g.normalized_kls[i];
        g.trajectories[i].advantage = g.advantages[i];
    }
}

/// One RL step (step index = state.step + 1). On a numeric error the state is
/// left exactly as it was.
inline StepResult rl_step(TrainerState& state, std::span<const TaskInstance> batch, const TrainConfig& cfg,
                          const RewardFn& reward = default_reward) {
    cfg.validate();
    if (static_cast<int>(batch.size()) != cfg.prompts_per_step)
        throw ConfigError("batch size must equal prompts_per_step");
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t step = state.step + 1;
    SamplingConfig scfg = cfg.sampling;
    scfg.seed = derive_seed(cfg.seed, {0x726cULL, step});

    PolicyEvaluator pe(state.params), re(state.ref.arch, state.ref.theta);
    StepResult res;
    res.groups.resize(batch.size());
    parallel_for(batch.size(), [&](std::size_t p) {
        RolloutGroup& g = res.groups[p];
        g.instance_id = batch[p].id;
        g.trajectories = oversample(pe, re, batch[p].question, scfg, p);
        score_group(g, batch[p], cfg, reward);
    });

    std::size_t n = 0;
    for (const auto& g : res.groups) n += g.trajectories.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    GradientBuffer grad(state.params.arch);
    Backprop bp(pe);
    for (const auto& g : res.groups) {
        for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
            const double a = g.advantages[i];
            if (a == 0.0 && cfg.entropy_coef == 0.0) continue;
            const Trajectory& t = g.trajectories[i];
            bp.accumulate(t.prompt, t.response, a * inv_n, cfg.entropy_coef * inv_n);
        }
    }
    bp.flush(grad);
    if (!all_finite(grad.g)) throw NumericError("non-finite gradient at step " + std::to_string(step));

    StepMetrics& m = res.metrics;
    m.grad_norm = clip_global_norm(grad.g, cfg.clip_norm);
    AdamState opt = state.opt;
    PolicyParams next = adam_update(state.params, grad.g, opt, cfg.adam);
    if (!all_finite(next.theta)) throw NumericError("non-finite parameters after update at step " + std::to_string(step));

    double tokens = 0.0, entropy = 0.0;
    for (const auto& g : res.groups) {
        for (const auto& t : g.trajectories) {
            m.mean_shaped_reward += t.shaped_reward;
            m.accuracy += t.reward;
            m.mean_response_length += static_cast<double>(t.response.size());
            m.mean_kl += t.kl;
            tokens += static_cast<double>(t.response.size());
            entropy += t.entropy_sum;
            m.flags.add(t.flags);
        }
    }
    m.step = step;
    m.mean_shaped_reward *= inv_n;
    m.accuracy *= inv_n;
    m.mean_response_length *= inv_n;
    m.mean_kl *= inv_n;
    m.entropy = tokens > 0 ? entropy / tokens : 0.0;
    m.overlong_ratio = m.flags.overlong_ratio();
    m.cumulative_kl = state.cumulative_kl + m.mean_kl;

    state.ref = ema_update(state.ref, next, cfg.ema_decay);
    state.params = std::move(next);
    state.opt = std::move(opt);
    state.step = step;
    state.cumulative_kl = m.cumulative_kl;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

struct SftExample {
    TokenSeq prompt;
    TokenSeq response;
};

inline SftExample sft_example(const TaskInstance& inst, const SftTrace& trace) {
    return SftExample{inst.question, trace.tokens};
}

/// Mean token-level cross-entropy of the responses (prompt positions excluded).
inline double mean_cross_entropy(const PolicyParams& params, std::span<const SftExample> batch) {
    PolicyEvaluator ev(params);
    double nll = 0.0, tokens = 0.0;
    for (const auto& ex : batch) {
        nll -= sequence_log_prob(ev, ex.prompt, ex.response);
        tokens += static_cast<double>(std::count_if(ex.response.begin(), ex.response.end(),
                                                    [](Token t) { return t != tok::PAD; }));
    }
    return tokens > 0 ? nll / tokens : 0.0;
}

/// One gradient step on the mean token NLL; returns the pre-update loss.
inline double sft_step(PolicyParams& params, AdamState& opt, std::span<const SftExample> batch,
                       const AdamConfig& adam, double clip_norm = 1.0) {
    if (batch.empty()) throw ConfigError("empty SFT batch");
    double tokens = 0.0;
    for (const auto& ex : batch)
        tokens += static_cast<double>(std::count_if(ex.response.begin(), ex.response.end(),
                                                    [](Token t) { return t != tok::PAD; }));
    if (tokens == 0.0) throw ConfigError("SFT batch has no response tokens");
    PolicyEvaluator ev(params);
    Backprop bp(ev);
    GradientBuffer grad(params.arch);
    double logp = 0.0;
    for (const auto& ex : batch) logp += bp.accumulate(ex.prompt, ex.response, 1.0 / tokens, 0.0);
    bp.flush(grad);
    if (!all_finite(grad.g) || !std::isfinite(logp)) throw NumericError("non-finite SFT gradient");
    clip_global_norm(grad.g, clip_norm);
    AdamState next_opt = opt;
    PolicyParams next = adam_update(params, grad.g, next_opt, adam);
    if (!all_finite(next.theta)) throw NumericError("non-finite parameters after SFT update");
    params = std::move(next);
    opt = std::move(next_opt);
    return -logp / tokens;
}

inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t batch_size,
                                              std::size_t dataset_size);

/// Epochs of minibatch SFT; returns the mean pre-update batch loss of each
/// epoch. With shuffle off, batches are consecutive slices in corpus order
/// (a trailing partial batch is dropped). on_epoch(epoch, loss) runs after
/// every epoch.
inline std::vector<double> sft_train(PolicyParams& params, AdamState& opt, std::span<const SftExample> data,
                                     int epochs, int batch_size, const AdamConfig& adam, double clip_norm,
                                     std::uint64_t seed, bool shuffle = true,
                                     const std::function<void(int, double)>& on_epoch = {}) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    std::vector<double> losses;
    if (data.empty() || epochs == 0) return losses;
    const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size());
    const std::uint64_t per_epoch = data.size() / bs;
    const std::uint64_t stream = derive_seed(seed, {0x736674ULL});
    std::vector<SftExample> batch(bs);
    for (int e = 0; e < epochs; ++e) {
        double sum = 0.0;
        for (std::uint64_t i = 0; i < per_epoch; ++i) {
            if (shuffle) {
                const auto idx =
                    batch_indices(stream, static_cast<std::uint64_t>(e) * per_epoch + i + 1, bs, data.size());
                for (std::size_t j = 0; j < bs; ++j) batch[j] = data[idx[j]];
            } else {
                for (std::size_t j = 0; j < bs; ++j) batch[j] = data[i * bs + j];
            }
            sum += sft_step(params, opt, batch, adam, clip_norm);
        }
        losses.push_back(sum / static_cast<double>(per_epoch));
        if (on_epoch) on_epoch(e + 1, losses.back());
    }
    return losses;
}

/// Indices of the prompts used at a 1-based step: consecutive windows over a
/// stream of per-epoch shuffles seeded by (seed, epoch).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t batch_size,
                                              std::size_t dataset_size) {
    if (dataset_size == 0) throw ConfigError("empty dataset");
    if (step < 1) throw ConfigError("steps are 1-based");
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    std::uint64_t cached_epoch = ~std::uint64_t{0};
    std::vector<std::size_t> perm;
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::uint64_t pos = (step - 1) * batch_size + i;
        const std::uint64_t epoch = pos / dataset_size;
        if (epoch != cached_epoch) {
            perm.resize(dataset_size);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            SplitMix64 rng = substream(seed, {0x65706f6368ULL, epoch});
            for (std::size_t j = dataset_size; j > 1; --j) std::swap(perm[j - 1], perm[rng.below(j)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % dataset_size]);
    }
    return out;
}

struct EvalResult {
    double accuracy = 0.0;
    std::map<int, std::pair<int, int>> by_difficulty;  // difficulty -> (correct, total)
    std::vector<Decoded> responses;
};

/// Greedy-decoding accuracy of the policy on a set of instances.
inline EvalResult greedy_eval(const PolicyParams& params, std::span<const TaskInstance> instances, int max_new_tokens,
                              const RewardFn& reward = default_reward) {
    PolicyEvaluator ev(params);
    EvalResult r;
    r.responses.resize(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) {
        r.responses[i] = greedy_decode(ev, instances[i].question, max_new_tokens);
    });
    int correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const int ok = reward(instances[i], r.responses[i].response);
        correct += ok;
        auto& [c, t] = r.by_difficulty[instances[i].difficulty];
        c += ok;
        t += 1;
    }
    r.accuracy = instances.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(instances.size());
    return r;
}

}  // namespace t1lab
