#pragma once

// Fixed-window neural n-gram policy: embed the last W tokens, concatenate,
// two tanh layers, linear head to V logits. Parameters live in one flat
// float64 vector so optimizers, EMA and checkpoints treat them uniformly.
//
// Layout of theta (all row-major):
//   embedding  V x E
//   hidden1    H x (W*E),  bias H
//   hidden2    H x H,      bias H
//   head       V x H,      bias V
//
// PAD in a context slot contributes a zero input vector regardless of the
// PAD embedding row, and PAD response positions contribute nothing to
// log-prob, entropy or gradients.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "t1lab/error.hpp"
#include "t1lab/rng.hpp"
#include "t1lab/vocab.hpp"

namespace t1lab {

struct Architecture {
    int vocab = tok::kStandardSize;
    int window = 16;
    int embed = 8;
    int hidden = 32;
    int layers = 2;

    void validate() const {
        if (vocab <= 0 || window <= 0 || embed <= 0 || hidden <= 0)
            throw InvalidArchitecture("architecture dimensions must be positive");
        if (layers != 2) throw InvalidArchitecture("only 2 hidden layers are supported");
    }

    std::size_t input_dim() const { return static_cast<std::size_t>(window) * embed; }

    std::size_t param_count() const {
        const std::size_t v = vocab, e = embed, h = hidden;
        return v * e + h * input_dim() + h + h * h + h + v * h + v;
    }

    bool operator==(const Architecture&) const = default;
};

/// Offsets of each tensor inside the flat parameter vector.
struct ParamLayout {
    std::size_t emb, w1, b1, w2, b2, w3, b3, total;

    explicit ParamLayout(const Architecture& a) {
        const std::size_t v = a.vocab, e = a.embed, h = a.hidden;
        emb = 0;
        w1 = emb + v * e;
        b1 = w1 + h * a.input_dim();
        w2 = b1 + h;
        b2 = w2 + h * h;
        w3 = b2 + h;
        b3 = w3 + v * h;
        total = b3 + v;
    }
};

struct PolicyParams {
    Architecture arch;
    std::vector<double> theta;

    void validate() const {
        arch.validate();
        if (theta.size() != arch.param_count())
            throw ShapeError("parameter vector length " + std::to_string(theta.size()) +
                             " does not match architecture (" + std::to_string(arch.param_count()) + ")");
    }
};

struct ReferenceSnapshot {
    Architecture arch;
    std::vector<double> theta;
    std::uint64_t step = 0;

    static ReferenceSnapshot from(const PolicyParams& p, std::uint64_t step = 0) {
        return ReferenceSnapshot{p.arch, p.theta, step};
    }
    PolicyParams as_params() const { return PolicyParams{arch, theta}; }
};

using LogitsRow = std::vector<double>;

struct GradientBuffer {
    std::vector<double> g;
    std::size_t count = 0;

    GradientBuffer() = default;
    explicit GradientBuffer(const Architecture& a) : g(a.param_count(), 0.0) {}

    void zero() {
        std::fill(g.begin(), g.end(), 0.0);
        count = 0;
    }
};

inline bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

/// Deterministic init: every weight tensor is uniform in +-1/sqrt(fan_in)
/// (embedding fan-in is 1, it is a one-hot lookup); biases start at zero and
/// so does the PAD embedding row.
inline PolicyParams init_params(std::uint64_t seed, const Architecture& arch) {
    arch.validate();
    const ParamLayout L(arch);
    PolicyParams p{arch, std::vector<double>(L.total, 0.0)};
    auto fill = [&](std::size_t begin, std::size_t n, double fan_in, std::uint64_t tag) {
        SplitMix64 rng = substream(seed, {tag});
        const double scale = 1.0 / std::sqrt(fan_in);
        for (std::size_t i = 0; i < n; ++i) p.theta[begin + i] = rng.symmetric(scale);
    };
    const std::size_t v = arch.vocab, e = arch.embed, h = arch.hidden;
    fill(L.emb, v * e, 1.0, 1);
    for (std::size_t k = 0; k < e; ++k) p.theta[L.emb + static_cast<std::size_t>(tok::PAD) * e + k] = 0.0;
    fill(L.w1, h * arch.input_dim(), static_cast<double>(arch.input_dim()), 2);
    fill(L.w2, h * h, static_cast<double>(h), 3);
    fill(L.w3, v * h, static_cast<double>(h), 4);
    return p;
}

inline double min_fan_in(const Architecture& a) {
    return std::min({1.0, static_cast<double>(a.input_dim()), static_cast<double>(a.hidden)});
}

/// Numerically stable log-softmax (max subtraction).
inline std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    auto out = log_softmax(logits);
    for (double& x : out) x = std::exp(x);
    return out;
}

/// Shannon entropy (nats) of softmax(logits).
inline double softmax_entropy(std::span<const double> logits) {
    const auto lp = log_softmax(logits);
    double h = 0.0;
    for (double l : lp) h -= std::exp(l) * l;
    return std::max(h, 0.0);
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using MatMap = Eigen::Map<RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
}  // namespace detail

/// Per-position activations, reused across calls to avoid allocation.
struct Activations {
    std::vector<Token> window;
    Eigen::VectorXd h1, h2, logits;
};

/// Read-only compiled view of a parameter vector. Precomputes the projection
/// of every (window slot, token) pair through the first layer so a forward
/// pass costs O(W*H + H*H + H*V). The view borrows theta; keep it alive.
class PolicyEvaluator {
public:
    PolicyEvaluator(const Architecture& arch, std::span<const double> theta)
        : arch_(arch), layout_(arch), theta_(theta) {
        arch_.validate();
        if (theta.size() != arch_.param_count())
            throw ShapeError("parameter vector length does not match architecture");
        const int V = arch_.vocab, W = arch_.window, E = arch_.embed, H = arch_.hidden;
        proj_.assign(static_cast<std::size_t>(W) * V * H, 0.0);
        detail::ConstMatMap emb(theta_.data() + layout_.emb, V, E);
        detail::ConstMatMap w1(theta_.data() + layout_.w1, H, W * E);
        for (int w = 0; w < W; ++w) {
            // proj_w (V x H) = emb (V x E) * w1_block_w^T (E x H)
            detail::MatMap pw(proj_.data() + static_cast<std::size_t>(w) * V * H, V, H);
            pw.noalias() = emb * w1.middleCols(static_cast<Eigen::Index>(w) * E, E).transpose();
            pw.row(tok::PAD).setZero();
        }
    }

    explicit PolicyEvaluator(const PolicyParams& p) : PolicyEvaluator(p.arch, p.theta) {}

    const Architecture& arch() const noexcept { return arch_; }
    const ParamLayout& layout() const noexcept { return layout_; }
    std::span<const double> theta() const noexcept { return theta_; }

    void check_token(Token t) const {
        if (t < 0 || t >= arch_.vocab)
            throw InvalidToken("token id " + std::to_string(t) + " outside vocabulary of size " +
                               std::to_string(arch_.vocab));
    }

    /// Fills act.window with the last W tokens of context (left-padded).
    void load_window(std::span<const Token> context, Activations& act) const {
        const int W = arch_.window;
        act.window.assign(static_cast<std::size_t>(W), tok::PAD);
        const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(context.size());
        for (int w = 0; w < W; ++w) {
            const std::ptrdiff_t idx = n - W + w;
            if (idx >= 0) {
                check_token(context[static_cast<std::size_t>(idx)]);
                act.window[static_cast<std::size_t>(w)] = context[static_cast<std::size_t>(idx)];
            }
        }
    }

    void forward(std::span<const Token> context, Activations& act) const {
        load_window(context, act);
        forward_window(act);
    }

    void forward_window(Activations& act) const {
        const int V = arch_.vocab, W = arch_.window, H = arch_.hidden;
        act.h1 = detail::ConstVecMap(theta_.data() + layout_.b1, H);
        for (int w = 0; w < W; ++w) {
            const Token t = act.window[static_cast<std::size_t>(w)];
            if (t == tok::PAD) continue;
            act.h1 += detail::ConstVecMap(proj_.data() + (static_cast<std::size_t>(w) * V + t) * H, H);
        }
        act.h1 = act.h1.array().tanh();
        detail::ConstMatMap w2(theta_.data() + layout_.w2, H, H);
        act.h2.noalias() = w2 * act.h1;
        act.h2 += detail::ConstVecMap(theta_.data() + layout_.b2, H);
        act.h2 = act.h2.array().tanh();
        detail::ConstMatMap w3(theta_.data() + layout_.w3, V, H);
        act.logits.noalias() = w3 * act.h2;
        act.logits += detail::ConstVecMap(theta_.data() + layout_.b3, V);
    }

private:
    Architecture arch_;
    ParamLayout layout_;
    std::span<const double> theta_;
    std::vector<double> proj_;
};

inline LogitsRow forward_logits(const PolicyParams& params, std::span<const Token> context) {
    params.validate();
    PolicyEvaluator ev(params);
    Activations act;
    ev.forward(context, act);
    return LogitsRow(act.logits.data(), act.logits.data() + act.logits.size());
}

namespace detail {
inline void check_response(std::span<const Token> response) {
    if (response.empty()) throw ShapeError("response must be non-empty");
}

/// Calls fn(position, activations) for every non-PAD response position with
/// the context prompt + response[:j].
template <class Fn>
void for_each_response_position(const PolicyEvaluator& ev, std::span<const Token> prompt,
                                std::span<const Token> response, Fn&& fn) {
    TokenSeq ctx(prompt.begin(), prompt.end());
    ctx.reserve(prompt.size() + response.size());
    Activations act;
    for (std::size_t j = 0; j < response.size(); ++j) {
        const Token y = response[j];
        ev.check_token(y);
        if (y != tok::PAD) {
            ev.forward(ctx, act);
            fn(j, act);
        }
        ctx.push_back(y);
    }
}
}  // namespace detail

inline double sequence_log_prob(const PolicyEvaluator& ev, std::span<const Token> prompt,
                                std::span<const Token> response) {
    detail::check_response(response);
    double total = 0.0;
    detail::for_each_response_position(ev, prompt, response, [&](std::size_t j, const Activations& act) {
        const auto lp = log_softmax(std::span<const double>(act.logits.data(), act.logits.size()));
        total += lp[static_cast<std::size_t>(response[j])];
    });
    return total;
}

inline double sequence_log_prob(const PolicyParams& params, std::span<const Token> prompt,
                                std::span<const Token> response) {
    return sequence_log_prob(PolicyEvaluator(params), prompt, response);
}

inline double token_entropy_sum(const PolicyEvaluator& ev, std::span<const Token> prompt,
                                std::span<const Token> response) {
    detail::check_response(response);
    double total = 0.0;
    detail::for_each_response_position(ev, prompt, response, [&](std::size_t, const Activations& act) {
        total += softmax_entropy(std::span<const double>(act.logits.data(), act.logits.size()));
    });
    return total;
}

inline double token_entropy_sum(const PolicyParams& params, std::span<const Token> prompt,
                                std::span<const Token> response) {
    return token_entropy_sum(PolicyEvaluator(params), prompt, response);
}

/// Accumulates gradients of
///   -coefficient * log pi(y|x) - entropy_coefficient * sum_j H_j
/// for many trajectories against one fixed parameter vector. First-layer and
/// embedding gradients are gathered per (slot, token) and expanded once in
/// flush(), which keeps the per-token cost independent of W*E.
class Backprop {
public:
    explicit Backprop(const PolicyEvaluator& ev)
        : ev_(ev), dense_(ev.arch().param_count(), 0.0),
          slot_grad_(static_cast<std::size_t>(ev.arch().window) * ev.arch().vocab * ev.arch().hidden, 0.0) {}

    /// Returns the sequence log-prob as a by-product.
    double accumulate(std::span<const Token> prompt, std::span<const Token> response, double coefficient,
                      double entropy_coefficient) {
        if (!std::isfinite(coefficient) || !std::isfinite(entropy_coefficient))
            throw NumericError("backward coefficients must be finite");
        detail::check_response(response);
        const Architecture& a = ev_.arch();
        const ParamLayout& L = ev_.layout();
        const int V = a.vocab, H = a.hidden;
        const double* theta = ev_.theta().data();
        detail::ConstMatMap w2(theta + L.w2, H, H);
        detail::ConstMatMap w3(theta + L.w3, V, H);
        detail::VecMap db1(dense_.data() + L.b1, H);
        detail::MatMap dw2(dense_.data() + L.w2, H, H);
        detail::VecMap db2(dense_.data() + L.b2, H);
        detail::MatMap dw3(dense_.data() + L.w3, V, H);
        detail::VecMap db3(dense_.data() + L.b3, V);

        Eigen::VectorXd dz(V), dz2(H), dz1(H);
        double logp_total = 0.0;
        detail::for_each_response_position(ev_, prompt, response, [&](std::size_t j, const Activations& act) {
            const auto lp = log_softmax(std::span<const double>(act.logits.data(), act.logits.size()));
            const Token y = response[j];
            logp_total += lp[static_cast<std::size_t>(y)];
            double entropy = 0.0;
            for (int k = 0; k < V; ++k) entropy -= std::exp(lp[k]) * lp[k];
            for (int k = 0; k < V; ++k) {
                const double p = std::exp(lp[k]);
                dz[k] = coefficient * (p - (k == y ? 1.0 : 0.0)) + entropy_coefficient * p * (lp[k] + entropy);
            }
            db3 += dz;
            dw3.noalias() += dz * act.h2.transpose();
            dz2.noalias() = w3.transpose() * dz;
            dz2.array() *= 1.0 - act.h2.array().square();
            db2 += dz2;
            dw2.noalias() += dz2 * act.h1.transpose();
            dz1.noalias() = w2.transpose() * dz2;
            dz1.array() *= 1.0 - act.h1.array().square();
            db1 += dz1;
            for (int w = 0; w < a.window; ++w) {
                const Token t = act.window[static_cast<std::size_t>(w)];
                if (t == tok::PAD) continue;
                detail::VecMap(slot_grad_.data() + (static_cast<std::size_t>(w) * V + t) * H, H) += dz1;
            }
        });
        ++count_;
        return logp_total;
    }

    /// Adds everything accumulated so far into grad and resets the internal state.
    void flush(GradientBuffer& grad) {
        const Architecture& a = ev_.arch();
        if (grad.g.size() != a.param_count()) throw ShapeError("gradient buffer length mismatch");
        const ParamLayout& L = ev_.layout();
        const int V = a.vocab, W = a.window, E = a.embed, H = a.hidden;
        const double* theta = ev_.theta().data();
        detail::ConstMatMap emb(theta + L.emb, V, E);
        detail::ConstMatMap w1(theta + L.w1, H, W * E);
        detail::MatMap demb(dense_.data() + L.emb, V, E);
        detail::MatMap dw1(dense_.data() + L.w1, H, W * E);
        for (int w = 0; w < W; ++w) {
            detail::ConstMatMap gw(slot_grad_.data() + static_cast<std::size_t>(w) * V * H, V, H);
            dw1.middleCols(static_cast<Eigen::Index>(w) * E, E).noalias() += gw.transpose() * emb;
            demb.noalias() += gw * w1.middleCols(static_cast<Eigen::Index>(w) * E, E);
        }
        demb.row(tok::PAD).setZero();
        for (std::size_t i = 0; i < dense_.size(); ++i) grad.g[i] += dense_[i];
        grad.count += count_;
        std::fill(dense_.begin(), dense_.end(), 0.0);
        std::fill(slot_grad_.begin(), slot_grad_.end(), 0.0);
        count_ = 0;
    }

private:
    const PolicyEvaluator& ev_;
    std::vector<double> dense_;
    std::vector<double> slot_grad_;
    std::size_t count_ = 0;
};

inline GradientBuffer& backward(const PolicyParams& params, std::span<const Token> prompt,
                                std::span<const Token> response, double coefficient,
                                double entropy_coefficient, GradientBuffer& grad) {
    params.validate();
    PolicyEvaluator ev(params);
    Backprop bp(ev);
    bp.accumulate(prompt, response, coefficient, entropy_coefficient);
    bp.flush(grad);
    return grad;
}

}  // namespace t1lab
