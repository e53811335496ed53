#pragma once

#include <cstdint>
#include <initializer_list>

namespace t1lab {

/// SplitMix64 (Steele, Lea & Flood 2014). Every random draw in the library goes
/// through this generator so streams are bit-identical across compilers and
/// standard libraries. The output function and the 53-bit double conversion are
/// part of the on-disk reproducibility contract and must not change.
class SplitMix64 {
public:
    explicit constexpr SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    constexpr std::uint64_t next() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    /// Uniform double in [0, 1).
    constexpr double uniform() noexcept {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [-scale, scale).
    constexpr double symmetric(double scale) noexcept { return (2.0 * uniform() - 1.0) * scale; }

    /// Uniform integer in [0, n). Uses rejection so the result is unbiased.
    constexpr std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    constexpr std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

/// Derives an independent sub-stream seed from a root seed and a path of
/// indices, e.g. (seed, step, prompt, sample). Each component is folded in with
/// a full SplitMix64 finalizer so neighbouring paths do not overlap.
constexpr std::uint64_t derive_seed(std::uint64_t root,
                                    std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t h = SplitMix64::mix(root + 0x9e3779b97f4a7c15ULL);
    for (std::uint64_t p : path) {
        h = SplitMix64::mix(h ^ SplitMix64::mix(p + 0x632be59bd9b4e019ULL));
    }
    return h;
}

inline SplitMix64 substream(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    return SplitMix64{derive_seed(root, path)};
}

}  // namespace t1lab
