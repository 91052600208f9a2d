#pragma once

// Counter-based random streams.
//
// Every draw is a pure function of (seed, stream name, counter), so a stream
// can be checkpointed as a single integer and resumed bit-exactly. The mixing
// function is SplitMix64; normals use Box-Muller on two uniforms.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace varexp {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// Named sub-streams used throughout training and sampling. Keeping them
/// apart means e.g. changing the number of Euler steps never changes which
/// base points are drawn.
namespace streams {
inline constexpr std::string_view kData = "data";
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kReparam = "reparam";
inline constexpr std::string_view kFlowTime = "flow-time";
inline constexpr std::string_view kFlowBase = "flow-base";
inline constexpr std::string_view kSampler = "sampler";
inline constexpr std::string_view kProbe = "probe";
inline constexpr std::string_view kMixture = "mixture";
}  // namespace streams

class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::string_view name, std::uint64_t counter = 0) noexcept
        : seed_(seed),
          key_(detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a64(name)))),
          counter_(counter) {}

    std::uint64_t next_u64() noexcept {
        return detail::splitmix64(key_ + 0xD1B54A32D192ED03ULL * counter_++);
    }

    /// Uniform on the open interval (0, 1).
    double uniform() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    double normal() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Index in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    /// Independent child stream, e.g. one per evaluation chunk.
    RngStream fork(std::string_view name) const noexcept {
        return RngStream(key_ ^ detail::splitmix64(counter_), name);
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }
    void set_counter(std::uint64_t c) noexcept { counter_ = c; }

    friend bool operator==(const RngStream&, const RngStream&) = default;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace varexp
