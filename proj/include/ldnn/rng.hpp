#pragma once

#include <cmath>
#include <cstdint>

namespace ldnn::rng {

// SplitMix64 finalizer; the counter-based generator is built from three chained rounds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent substream key; nestable.
inline std::uint64_t substream(std::uint64_t key, std::uint64_t tag) {
    return mix64(mix64(key) + tag);
}

/// Uniform in (0,1), addressed by (key, counter). Stateless and partition-independent.
inline double uniform(std::uint64_t key, std::uint64_t counter) {
    const std::uint64_t v = mix64(mix64(key) ^ mix64(counter + 0x632be59bd9b4e019ULL));
    return static_cast<double>(v >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

/// Standard normal at index i of a stream: Box-Muller, cosine branch.
inline double normal(std::uint64_t key, std::uint64_t i) {
    const double u1 = uniform(key, 2 * i);
    const double u2 = uniform(key, 2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

/// Fills out[0..n) with the stream's normals starting at index `first`,
/// consuming both Box-Muller branches (index 2t -> cosine, 2t+1 -> sine of
/// the same uniform pair). Partition-independent: concatenated blocks match
/// one big block bit-exactly. A stream is addressed either through normal()
/// or through fill_normals(), never both.
inline void fill_normals(std::uint64_t key, std::uint64_t first, std::size_t n, double* out) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    std::size_t k = 0;
    std::uint64_t i = first;
    if ((i & 1ULL) && k < n) {  // odd start: sine branch of the preceding pair
        const double u1 = uniform(key, 2 * (i - 1));
        const double u2 = uniform(key, 2 * (i - 1) + 1);
        out[k++] = std::sqrt(-2.0 * std::log(u1)) * std::sin(two_pi * u2);
        ++i;
    }
    for (; k + 1 < n; i += 2) {
        const double u1 = uniform(key, 2 * i);
        const double u2 = uniform(key, 2 * i + 1);
        const double r = std::sqrt(-2.0 * std::log(u1));
        out[k++] = r * std::cos(two_pi * u2);
        out[k++] = r * std::sin(two_pi * u2);
    }
    if (k < n) {
        const double u1 = uniform(key, 2 * i);
        const double u2 = uniform(key, 2 * i + 1);
        out[k++] = std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }
}

} // namespace ldnn::rng
