#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "ilab/faults.hpp"

namespace ilab {

// Counter-based generator: every draw is a pure function of (key, counter),
// so a copied stream replays identically and named child streams never
// collide with their parent. All stochastic operations take one of these
// explicitly; there is no hidden global state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ull)), ctr_(0) {}

    // Named sub-stream (corpus / init / rollout / probe ...).
    Rng stream(std::string_view name) const { return Rng(mix(key_ ^ fnv1a(name)), 0, Tag{}); }
    // Indexed sub-stream (per utterance, per chunk, per rollout ...).
    Rng stream(std::uint64_t index) const { return Rng(mix(key_ ^ mix(index + 0x9e3779b97f4a7c15ull)), 0, Tag{}); }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++ctr_); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n), exactly uniform via rejection
    int uniform_int(int n) {
        if (n <= 0) throw ContractViolation("uniform_int needs n > 0");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t bound = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= bound);
        return static_cast<int>(x % un);
    }

    // Standard normal via Box-Muller; two fresh uniforms per draw so the
    // stream position stays a simple function of the draw count.
    double normal() {
        constexpr double two_pi = 6.283185307179586476925286766559;
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; // (0,1]
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    std::uint64_t key() const { return key_; }

private:
    struct Tag {};
    Rng(std::uint64_t key, std::uint64_t ctr, Tag) : key_(key), ctr_(ctr) {}

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static constexpr std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::uint64_t key_;
    std::uint64_t ctr_;
};

} // namespace ilab
