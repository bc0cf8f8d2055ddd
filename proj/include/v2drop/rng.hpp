#pragma once

#include <cmath>
#include <cstdint>

namespace v2drop {

// Deterministic PRNG used everywhere seeds appear: a xoshiro256** generator
// whose state is expanded from the user seed with splitmix64. Both algorithms
// are written out here so that identical seeds produce identical streams on
// every platform, independent of the standard library.
//
// splitmix64: Steele, Lea, Flood (2014). xoshiro256**: Blackman, Vigna (2018).

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Xoshiro256ss {
public:
    explicit Xoshiro256ss(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) {
            word = splitmix64(sm);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [-1, 1).
    double next_symmetric() {
        return 2.0 * next_double() - 1.0;
    }

    // Standard normal via Box-Muller. Draws two doubles per call and caches
    // nothing, so the stream position is a pure function of the call count.
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) {
            u1 = next_double();
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, bound) by rejection, bias-free.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) {
                return r % bound;
            }
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
};

// Derives an independent child seed, used to decorrelate per-trial or
// per-segment streams from one workload seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t lane) {
    std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ull * (lane + 1));
    return splitmix64(s);
}

} // namespace v2drop
