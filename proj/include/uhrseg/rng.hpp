#pragma once

#include <cstdint>
#include <vector>

namespace uhrseg {

/// Deterministic 64-bit PRNG (splitmix64). Used everywhere randomness is
/// needed so that runs reproduce bit-exactly across platforms; the algorithm
/// name is recorded in dataset manifests.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    /// Uniform integer in [0, n). n must be positive.
    int64_t next_below(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + next_below(hi - lo + 1);
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = next_below(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    /// Derive an independent stream, e.g. per-iteration or per-scene.
    Rng fork(uint64_t salt) {
        Rng r(state_ ^ (0x6a09e667f3bcc909ull + salt * 0x9e3779b97f4a7c15ull));
        r.next_u64();
        return r;
    }

private:
    uint64_t state_;
};

inline const char* rng_algorithm_name() { return "splitmix64"; }

} // namespace uhrseg
