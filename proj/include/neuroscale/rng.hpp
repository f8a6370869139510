#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace neuroscale {

// 64-bit FNV-1a, used for config hashing and name-keyed parameter streams.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}
} // namespace detail

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2));
    return detail::splitmix64(s);
}

// Sequential deterministic stream (splitmix64 core, Box-Muller normals).
// Identical seeds give identical streams on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate small consecutive seeds
        (void)detail::splitmix64(state_);
    }

    uint64_t next_u64() { return detail::splitmix64(state_); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    uint32_t uniform_int(uint32_t n) {
        return static_cast<uint32_t>(static_cast<double>(n) * uniform());
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - uniform(); // avoid log(0)
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586477 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Counter-based draw keyed by (seed, k1, k2); stateless, order-independent.
// Sampling during generation uses this so token draws do not depend on the
// order positions are visited.
inline double keyed_uniform(uint64_t seed, uint64_t k1, uint64_t k2) {
    uint64_t s = hash_mix(hash_mix(seed, k1), k2);
    return static_cast<double>(detail::splitmix64(s) >> 11) * 0x1.0p-53;
}

} // namespace neuroscale
