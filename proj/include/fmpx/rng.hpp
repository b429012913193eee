#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace fmpx {

// FNV-1a 64-bit string hash; used for config fingerprints and per-layer
// seed derivation.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Mixes an arbitrary number of 64-bit keys into one seed (splitmix64 steps).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) { return mix64(mix64(a, b) ^ c); }

// Deterministic RNG. The distribution code is hand-rolled on top of the
// (standardized) mt19937 stream so draws are identical across standard
// library implementations, which std::uniform_real_distribution does not
// guarantee.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(mix64(seed))) {}

    // Uniform in [0, 1) with 24 bits of randomness (exact in float).
    float uniform() {
        return static_cast<float>(engine_() >> 8) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny compared to 2^32 so the bias is negligible for data
    // augmentation, but we still use rejection to keep draws exact.
    uint32_t uniform_int(uint32_t n) {
        if (n == 0) return 0;
        const uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        uint32_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(uniform_int(static_cast<uint32_t>(hi - lo + 1)));
    }

    bool bernoulli(float p) { return uniform() < p; }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.2831853071795864769f * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // Partial Fisher-Yates: first k entries of a random permutation of [0, n).
    template <typename OutIt>
    void sample_distinct(int n, int k, OutIt out) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = 0; i < k; ++i) {
            const int j = i + static_cast<int>(uniform_int(static_cast<uint32_t>(n - i)));
            std::swap(idx[i], idx[j]);
            *out++ = idx[i];
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_int(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 engine_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

}  // namespace fmpx
