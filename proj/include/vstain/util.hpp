#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace vstain {

// Deterministic RNG. mt19937 output is pinned by the standard; the uniform
// and normal transforms below are implemented by hand because the std
// distributions are implementation-defined and would break bit-reproducibility
// across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_()) * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint32_t below(uint32_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        // rejection sampling keeps the draw unbiased
        const uint32_t limit = ~uint32_t(0) - (~uint32_t(0) % n);
        uint32_t v;
        do { v = gen_(); } while (v >= limit);
        return v % n;
    }

    // standard normal via Box-Muller; caches the second variate
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used for config hashes and checkpoint integrity checks
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace vstain
