#pragma once

#include <cstdint>
#include <random>

// Thin wrapper over mt19937_64 that avoids std::uniform_*_distribution,
// whose output is implementation-defined. Everything here produces the
// same stream on every platform for a given seed.

namespace dash {

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    // double in [0, 1) with 53 random bits
    double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    float next_uniform(float lo, float hi) {
        return lo + static_cast<float>(next_unit()) * (hi - lo);
    }

    // unbiased integer in [0, n), n >= 1, via rejection sampling
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace dash
