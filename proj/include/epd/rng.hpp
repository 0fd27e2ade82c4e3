#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "epd/common.hpp"

namespace epd {

// Splittable counter-based generator. A stream is identified by
// (seed, stream name, fork index); every draw is a pure function of the key
// and a counter, so independently-derived streams never interact and any
// stream can be reproduced from its key alone.
class Rng {
  public:
    Rng(uint64_t seed, std::string_view stream)
        : key_(mix(seed ^ mix(fnv1a(stream)))) {}

    // Derived stream: same seed space, independent counter.
    Rng split(std::string_view substream) const {
        Rng r;
        r.key_ = mix(key_ ^ mix(fnv1a(substream)));
        return r;
    }
    Rng fork(uint64_t index) const {
        Rng r;
        r.key_ = mix(key_ + 0x9e3779b97f4a7c15ull * (index + 1));
        return r;
    }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw contract_error(strcat("uniform_int: empty range [", lo, ",", hi, "]"));
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1): u1 in [0,1) keeps arg > 0
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // truncated normal in [-2, 2] sigmas, the usual ViT weight init
    double trunc_normal(double std) {
        for (;;) {
            double v = normal();
            if (v >= -2.0 && v <= 2.0) return v * std;
        }
    }

  private:
    Rng() = default;

    // splitmix64 finalizer
    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace epd
