#ifndef DIMR_RNG_HPP
#define DIMR_RNG_HPP

#include <cmath>
#include <cstdint>

namespace dimr {

// Deterministic splitmix64 stream. std::mt19937 + std::normal_distribution is
// not bit-stable across standard libraries, and reproducible CSV artifacts are
// part of the contract, so we roll our own draws.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) : state(seed), has_spare_(false), spare_(0.0) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; the spare is cached so the draw
    // sequence does not depend on how results are consumed
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // independent substream (for per-chain / per-shard generators)
    Rng split(uint64_t salt) const {
        Rng r(state ^ (0x9e3779b97f4a7c15ull * (salt + 0x632be59bd9b4e019ull)));
        r.next_u64();
        return r;
    }

  private:
    bool has_spare_;
    double spare_;
};

} // namespace dimr

#endif
