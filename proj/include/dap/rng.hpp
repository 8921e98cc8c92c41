#pragma once

#include <cmath>
#include <cstdint>

namespace dap {

// Counter-based deterministic RNG. Each draw is a pure function of
// (seed, stream, counter), so results do not depend on call order and
// independent streams never collide.
class CounterRng {
public:
    CounterRng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

    uint64_t next_u64() { return mix(seed_, stream_, counter_++); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; consumes two counters per draw
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

    static uint64_t mix(uint64_t seed, uint64_t stream, uint64_t counter) {
        uint64_t x = seed;
        x = splitmix(x ^ (stream * 0x9e3779b97f4a7c15ULL));
        x = splitmix(x ^ (counter * 0xbf58476d1ce4e5b9ULL));
        return x;
    }

    // derive a sub-seed, e.g. per episode or per frame
    static uint64_t derive(uint64_t seed, uint64_t a, uint64_t b = 0) {
        return mix(seed, a, b);
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
};

}  // namespace dap
