#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace biascope {

// Self-contained 64-bit generator (xoshiro-style splitmix core) so results
// are identical across standard libraries. All randomness in the toolkit
// flows from one master seed through named sub-streams: stream("split"),
// stream("mask-noise"), ... which keeps multi-seed experiment protocols
// reproducible without coupling between consumers.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of randomness.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1), never exactly 0 (safe for logit/log transforms).
    double uniform_open01() {
        double u;
        do {
            u = uniform01();
        } while (u <= 0.0);
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller without caching the spare, so the stream position is a pure
    // function of the call count.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = uniform_open01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent generator for a named purpose.
    Rng stream(std::string_view name) const {
        uint64_t h = 0xcbf29ce484222325ull ^ state_;
        for (const char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(h);
    }

    Rng stream(std::string_view name, uint64_t index) const {
        Rng s = stream(name);
        s.state_ ^= 0x94d049bb133111ebull * (index + 1);
        return s;
    }

  private:
    uint64_t state_;
};

}  // namespace biascope
