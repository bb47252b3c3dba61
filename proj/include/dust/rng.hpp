#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace dust {

// Deterministic RNG with a fixed, documented algorithm. The generator is part
// of the external contract: identical seeds must produce identical draw
// sequences across runs and platforms.
//
//   state     : xoshiro256++ (Blackman & Vigna), 4x64-bit words
//   seeding   : splitmix64 expansion of the 64-bit seed
//   uniform   : (next() >> 11) * 2^-53, in [0, 1)
//   normal    : Box-Muller, one value per call, consuming exactly two
//               uniforms: sqrt(-2 ln u1) * cos(2 pi u2), u1 floored at 2^-53.
//               No cached second value, so the generator is stateless beyond
//               the four state words.
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed) : seed_(seed) {
        uint64_t x = seed;
        for (auto& word : state_) {
            word = splitmix64(x);
        }
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() {
        double u1 = uniform();
        if (u1 < 0x1.0p-53) {
            u1 = 0x1.0p-53;
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    // Independent stream for worker `index`, derived as seed + index.
    SeededRng derive(uint64_t index) const { return SeededRng(seed_ + index); }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

  private:
    static constexpr double kPi = 3.14159265358979323846;

    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t seed_;
    std::array<uint64_t, 4> state_{};
};

}  // namespace dust
