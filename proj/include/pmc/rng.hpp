#pragma once
// Counter-based random streams: every (seed, stream) pair owns an
// independent splitmix64 sequence, so path p draws the same numbers no
// matter which worker simulates it.

#include <cstdint>
#include <limits>
#include <random>

namespace pmc {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class StreamRng {
public:
    using result_type = std::uint64_t;

    StreamRng(std::uint64_t seed, std::uint64_t stream)
        : key_(splitmix64(splitmix64(seed) ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    double normal() { return gauss_(*this); }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    std::normal_distribution<double> gauss_{0.0, 1.0};
};

} // namespace pmc
