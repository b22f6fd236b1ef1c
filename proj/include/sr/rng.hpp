#ifndef SR_RNG_HPP
#define SR_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace sr {

/// Seeded generator with explicit double mappings so streams are identical
/// across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next() { return eng_(); }

    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double up) { return lo + (up - lo) * uniform01(); }

    double normal(double sigma) {
        // Box-Muller; one draw per call keeps the stream position simple.
        double u1 = uniform01(), u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    int uniform_int(int lo, int up) {  // inclusive
        return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(up - lo + 1));
    }

    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        return seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace sr

#endif
