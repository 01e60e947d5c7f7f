#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace act360 {

/// xoshiro256** generator seeded through SplitMix64. Output is identical on
/// every platform, unlike the std distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    /// Independent stream derived from this generator's seed and a name; does
    /// not advance this generator.
    Rng split(std::string_view stream) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller.
    double normal();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
};

}  // namespace act360
