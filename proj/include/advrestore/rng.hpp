#pragma once

#include <cstdint>
#include <string_view>

#include "advrestore/tensor.hpp"

namespace advrestore {

// xoshiro256** seeded through splitmix64. Self-contained so that seeded runs
// are bit-identical regardless of the standard library in use.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();                      // [0,1)
    double uniform(double lo, double hi);  // [lo,hi)
    int uniform_int(int lo, int hi);       // inclusive bounds
    double normal();                       // Box-Muller, mean 0, stddev 1

    Tensor normal_tensor(const std::vector<int>& shape, double stddev = 1.0);
    Tensor uniform_tensor(const std::vector<int>& shape, double lo, double hi);

    // Independent substream derived from this stream's seed and a label.
    Rng fork(std::string_view label) const;

  private:
    std::uint64_t state_[4];
    std::uint64_t seed_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t fnv1a64(std::string_view s);

}  // namespace advrestore
