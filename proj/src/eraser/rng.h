#pragma once

#include <cstdint>

#include "eraser/tensor.h"

namespace eraser {

// Named random streams. Draw k of stream s under seed q is a pure function
// of (q, s, k); consuming draws in one stream never perturbs another.
enum class Stream : uint64_t {
    data_gen = 1,
    init = 2,
    train_noise = 3,
    sample_noise = 4,
};

// Counter-based generator: each raw draw is splitmix64-style avalanche mixing
// of (seed, stream, index). A stateful cursor is provided for convenience but
// any draw can also be addressed directly by index.
class Rng {
  public:
    Rng(uint64_t seed, Stream stream) : seed_(seed), stream_(static_cast<uint64_t>(stream)) {}

    static uint64_t mix_bits(uint64_t seed, uint64_t stream, uint64_t index);

    // Uniform in [0, 1), 53-bit mantissa.
    double uniform_at(uint64_t index) const;
    // Standard normal via Box-Muller from the uniforms at (index, index + 1).
    double gaussian_at(uint64_t index) const;

    double uniform() { return uniform_at(cursor_++); }
    double gaussian() {
        double g = gaussian_at(cursor_);
        cursor_ += 2;
        return g;
    }

    // Uniform integer in [0, n).
    uint32_t uniform_int(uint32_t n);

    void fill_gaussian(Tensor & t);
    Tensor gaussian_tensor(Shape s);

    uint64_t seed() const { return seed_; }
    Stream stream() const { return static_cast<Stream>(stream_); }
    uint64_t cursor() const { return cursor_; }

  private:
    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
    uint64_t cursor_ = 0; // next raw draw index
};

} // namespace eraser
