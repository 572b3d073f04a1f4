#include "eraser/rng.h"

#include <cmath>

namespace eraser {

namespace {

constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

inline uint64_t avalanche(uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

} // namespace

uint64_t Rng::mix_bits(uint64_t seed, uint64_t stream, uint64_t index) {
    uint64_t x = avalanche(seed + kGolden * (stream + 1));
    x = avalanche(x ^ (index + kGolden));
    return avalanche(x + kGolden * index);
}

double Rng::uniform_at(uint64_t index) const {
    // Top 53 bits -> [0, 1).
    return static_cast<double>(mix_bits(seed_, stream_, index) >> 11) * 0x1.0p-53;
}

double Rng::gaussian_at(uint64_t index) const {
    double u1 = uniform_at(index);
    double u2 = uniform_at(index + 1);
    // 1 - u1 is in (0, 1], so the log is finite.
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * M_PI * u2);
}

uint32_t Rng::uniform_int(uint32_t n) {
    if (n == 0) throw contract_error("Rng::uniform_int: n must be positive");
    // u < 1 guarantees the result is in [0, n).
    return static_cast<uint32_t>(uniform() * static_cast<double>(n));
}

void Rng::fill_gaussian(Tensor & t) {
    for (auto & v : t.data) v = static_cast<float>(gaussian());
}

Tensor Rng::gaussian_tensor(Shape s) {
    Tensor t(std::move(s));
    fill_gaussian(t);
    return t;
}

} // namespace eraser
