#include "eraser/tensor.h"

#include <cstring>

namespace eraser {

int64_t shape_numel(const Shape & s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) {
            throw contract_error("shape has non-positive dimension: " + shape_str(s));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape & s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool shape_eq(const Shape & a, const Shape & b) {
    return a == b;
}

Tensor Tensor::full(Shape s, float v) {
    Tensor t(std::move(s));
    for (auto & x : t.data) x = v;
    return t;
}

Tensor Tensor::from(Shape s, std::vector<float> values) {
    if (shape_numel(s) != static_cast<int64_t>(values.size())) {
        throw contract_error("Tensor::from: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= ndim()) {
        throw contract_error("Tensor::dim: axis " + std::to_string(i) + " out of range for " +
                             shape_str(shape));
    }
    return shape[i];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() {
    grad.assign(data.size(), 0.0f);
}

void Tensor::check_finite(const char * what) const {
    eraser::check_finite(data.data(), size(), what);
}

bool all_finite(const float * p, int64_t n) {
    // A float is non-finite iff all exponent bits are set.
    uint32_t bad = 0;
    for (int64_t i = 0; i < n; ++i) {
        uint32_t bits;
        std::memcpy(&bits, &p[i], sizeof(bits));
        bad |= static_cast<uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
    }
    return bad == 0;
}

void check_finite(const float * p, int64_t n, const char * what) {
    if (!all_finite(p, n)) {
        throw contract_error(std::string("non-finite value in ") + what);
    }
}

} // namespace eraser
