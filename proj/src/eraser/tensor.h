#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace eraser {

// Contract violations (bad shapes, non-finite values, step ordering, ...).
// The CLI maps these to exit code 1.
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user configuration. The CLI maps these to exit code 2.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape & s);
std::string shape_str(const Shape & s);
bool shape_eq(const Shape & a, const Shape & b);

// Dense row-major f32 tensor. `grad` is empty unless gradient tracking was
// requested, in which case it has the same element count as `data`.
struct Tensor {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, float v);
    static Tensor from(Shape s, std::vector<float> values);
    static Tensor scalar(float v) { return from({1}, {v}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const;

    float & operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Row-major offsets for the layouts used throughout: [H,W,C] images,
    // [rows,cols] matrices.
    int64_t at3(int y, int x, int c) const {
        return (static_cast<int64_t>(y) * shape[1] + x) * shape[2] + c;
    }
    int64_t at2(int r, int c) const { return static_cast<int64_t>(r) * shape[1] + c; }

    bool same_shape(const Tensor & o) const { return shape_eq(shape, o.shape); }

    void ensure_grad();
    void zero_grad();

    // Throws contract_error if any element is NaN/Inf.
    void check_finite(const char * what) const;
};

// Fast non-finite scan over a raw buffer (exponent-bits test).
bool all_finite(const float * p, int64_t n);

void check_finite(const float * p, int64_t n, const char * what);

} // namespace eraser
