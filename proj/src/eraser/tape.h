#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "eraser/tensor.h"

namespace eraser {

// Define-by-run reverse-mode tape over a fixed op set.
//
// Conventions shared by every op:
//  - values are f32; scalar reductions (sum/mean/l1/min/max) and matmul inner
//    products accumulate in f64 with a fixed row-major summation order;
//  - images are channels-last [H,W,C]; matrices are [rows,cols];
//  - every forward output is finite-checked; a NaN/Inf raises contract_error;
//  - reduce_min / reduce_max are non-differentiable by contract: they behave
//    like stop_grad (no gradient flows through them);
//  - single-threaded evaluation, so repeated runs are bit-identical.
class Tape {
  public:
    using Id = int;

    enum class Op {
        input,
        add,
        sub,
        mul,
        add_scalar,
        mul_scalar,
        lincomb, // a*x + b*y with scalar constants
        matmul,
        linear, // x*W + b
        softmax,
        conv3x3,
        resize2x_nearest,
        resize2x_bilinear,
        group_norm,
        silu,
        token_embed,
        scale_shift, // x*(1+s) + t, per-channel, s/t packed in one [2C] vector
        reshape,
        transpose2d,
        sum,
        mean,
        l1,
        reduce_min,
        reduce_max,
        minmax_norm,
        stop_grad,
    };

    Id input(Tensor t, bool requires_grad = false);
    Id constant(Tensor t) { return input(std::move(t), false); }

    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);
    Id add_scalar(Id a, double c);
    Id mul_scalar(Id a, double c);
    Id lincomb(double ca, Id a, double cb, Id b);

    Id matmul(Id a, Id b);          // [m,k] x [k,n] -> [m,n]
    Id linear(Id x, Id w, Id b);    // [m,k] x [k,n] + b[n]
    Id softmax(Id a, int axis);     // 2-D input, axis 0 or 1
    // x:[H,W,Ci], w:[3,3,Ci,Co] (ky,kx,ci,co), b:[Co]; zero padding 1.
    Id conv3x3(Id x, Id w, Id b, int stride);
    Id resize2x_nearest(Id a);
    Id resize2x_bilinear(Id a); // half-pixel centers, clamped borders
    Id group_norm(Id x, Id gamma, Id beta, int groups);
    Id silu(Id a);
    // out[l] = table[ids[l]], except rows with ids[l] == null_id take
    // `override_row` (a [d]-sized node) when override_row >= 0.
    Id token_embed(Id table, const std::vector<int> & ids, int null_id, Id override_row);
    Id scale_shift(Id x, Id sv); // x:[H,W,C], sv:[2C] = (scale, shift)
    Id reshape(Id a, Shape s);
    Id transpose2d(Id a);

    Id sum(Id a);
    Id mean(Id a);
    Id l1(Id a);
    Id reduce_min(Id a);
    Id reduce_max(Id a);
    // (a - min) / (max - min) elementwise, f64 division rounded once to f32:
    // the extremes land exactly on 0 and 1 and everything stays in [0,1].
    // The min/max scalars are detached, so the gradient is the uniform scale
    // 1/(max - min). A constant input maps to all zeros with zero gradient.
    Id minmax_norm(Id a);
    Id stop_grad(Id a);

    // Stable reference: nodes live in a deque, so appending more nodes never
    // invalidates it. Callers may hold it across further graph building.
    const Tensor & val(Id id) const { return node(id).out; }
    // f64-accumulated value of a scalar node; exact for the scalar reductions,
    // falls back to the stored f32 for other single-element outputs.
    double scalar64(Id id) const;

    // Reverse pass from a single-element node, seeding with d(seed)/d(seed)=1.
    // Repeated passes accumulate; call zero_grads between independent seeds.
    void backward(Id seed);
    void zero_grads();

    bool has_grad(Id id) const;
    const std::vector<float> & grad(Id id) const;
    Tensor grad_tensor(Id id) const; // zeros if no gradient reached the node

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    struct Node {
        Op op = Op::input;
        Id a = -1, b = -1, c = -1;
        Tensor out;
        std::vector<float> grad; // allocated lazily during backward
        double d0 = 0.0;         // scalar coefficient (add/mul_scalar, lincomb ca)
        double d1 = 0.0;         // lincomb cb
        int i0 = 0;              // axis / stride / groups / null_id
        std::vector<int> ids;    // token ids
        std::vector<double> aux; // group_norm per-group (mean, inv_std)
        double acc64 = 0.0;      // f64 value of scalar reductions
        bool needs = false;      // gradient flows to some input leaf
    };

    Node & node(Id id);
    const Node & node(Id id) const;
    Id push(Node n, const char * what);
    bool wants(Id id) const { return id >= 0 && nodes_[static_cast<size_t>(id)].needs; }
    std::vector<float> & grad_buf(Id id);
    void backward_node(Id id);

    std::deque<Node> nodes_; // deque: growth keeps val() references stable
};

// Max over coordinates of |analytic - central_difference| / (|central_difference| + 1e-8),
// probing every coordinate of x. `f` appends a scalar-valued subgraph to the
// given tape, rooted at the supplied input id. Step h must lie in [1e-4, 1e-2].
double grad_check(const Tensor & x, double h, const std::function<Tape::Id(Tape &, Tape::Id)> & f);

} // namespace eraser
