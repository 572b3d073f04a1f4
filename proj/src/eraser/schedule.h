#pragma once

#include <vector>

#include "eraser/tape.h"
#include "eraser/tensor.h"

namespace eraser {

// Variance schedule over discrete steps t = 1..T, with alpha_bar[0] = 1.
// betas are linearly spaced from beta_start to beta_end inclusive.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;     // index 1..T, [0] unused
    std::vector<double> alpha_bar; // index 0..T, cumulative product of (1 - beta)

    static NoiseSchedule linear(int T, double beta_start, double beta_end);

    double abar(int t) const;

    // Per-step update variance for jumps t -> t_prev (t_prev < t):
    // sigma = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev).
    double sigma(int t, int t_prev, double eta) const;

    // sigma(t, t-1, eta) for t = 1..T; entry [0] is 0.
    std::vector<double> sigma_table(double eta) const;

    // {0, T/steps, 2T/steps, ..., T}; requires steps to divide T.
    std::vector<int> stride_grid(int steps) const;
};

// Forward diffusion: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
Tensor q_sample(const Tensor & x0, const Tensor & eps, int t, const NoiseSchedule & sched);

// Deterministic DDIM move between arbitrary schedule levels:
//   x0_hat = (z - sqrt(1-abar_from) * eps_x0) / sqrt(abar_from)
//   out    = sqrt(abar_to) * x0_hat + sqrt(1-abar_to) * eps_dir
// Sampling uses to < from, inversion uses to > from; eps_x0 and eps_dir are
// usually the same tensor but the guided sampler splits them.
Tensor ddim_map(const Tensor & z, const Tensor & eps_x0, const Tensor & eps_dir, int t_from, int t_to,
                const NoiseSchedule & sched);

// One reverse step t -> t_prev. With eta = 0 this is exactly
// ddim_map(z, eps, eps, t, t_prev) (bit-identical); with eta > 0 the direction
// coefficient becomes sqrt(1 - abar_prev - sigma^2) and sigma * noise is added.
Tensor ddim_step(const Tensor & z, const Tensor & eps, int t, int t_prev, const NoiseSchedule & sched,
                 double eta, const Tensor * noise);

// Inversion step t -> t_next (t_next > t), the inverse of the eta = 0 update.
Tensor ddim_invert_step(const Tensor & z, const Tensor & eps, int t, int t_next,
                        const NoiseSchedule & sched);

// Tape version of ddim_map for differentiable reconstruction losses.
Tape::Id ddim_map_node(Tape & tape, Tape::Id z, Tape::Id eps_x0, Tape::Id eps_dir, int t_from, int t_to,
                       const NoiseSchedule & sched);

} // namespace eraser
