#pragma once

// Two-branch editing sampler: a reconstruction branch that denoises with the
// classifier-free prediction while recording self-attention K/V, and an edit
// branch that re-uses those K/V, optionally refines its latent in-place, and
// takes split-noise DDIM updates with the guided prediction in the direction
// term.

#include <vector>

#include "eraser/guidance.h"
#include "eraser/inversion.h"

namespace eraser {

struct SamplerConfig {
    bool inject_self_attention = true;
};

struct StepLog {
    int t_from = 0, t_to = 0;
    double energy = 0.0;     // erasure energy at the prediction used for the update
    double perturb_l1 = 0.0; // L1 norm of the applied perturbation at that prediction
    int repeats = 0;         // latent-optimization repeats applied this step
    // Energy at every prediction of the step: one entry per repeat plus the
    // final update prediction.
    std::vector<double> repeat_energies;
};

struct EditResult {
    Tensor edit;  // final edit-branch latent (the image, [n,n,3])
    Tensor recon; // final reconstruction-branch latent
    std::vector<StepLog> logs;             // one per sampling step
    std::vector<Tensor> lat_recon, lat_edit; // latents at every grid level, index = grid level
    std::vector<int> grid;
    GuidanceConfig config;
};

// One latent refinement: z + sqrt(1-abar_t)*(eps_guid - eps_cfg). Exactly z
// when the two predictions coincide; timestep unchanged.
Tensor classifier_optimize_step(const Tensor & z, const Tensor & eps_cfg, const Tensor & eps_guid,
                                int t, const NoiseSchedule & sched);

// Runs both branches from the bundle's terminal latent down to the image.
EditResult sample_edit(const InversionBundle & bundle, const DenoiserWeights & w,
                       const NoiseSchedule & sched, const GuidanceConfig & gcfg,
                       const SamplerConfig & scfg = SamplerConfig{});

} // namespace eraser
