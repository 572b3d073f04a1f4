#pragma once

#include <utility>
#include <vector>

#include "eraser/denoiser.h"
#include "eraser/scene.h"
#include "eraser/schedule.h"

namespace eraser {

struct NullOptConfig {
    int inner_steps = 100;
    double lr = 1e-2;
    double stop_tol = 1e-5;
    double s = 2.0; // classifier-free scale inside the reconstruction map
};

struct InversionBundle {
    // trajectory[i] is the latent at schedule level grid[i]; trajectory[0] = z0.
    std::vector<Tensor> trajectory;
    // nulls[j] is the optimized null embedding for sampling step j
    // (the step from grid[S-j] down to grid[S-j-1]).
    std::vector<Tensor> nulls;
    std::vector<std::pair<double, double>> loss_log; // per step: (initial, final)
    PromptTokens tokens;
    std::vector<int> grid;
    int steps = 0;
    double s = 0.0;
    int image_size = 16;
    // provenance for eval
    std::vector<SceneObject> scene_objects;
    uint64_t scene_seed = 0;
    // f64-sum fingerprint of the weights the bundle was computed with; 0 when
    // unknown (hand-built bundles in tests).
    double weights_fp = 0.0;

    void check() const; // length invariants
};

// eta = 0 DDIM inversion; the noise for each upward move grid[i] -> grid[i+1]
// is predicted at the destination step with the conditional prompt (s = 0).
std::vector<Tensor> ddim_inversion(const Tensor & z0, const PromptTokens & tokens,
                                   const DenoiserWeights & w, const NoiseSchedule & sched, int steps);

// Per-timestep optimization of the null embedding so that classifier-free
// guided DDIM reproduces the inversion trajectory. Chained initialization
// (first step starts from the trained NULL row), Adam per step, early stop at
// stop_tol, abort at 10x the initial loss; always returns the best-so-far
// embedding, so final loss <= initial loss. The running latent advances via
// the reconstruction map's own output.
void null_text_optimize(InversionBundle & bundle, const DenoiserWeights & w,
                        const NoiseSchedule & sched, const NullOptConfig & cfg);

// Full inversion pipeline for a scene image.
InversionBundle invert_scene(const Scene & scene, uint64_t scene_seed, const DenoiserWeights & w,
                             const NoiseSchedule & sched, int steps, const NullOptConfig & cfg);

// Classifier-free reconstruction from the bundle's terminal latent using the
// optimized nulls (the faithful reconstruction branch).
Tensor reconstruct_with_nulls(const InversionBundle & bundle, const DenoiserWeights & w,
                              const NoiseSchedule & sched);

// s = 0 conditional DDIM sampling from the terminal latent (the no-null-text
// reconstruction baseline).
Tensor plain_ddim_reconstruct(const InversionBundle & bundle, const DenoiserWeights & w,
                              const NoiseSchedule & sched);

// Exact f64 sum fingerprint used to tie bundles to the weights that made them.
double weights_fingerprint(const DenoiserWeights & w);

void save_bundle(const std::string & path, const InversionBundle & bundle,
                 const DenoiserWeights & w, const NoiseSchedule & sched);
InversionBundle load_bundle(const std::string & path, const NoiseSchedule & expect_sched,
                            const DenoiserWeights & expect_weights);

} // namespace eraser
