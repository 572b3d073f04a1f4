#pragma once

// Metrics against synthetic ground truth: reconstruction fidelity, erasure
// efficacy (attention response drop), and background preservation.

#include "eraser/sampler.h"
#include "eraser/scene.h"

namespace eraser {

struct EraseReport {
    double psnr_reconstruction = 0.0; // dB, scene image vs reconstruction
    double attn_drop = 0.0;           // 1 - edit/recon mean target attention in the GT mask
    double bg_mse = 0.0;              // edit vs reconstruction outside every object mask
    double obj_mse_vs_clean = 0.0;    // edit vs without-target rendering inside the GT mask
    int attn_step = -1;               // schedule step the attention was measured at
};

// 10*log10(4 / MSE) for [-1,1] images; +inf for bit-identical inputs.
double psnr(const Tensor & a, const Tensor & b);

// Grid level whose schedule step lies closest to the middle of the attention
// window (ties to the lower step); -1 when no level is strictly inside it.
int attention_midpoint_level(const std::vector<int> & grid, const GuidanceConfig & cfg, int T);

EraseReport erase_report(const EditResult & result, const Scene & scene, int target_index,
                         const DenoiserWeights & w, const NoiseSchedule & sched);

} // namespace eraser
