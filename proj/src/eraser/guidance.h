#pragma once

// Attention-energy guidance: classifier-free combination, the erasure energy
// on aggregated cross-attention maps, and the reweighted perturbation that
// turns the energy gradient into a modified noise prediction.

#include <string>
#include <vector>

#include "eraser/denoiser.h"
#include "eraser/schedule.h"

namespace eraser {

// How the L1 target for an attention map is formed inside the energy:
//  - scaled_map: target is c*A with the scalar c = min + lambda*(max-min).
//  - quantile:   target is the constant matrix holding A's 80th-percentile
//    value (the "top 20%" reading), lambda unused for the target scalar.
enum class TargetMode { scaled_map, quantile };

// What an optional user mask does:
//  - off:     no mask, reweight maps come from attention products.
//  - replace: the mask replaces the per-object reweight map.
//  - anchor:  an extra background-anchoring gradient term is added; reweight
//    maps stay attention-derived.
enum class MaskMode { off, replace, anchor };

TargetMode target_mode_from(const std::string & s);
MaskMode mask_mode_from(const std::string & s);
std::string to_string(TargetMode m);
std::string to_string(MaskMode m);

struct GuidanceConfig {
    double s = 2.0;      // classifier-free scale
    double v = 1.0;      // strength multiplier on the perturbation
    double lambda = 0.8; // erasure degree in [0,1]
    // Attention-guidance window, fractions of T; active when lo*T < t < hi*T.
    double t_attn_lo = 0.1, t_attn_hi = 0.8;
    // Latent-optimization window (same convention) and repeats per step.
    double t_opt_lo = 0.5, t_opt_hi = 0.8;
    int n_opt = 1;
    // Per erased object: prompt positions of the words describing it.
    std::vector<std::vector<int>> target_tokens;
    TargetMode target_mode = TargetMode::scaled_map;
    MaskMode mask_mode = MaskMode::off;
    Tensor mask; // [H,W] in {0,1}; required when mask_mode != off
    // Ablation switch: when false the perturbation is the raw energy gradient
    // (no per-object reweight map, no mask modulation).
    bool reweight = true;

    void validate(int image_size) const;
    bool attn_active(int t, int T) const;
    bool opt_active(int t, int T) const;
};

// (1+s)*eps_cond - s*eps_uncond, elementwise in f32. Bit-compatible with the
// tape's two-term lincomb of the same coefficients.
Tensor cfg_combine(const Tensor & eps_cond, const Tensor & eps_uncond, double s);

// Erasure energy of one aggregated map: || A - c*A ||_1 with the scalar
// c = min(A) + lambda*(max(A) - min(A)) held constant (no gradient through
// min/max). Differentiable through A only.
double erase_energy(const Tensor & a, double lambda);

// Tape version; `a` must be a 2-D map node. The L1 target is built per
// `mode` (see TargetMode); all target scalars are read from detached values.
Tape::Id erase_energy_node(Tape & tape, Tape::Id a, double lambda, TargetMode mode);

// Everything guided_noise produces for one timestep.
struct GuidedNoise {
    Tensor eps_guid;   // noise prediction including the erase perturbation
    Tensor eps_cfg;    // plain classifier-free prediction
    AttentionRecord record;
    double energy = 0.0;     // summed erasure energy over targets (0 when idle)
    double perturb_l1 = 0.0; // ||v * P||_1 of the applied perturbation
    bool active = false;     // guidance term actually computed this step
};

// One guided prediction at timestep t.
//   null_t    optimized unconditional embedding for this step (required when
//             s != 0).
//   kv        none/record/inject handling for self-attention (inject needs
//             k_inj/v_inj).
//   zinv_prev / t_prev  inversion-trajectory latent at the destination level;
//             required only for MaskMode::anchor.
// Outside the attention window, or with v = 0, eps_guid equals eps_cfg and no
// gradient work happens.
GuidedNoise guided_noise(const Tensor & z, int t, const PromptTokens & tokens, const Tensor * null_t,
                         const DenoiserWeights & w, const NoiseSchedule & sched,
                         const GuidanceConfig & cfg, KvMode kv = KvMode::none,
                         const Tensor * k_inj = nullptr, const Tensor * v_inj = nullptr,
                         const Tensor * zinv_prev = nullptr, int t_prev = -1);

} // namespace eraser
