#include "eraser/sampler.h"

#include <cmath>
#include <string>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

} // namespace

Tensor classifier_optimize_step(const Tensor & z, const Tensor & eps_cfg, const Tensor & eps_guid,
                                int t, const NoiseSchedule & sched) {
    require(z.same_shape(eps_cfg) && z.same_shape(eps_guid),
            "classifier_optimize_step: shape mismatch");
    float c = static_cast<float>(std::sqrt(1.0 - sched.abar(t)));
    Tensor out(z.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = z.data[i] + c * (eps_guid.data[i] - eps_cfg.data[i]);
    return out;
}

EditResult sample_edit(const InversionBundle & bundle, const DenoiserWeights & w,
                       const NoiseSchedule & sched, const GuidanceConfig & gcfg,
                       const SamplerConfig & scfg) {
    bundle.check();
    require(bundle.steps >= 1, "sample_edit: bundle has no sampling steps");
    require(bundle.grid == sched.stride_grid(bundle.steps),
            "sample_edit: bundle grid does not match the schedule");
    gcfg.validate(bundle.image_size);
    require(gcfg.s == bundle.s,
            "sample_edit: classifier-free scale differs from the one the nulls were optimized for");
    require(bundle.weights_fp == 0.0 || bundle.weights_fp == weights_fingerprint(w),
            "sample_edit: bundle was produced by different weights");

    const int S = bundle.steps;
    const PromptTokens & tokens = bundle.tokens;

    EditResult res;
    res.grid = bundle.grid;
    res.config = gcfg;
    res.lat_recon.resize(static_cast<size_t>(S) + 1);
    res.lat_edit.resize(static_cast<size_t>(S) + 1);

    Tensor z_r = bundle.trajectory[static_cast<size_t>(S)];
    Tensor z_e = z_r;
    res.lat_recon[static_cast<size_t>(S)] = z_r;
    res.lat_edit[static_cast<size_t>(S)] = z_e;

    for (int j = S; j >= 1; --j) {
        int t = bundle.grid[static_cast<size_t>(j)];
        int t_prev = bundle.grid[static_cast<size_t>(j - 1)];
        const Tensor & null_t = bundle.nulls[static_cast<size_t>(S - j)];

        // Reconstruction branch: plain classifier-free DDIM, recording the
        // self-attention K/V of its conditional pass for the edit branch.
        auto [eps_c, rec] = predict_noise(w, z_r, t, tokens, nullptr, KvMode::record);
        Tensor eps_cfg_r;
        if (gcfg.s != 0.0) {
            Tensor eps_u = predict_noise(w, z_r, t, PromptTokens::uncond(), &null_t).first;
            eps_cfg_r = cfg_combine(eps_c, eps_u, gcfg.s);
        } else {
            eps_cfg_r = eps_c;
        }
        z_r = ddim_map(z_r, eps_cfg_r, eps_cfg_r, t, t_prev, sched);
        res.lat_recon[static_cast<size_t>(j - 1)] = z_r;

        // Edit branch: guided prediction with the reconstruction K/V injected.
        KvMode ekv = scfg.inject_self_attention ? KvMode::inject : KvMode::none;
        const Tensor * ki = scfg.inject_self_attention ? &rec.k_self : nullptr;
        const Tensor * vi = scfg.inject_self_attention ? &rec.v_self : nullptr;
        const Tensor * anchor_prev =
            gcfg.mask_mode == MaskMode::anchor ? &bundle.trajectory[static_cast<size_t>(j - 1)] : nullptr;

        StepLog log;
        log.t_from = t;
        log.t_to = t_prev;
        if (gcfg.opt_active(t, sched.T)) {
            for (int r = 0; r < gcfg.n_opt; ++r) {
                GuidedNoise gn = guided_noise(z_e, t, tokens, &null_t, w, sched, gcfg, ekv, ki, vi,
                                              anchor_prev, t_prev);
                log.repeat_energies.push_back(gn.energy);
                z_e = classifier_optimize_step(z_e, gn.eps_cfg, gn.eps_guid, t, sched);
                ++log.repeats;
            }
        }
        GuidedNoise fin = guided_noise(z_e, t, tokens, &null_t, w, sched, gcfg, ekv, ki, vi,
                                       anchor_prev, t_prev);
        log.repeat_energies.push_back(fin.energy);
        log.energy = fin.energy;
        log.perturb_l1 = fin.perturb_l1;
        // Split-noise update: plain prediction recovers x0, guided prediction
        // steers the direction term.
        z_e = ddim_map(z_e, fin.eps_cfg, fin.eps_guid, t, t_prev, sched);
        res.lat_edit[static_cast<size_t>(j - 1)] = z_e;
        res.logs.push_back(log);
    }

    res.recon = z_r;
    res.edit = z_e;
    return res;
}

} // namespace eraser
