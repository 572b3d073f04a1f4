#include "eraser/guidance.h"

#include <algorithm>
#include <cmath>
#include <vector>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

void require_cfg(bool ok, const std::string & msg) {
    if (!ok) throw config_error(msg);
}

} // namespace

TargetMode target_mode_from(const std::string & s) {
    if (s == "scaled_map") return TargetMode::scaled_map;
    if (s == "quantile") return TargetMode::quantile;
    throw config_error("unknown target_mode '" + s + "' (expected scaled_map|quantile)");
}

MaskMode mask_mode_from(const std::string & s) {
    if (s == "off") return MaskMode::off;
    if (s == "replace") return MaskMode::replace;
    if (s == "anchor") return MaskMode::anchor;
    throw config_error("unknown mask_mode '" + s + "' (expected off|replace|anchor)");
}

std::string to_string(TargetMode m) {
    return m == TargetMode::scaled_map ? "scaled_map" : "quantile";
}

std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::off: return "off";
        case MaskMode::replace: return "replace";
        default: return "anchor";
    }
}

void GuidanceConfig::validate(int image_size) const {
    require_cfg(std::isfinite(s) && std::isfinite(v), "guidance: s and v must be finite");
    require_cfg(lambda >= 0.0 && lambda <= 1.0, "guidance: lambda must lie in [0,1]");
    require_cfg(t_attn_lo >= 0.0 && t_attn_lo <= t_attn_hi && t_attn_hi <= 1.0,
                "guidance: attention window must be a sub-interval of [0,1]");
    require_cfg(t_opt_lo >= 0.0 && t_opt_lo <= t_opt_hi && t_opt_hi <= 1.0,
                "guidance: optimization window must be a sub-interval of [0,1]");
    require_cfg(n_opt >= 0, "guidance: optimization repeat count must be >= 0");
    for (const auto & words : target_tokens) {
        require_cfg(!words.empty(), "guidance: target object with empty word list");
        for (int k : words)
            require_cfg(k >= 0 && k < kPromptLen, "guidance: target word position out of range");
    }
    if (mask_mode != MaskMode::off) {
        require_cfg(reweight, "guidance: mask modes require the reweight multiplier");
        require_cfg(mask.shape.size() == 2 && mask.shape[0] == image_size && mask.shape[1] == image_size,
                    "guidance: mask must be a square map matching the image size");
        for (float m : mask.data)
            require_cfg(m == 0.0f || m == 1.0f, "guidance: mask values must be 0 or 1");
    }
}

bool GuidanceConfig::attn_active(int t, int T) const {
    double x = static_cast<double>(t);
    return x > t_attn_lo * T && x < t_attn_hi * T;
}

bool GuidanceConfig::opt_active(int t, int T) const {
    double x = static_cast<double>(t);
    return x > t_opt_lo * T && x < t_opt_hi * T;
}

Tensor cfg_combine(const Tensor & eps_cond, const Tensor & eps_uncond, double s) {
    require(eps_cond.same_shape(eps_uncond), "cfg_combine: shape mismatch");
    float ca = static_cast<float>(1.0 + s);
    float cb = static_cast<float>(-s);
    Tensor out(eps_cond.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = ca * eps_cond.data[i] + cb * eps_uncond.data[i];
    return out;
}

Tape::Id erase_energy_node(Tape & tape, Tape::Id a, double lambda, TargetMode mode) {
    require(lambda >= 0.0 && lambda <= 1.0, "erase_energy: lambda must lie in [0,1]");
    const Tensor & av = tape.val(a);
    require(av.shape.size() == 2, "erase_energy: attention map must be 2-D");
    Tape::Id residual;
    if (mode == TargetMode::scaled_map) {
        // Target is c*A with c = min + lambda*(max - min); the scalar is read
        // from detached values so no gradient flows through min/max.
        double mn = tape.scalar64(tape.reduce_min(a));
        double mx = tape.scalar64(tape.reduce_max(a));
        double c = mn + lambda * (mx - mn);
        residual = tape.sub(a, tape.mul_scalar(a, c));
    } else {
        // Target is the constant matrix of A's 80th-percentile value
        // (nearest-rank on the detached map).
        std::vector<float> sorted(av.data);
        std::sort(sorted.begin(), sorted.end());
        size_t idx = static_cast<size_t>(std::floor(0.8 * static_cast<double>(sorted.size() - 1)));
        float q = sorted[idx];
        residual = tape.sub(a, tape.constant(Tensor::full(av.shape, q)));
    }
    return tape.l1(residual);
}

double erase_energy(const Tensor & a, double lambda) {
    Tape tape;
    Tape::Id ai = tape.input(a, false);
    return tape.scalar64(erase_energy_node(tape, ai, lambda, TargetMode::scaled_map));
}

GuidedNoise guided_noise(const Tensor & z, int t, const PromptTokens & tokens, const Tensor * null_t,
                         const DenoiserWeights & w, const NoiseSchedule & sched,
                         const GuidanceConfig & cfg, KvMode kv, const Tensor * k_inj,
                         const Tensor * v_inj, const Tensor * zinv_prev, int t_prev) {
    require(z.shape.size() == 3 && z.shape[2] == 3, "guided_noise: latent must be [H,W,3]");
    require(t >= 1 && t <= sched.T, "guided_noise: timestep out of range");
    cfg.validate(z.shape[0]);
    require(!cfg.target_tokens.empty(), "guided_noise: empty target word set");
    for (const auto & words : cfg.target_tokens)
        for (int k : words)
            require(tokens.ids[static_cast<size_t>(k)] != kTokPad,
                    "guided_noise: target word position " + std::to_string(k) + " is padding");

    bool active = cfg.attn_active(t, sched.T) && cfg.v != 0.0;

    GuidedNoise out;
    Tape tape;
    ForwardOpts co;
    co.track_z = active;
    co.kv = kv;
    co.k_inj = k_inj;
    co.v_inj = v_inj;
    ForwardTrace cond = build_forward(tape, w, z, t, tokens, nullptr, co);
    out.record = take_record(tape, cond);
    const Tensor & eps_c = tape.val(cond.eps);

    Tape::Id cfg_node = cond.eps;
    if (cfg.s != 0.0) {
        require(null_t != nullptr, "guided_noise: missing optimized null embedding for step " + std::to_string(t));
        ForwardOpts uo;
        uo.reuse_z = cond.z; // share the latent so both passes see one input node
        ForwardTrace un = build_forward(tape, w, z, t, PromptTokens::uncond(), null_t, uo);
        out.eps_cfg = cfg_combine(eps_c, tape.val(un.eps), cfg.s);
        if (active && cfg.mask_mode == MaskMode::anchor)
            cfg_node = tape.lincomb(1.0 + cfg.s, cond.eps, -cfg.s, un.eps);
    } else {
        out.eps_cfg = eps_c;
    }

    if (!active) {
        out.eps_guid = out.eps_cfg;
        return out;
    }
    out.active = true;

    const int hh = z.shape[0], ww = z.shape[1];
    const AttentionRecord & rec = out.record;

    // Per target object: summed word energies on the tape plus the detached
    // reweight map (product of the word maps, renormalized to max 1).
    size_t nobj = cfg.target_tokens.size();
    std::vector<Tape::Id> obj_energy(nobj, -1);
    std::vector<Tensor> obj_weight(nobj);
    for (size_t m = 0; m < nobj; ++m) {
        Tensor prod;
        for (size_t j = 0; j < cfg.target_tokens[m].size(); ++j) {
            int k = cfg.target_tokens[m][j];
            Tape::Id ak = aggregate_cross_attention_node(tape, cond.attn_lo, cond.attn_hi, rec.h_lo,
                                                         rec.w_lo, rec.h_hi, rec.w_hi, k);
            Tape::Id g = erase_energy_node(tape, ak, cfg.lambda, cfg.target_mode);
            obj_energy[m] = (j == 0) ? g : tape.add(obj_energy[m], g);
            const Tensor & av = tape.val(ak);
            if (j == 0) {
                prod = av;
            } else {
                for (size_t i = 0; i < prod.data.size(); ++i) prod.data[i] *= av.data[i];
            }
        }
        if (!cfg.reweight) {
            obj_weight[m] = Tensor::full({hh, ww}, 1.0f);
        } else if (cfg.mask_mode == MaskMode::replace) {
            obj_weight[m] = cfg.mask;
        } else {
            float mx = 0.0f;
            for (float p : prod.data) mx = std::max(mx, p);
            if (mx > 0.0f) {
                // f64 division so the peak renormalizes to exactly 1.
                double d = static_cast<double>(mx);
                for (float & p : prod.data) p = static_cast<float>(static_cast<double>(p) / d);
            }
            obj_weight[m] = prod;
        }
    }

    Tensor perturb = Tensor::zeros(z.shape);
    double energy_sum = 0.0;
    for (size_t m = 0; m < nobj; ++m) {
        energy_sum += tape.scalar64(obj_energy[m]);
        tape.zero_grads();
        tape.backward(obj_energy[m]);
        if (!tape.has_grad(cond.z)) continue;
        const std::vector<float> & gz = tape.grad(cond.z);
        const Tensor & wm = obj_weight[m];
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < ww; ++x) {
                float wv = wm.data[wm.at2(y, x)];
                size_t base = (static_cast<size_t>(y) * ww + x) * 3;
                for (int c = 0; c < 3; ++c) perturb.data[base + c] += wv * gz[base + c];
            }
    }

    if (cfg.mask_mode == MaskMode::anchor) {
        // Background anchor: gradient of the L1 distance between the one-step
        // denoised latent and the stored inversion latent, outside the mask.
        require(zinv_prev != nullptr && t_prev >= 0 && t_prev < t,
                "guided_noise: anchor mode needs the inversion latent for the destination step");
        require(zinv_prev->same_shape(z), "guided_noise: anchor latent shape mismatch");
        Tensor keep(z.shape);
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < ww; ++x) {
                float outside = 1.0f - cfg.mask.data[cfg.mask.at2(y, x)];
                for (int c = 0; c < 3; ++c) keep.data[keep.at3(y, x, c)] = outside;
            }
        Tape::Id zhat = ddim_map_node(tape, cond.z, cfg_node, cfg_node, t, t_prev, sched);
        Tape::Id diff = tape.sub(zhat, tape.constant(*zinv_prev));
        Tape::Id anchor = tape.l1(tape.mul(diff, tape.constant(keep)));
        tape.zero_grads();
        tape.backward(anchor);
        if (tape.has_grad(cond.z)) {
            const std::vector<float> & gz = tape.grad(cond.z);
            for (size_t i = 0; i < perturb.data.size(); ++i) perturb.data[i] += gz[i];
        }
    }

    perturb.check_finite("guided_noise perturbation");
    float vf = static_cast<float>(cfg.v);
    out.eps_guid = Tensor(z.shape);
    double l1 = 0.0;
    for (size_t i = 0; i < perturb.data.size(); ++i) {
        float q = vf * perturb.data[i];
        out.eps_guid.data[i] = out.eps_cfg.data[i] + q;
        l1 += std::abs(static_cast<double>(q));
    }
    out.energy = energy_sum;
    out.perturb_l1 = l1;
    return out;
}

} // namespace eraser
