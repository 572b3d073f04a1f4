#pragma once

// Run configuration: a sectioned JSON document with documented defaults,
// strict unknown-key rejection and dotted-path overrides.

#include <string>

#include <json.hpp>

#include "eraser/guidance.h"
#include "eraser/inversion.h"
#include "eraser/schedule.h"
#include "eraser/train.h"

namespace eraser {

struct RunConfig {
    struct ScheduleCfg {
        int T = 200;
        double beta_start = 1e-4;
        double beta_end = 0.02;
    } schedule;

    struct ModelCfg {
        int image_size = 16;
        uint64_t seed = 1234; // weight-init stream seed
    } model;

    struct TrainCfg {
        int steps = 20000;
        int batch_size = 32;
        double lr = 1e-3;
        double uncond_prob = 0.1;
        uint64_t seed = 42; // data and noise stream seed
        int ckpt_every = 1000;
        int log_every = 100;
    } train;

    struct InversionCfg {
        int steps = 50;
        int inner_steps = 100;
        double lr = 1e-2;
        double stop_tol = 1e-5;
        double s = 2.0;
    } inversion;

    struct GuidanceCfg {
        double s = 2.0;
        double v = 1.0;
        double lambda = 0.8;
        double t_attn_lo = 0.1;
        double t_attn_hi = 0.8;
        double t_opt_lo = 0.5;
        double t_opt_hi = 0.8;
        int n_opt = 1;
        std::string target_mode = "scaled_map";
        std::string mask_mode = "off";
        std::string mask_path;
    } guidance;

    struct SamplerCfg {
        bool inject_self_attention = true;
    } sampler;

    struct IoCfg {
        std::string out_dir = "out";
    } io;

    // Defaults overlaid with the JSON document; unknown sections or keys are
    // a hard error.
    static RunConfig from_json(const nlohmann::json & j);
    static RunConfig load_file(const std::string & path);

    // "section.key=value" override, value parsed per the field's type.
    void set_path(const std::string & dotted, const std::string & value);

    nlohmann::json to_json() const;
    void validate() const;

    NoiseSchedule make_schedule() const;
    TrainConfig make_train() const;
    NullOptConfig make_nullopt() const;
    // Builds the guidance config (loading the mask file when set); the target
    // word lists are filled in later from the --target flag.
    GuidanceConfig make_guidance() const;
};

} // namespace eraser
