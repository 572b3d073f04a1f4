#pragma once

#include <vector>

#include "eraser/denoiser.h"
#include "eraser/rng.h"
#include "eraser/schedule.h"
#include "eraser/scene.h"

namespace eraser {

struct TrainConfig {
    int batch_size = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double uncond_prob = 0.1;
};

// Adam first/second moments, one pair per weight tensor in visit order.
struct AdamState {
    std::vector<Tensor> m, v;
    int64_t step = 0;

    static AdamState init_like(const DenoiserWeights & w);
};

struct TrainSample {
    Tensor image;
    PromptTokens tokens;
};

// 10% conditional dropout decision; one uniform draw.
bool drop_condition(Rng & rng, double uncond_prob);

// One denoising-score-matching step: per sample draws (t, dropout coin, eps)
// from noise_rng in that order, runs the batch sequentially accumulating
// weight gradients in f64 in visit order, then applies one Adam update.
// Returns the mean per-element squared error (w(t) = 1). A non-finite loss
// throws before any state is touched.
double train_step(DenoiserWeights & w, AdamState & opt, const std::vector<TrainSample> & batch,
                  Rng & noise_rng, const NoiseSchedule & sched, const TrainConfig & cfg);

std::vector<TrainSample> draw_batch(Rng & data_rng, int batch_size);

} // namespace eraser
