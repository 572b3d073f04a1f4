#include "eraser/train.h"

#include <cmath>

namespace eraser {

AdamState AdamState::init_like(const DenoiserWeights & w) {
    AdamState s;
    w.visit([&](const std::string &, const Tensor & t) {
        s.m.emplace_back(Tensor(t.shape));
        s.v.emplace_back(Tensor(t.shape));
    });
    return s;
}

bool drop_condition(Rng & rng, double uncond_prob) {
    return rng.uniform() < uncond_prob;
}

double train_step(DenoiserWeights & w, AdamState & opt, const std::vector<TrainSample> & batch,
                  Rng & noise_rng, const NoiseSchedule & sched, const TrainConfig & cfg) {
    if (static_cast<int>(batch.size()) != cfg.batch_size) {
        throw contract_error("train_step: batch size mismatch");
    }

    std::vector<Tensor *> weights;
    w.visit([&](const std::string &, Tensor & t) { weights.push_back(&t); });
    if (opt.m.size() != weights.size()) throw contract_error("train_step: Adam state mismatch");

    std::vector<std::vector<double>> gacc(weights.size());
    for (size_t j = 0; j < weights.size(); ++j) gacc[j].assign(weights[j]->data.size(), 0.0);

    double loss_acc = 0.0;
    for (const TrainSample & sample : batch) {
        int t = 1 + static_cast<int>(noise_rng.uniform_int(static_cast<uint32_t>(sched.T)));
        bool drop = drop_condition(noise_rng, cfg.uncond_prob);
        Tensor eps = noise_rng.gaussian_tensor(sample.image.shape);
        PromptTokens tokens = drop ? PromptTokens::uncond() : sample.tokens;

        Tensor zt = q_sample(sample.image, eps, t, sched);

        Tape tape;
        ForwardOpts opts;
        opts.track_weights = true;
        ForwardTrace trace = build_forward(tape, w, zt, t, tokens, nullptr, opts);
        Tape::Id diff = tape.sub(trace.eps, tape.constant(eps));
        Tape::Id loss = tape.mean(tape.mul(diff, diff));
        loss_acc += tape.scalar64(loss);
        tape.backward(loss);

        for (size_t j = 0; j < weights.size(); ++j) {
            if (!tape.has_grad(trace.weight_ids[j])) continue;
            const std::vector<float> & g = tape.grad(trace.weight_ids[j]);
            std::vector<double> & acc = gacc[j];
            for (size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<double>(g[i]);
        }
    }

    double loss = loss_acc / static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw contract_error("train_step: non-finite loss, state unchanged");
    for (const auto & acc : gacc) {
        for (double g : acc) {
            if (!std::isfinite(g)) throw contract_error("train_step: non-finite gradient, state unchanged");
        }
    }

    opt.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (size_t j = 0; j < weights.size(); ++j) {
        Tensor & wt = *weights[j];
        Tensor & m = opt.m[j];
        Tensor & v = opt.v[j];
        const std::vector<double> & acc = gacc[j];
        for (size_t i = 0; i < wt.data.size(); ++i) {
            double g = acc[i] * inv_batch;
            double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * g;
            double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * g * g;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            wt.data[i] = static_cast<float>(static_cast<double>(wt.data[i]) - update);
        }
    }
    return loss;
}

std::vector<TrainSample> draw_batch(Rng & data_rng, int batch_size) {
    std::vector<TrainSample> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        Scene s = gen_scene(data_rng);
        batch.push_back({std::move(s.image), s.tokens});
    }
    return batch;
}

} // namespace eraser
