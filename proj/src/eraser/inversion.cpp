#include "eraser/inversion.h"

#include <cmath>

#include "eraser/checkpoint.h"
#include "eraser/guidance.h"

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

} // namespace

void InversionBundle::check() const {
    require(steps >= 1, "bundle: steps must be >= 1");
    require(static_cast<int>(trajectory.size()) == steps + 1, "bundle: trajectory length != steps + 1");
    require(static_cast<int>(nulls.size()) == steps, "bundle: nulls length != steps");
    require(static_cast<int>(grid.size()) == steps + 1, "bundle: grid length != steps + 1");
}

std::vector<Tensor> ddim_inversion(const Tensor & z0, const PromptTokens & tokens,
                                   const DenoiserWeights & w, const NoiseSchedule & sched, int steps) {
    std::vector<Tensor> traj;
    traj.push_back(z0);
    if (steps == 0) return traj;
    std::vector<int> grid = sched.stride_grid(steps);
    Tensor z = z0;
    for (int i = 0; i < steps; ++i) {
        Tensor eps = predict_noise(w, z, grid[static_cast<size_t>(i + 1)], tokens).first;
        z = ddim_invert_step(z, eps, grid[static_cast<size_t>(i)], grid[static_cast<size_t>(i + 1)], sched);
        z.check_finite("ddim_inversion latent");
        traj.push_back(z);
    }
    return traj;
}

namespace {

// Single-tensor Adam, f32 state with f64 update math (same scheme as training).
struct EmbAdam {
    Tensor m, v;
    int64_t step = 0;
    double lr;

    explicit EmbAdam(const Shape & shape, double lr_) : m(shape), v(shape), lr(lr_) {}

    void update(Tensor & x, const Tensor & g) {
        step += 1;
        double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
        for (int64_t i = 0; i < x.size(); ++i) {
            double gi = static_cast<double>(g[i]);
            double mi = 0.9 * static_cast<double>(m[i]) + 0.1 * gi;
            double vi = 0.999 * static_cast<double>(v[i]) + 0.001 * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            x[i] = static_cast<float>(static_cast<double>(x[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + 1e-8));
        }
    }
};

struct StepLoss {
    double loss;
    Tensor grad; // d(loss)/d(null embedding)
};

// Eq-8 style squared reconstruction error of one guided DDIM step, and its
// gradient w.r.t. the null embedding. The conditional noise is fixed per
// timestep, so only the unconditional pass sits on the tape.
StepLoss null_step_loss(const Tensor & zbar, const Tensor & eps_cond, const Tensor & target,
                        const Tensor & emb, int t, int t_prev, double s, const DenoiserWeights & w,
                        const NoiseSchedule & sched, bool want_grad) {
    Tape tape;
    ForwardOpts opts;
    opts.track_null = want_grad;
    ForwardTrace un = build_forward(tape, w, zbar, t, PromptTokens::uncond(), &emb, opts);
    Tape::Id cfg = tape.lincomb(1.0 + s, tape.constant(eps_cond), -s, un.eps);
    Tape::Id zprev = ddim_map_node(tape, tape.constant(zbar), cfg, cfg, t, t_prev, sched);
    Tape::Id diff = tape.sub(zprev, tape.constant(target));
    Tape::Id loss = tape.sum(tape.mul(diff, diff));
    StepLoss out;
    out.loss = tape.scalar64(loss);
    if (want_grad) {
        tape.backward(loss);
        out.grad = tape.grad_tensor(un.null_override);
    }
    return out;
}

} // namespace

void null_text_optimize(InversionBundle & bundle, const DenoiserWeights & w,
                        const NoiseSchedule & sched, const NullOptConfig & cfg) {
    require(static_cast<int>(bundle.trajectory.size()) == bundle.steps + 1,
            "null_text_optimize: trajectory not computed");
    int S = bundle.steps;
    bundle.nulls.clear();
    bundle.loss_log.clear();

    // chained init from the trained NULL row
    Tensor emb({kModelDim});
    for (int i = 0; i < kModelDim; ++i) emb[i] = w.token_emb[w.token_emb.at2(kTokNull, i)];

    Tensor zbar = bundle.trajectory[static_cast<size_t>(S)];
    for (int j = 0; j < S; ++j) {
        int t = bundle.grid[static_cast<size_t>(S - j)];
        int t_prev = bundle.grid[static_cast<size_t>(S - j - 1)];
        const Tensor & target = bundle.trajectory[static_cast<size_t>(S - j - 1)];
        Tensor eps_cond = predict_noise(w, zbar, t, bundle.tokens).first;

        EmbAdam adam(emb.shape, cfg.lr);
        double init_loss = 0.0;
        double best_loss = 0.0;
        Tensor best_emb = emb;
        for (int iter = 0; iter <= cfg.inner_steps; ++iter) {
            bool last = iter == cfg.inner_steps;
            StepLoss sl = null_step_loss(zbar, eps_cond, target, emb, t, t_prev, cfg.s, w, sched, !last);
            if (iter == 0) {
                init_loss = sl.loss;
                best_loss = sl.loss;
                best_emb = emb;
            } else if (sl.loss < best_loss) {
                best_loss = sl.loss;
                best_emb = emb;
            }
            if (sl.loss <= cfg.stop_tol) break;
            if (sl.loss > 10.0 * init_loss) break; // diverged: keep best-so-far
            if (last) break;
            sl.grad.check_finite("null_text_optimize gradient");
            adam.update(emb, sl.grad);
        }
        emb = best_emb;
        bundle.nulls.push_back(emb);
        bundle.loss_log.emplace_back(init_loss, best_loss);

        // advance with the reconstruction map's own output
        Tensor eps_un = predict_noise(w, zbar, t, PromptTokens::uncond(), &emb).first;
        Tensor eps_cfg = cfg_combine(eps_cond, eps_un, cfg.s);
        zbar = ddim_map(zbar, eps_cfg, eps_cfg, t, t_prev, sched);
        zbar.check_finite("null_text_optimize latent");
    }
    bundle.s = cfg.s;
}

InversionBundle invert_scene(const Scene & scene, uint64_t scene_seed, const DenoiserWeights & w,
                             const NoiseSchedule & sched, int steps, const NullOptConfig & cfg) {
    InversionBundle b;
    b.steps = steps;
    b.grid = sched.stride_grid(steps);
    b.tokens = scene.tokens;
    b.scene_objects = scene.objects;
    b.scene_seed = scene_seed;
    b.image_size = scene.image.shape[0];
    b.weights_fp = weights_fingerprint(w);
    b.trajectory = ddim_inversion(scene.image, scene.tokens, w, sched, steps);
    null_text_optimize(b, w, sched, cfg);
    b.check();
    return b;
}

Tensor reconstruct_with_nulls(const InversionBundle & bundle, const DenoiserWeights & w,
                              const NoiseSchedule & sched) {
    bundle.check();
    int S = bundle.steps;
    Tensor z = bundle.trajectory[static_cast<size_t>(S)];
    for (int j = 0; j < S; ++j) {
        int t = bundle.grid[static_cast<size_t>(S - j)];
        int t_prev = bundle.grid[static_cast<size_t>(S - j - 1)];
        Tensor eps_c = predict_noise(w, z, t, bundle.tokens).first;
        Tensor eps_u = predict_noise(w, z, t, PromptTokens::uncond(), &bundle.nulls[static_cast<size_t>(j)]).first;
        Tensor eps_cfg = cfg_combine(eps_c, eps_u, bundle.s);
        z = ddim_map(z, eps_cfg, eps_cfg, t, t_prev, sched);
    }
    return z;
}

Tensor plain_ddim_reconstruct(const InversionBundle & bundle, const DenoiserWeights & w,
                              const NoiseSchedule & sched) {
    bundle.check();
    int S = bundle.steps;
    Tensor z = bundle.trajectory[static_cast<size_t>(S)];
    for (int j = 0; j < S; ++j) {
        int t = bundle.grid[static_cast<size_t>(S - j)];
        int t_prev = bundle.grid[static_cast<size_t>(S - j - 1)];
        Tensor eps = predict_noise(w, z, t, bundle.tokens).first;
        z = ddim_map(z, eps, eps, t, t_prev, sched);
    }
    return z;
}

double weights_fingerprint(const DenoiserWeights & w) {
    double acc = 0.0;
    w.visit([&](const std::string &, const Tensor & t) {
        for (float v : t.data) acc += static_cast<double>(v);
    });
    return acc;
}

namespace {

const char * shape_name(int s) {
    return s == kShapeSquare ? "square" : "disk";
}

const char * color_name(int c) {
    return c == 0 ? "red" : (c == 1 ? "green" : "blue");
}

int shape_from_name(const std::string & s) {
    if (s == "square") return kShapeSquare;
    if (s == "disk") return kShapeDisk;
    throw contract_error("bundle: unknown shape '" + s + "'");
}

int color_from_name(const std::string & s) {
    if (s == "red") return 0;
    if (s == "green") return 1;
    if (s == "blue") return 2;
    throw contract_error("bundle: unknown color '" + s + "'");
}

} // namespace

void save_bundle(const std::string & path, const InversionBundle & bundle, const DenoiserWeights & w,
                 const NoiseSchedule & sched) {
    bundle.check();
    int S = bundle.steps;
    int n = bundle.image_size;

    Tensor traj({S + 1, n, n, 3});
    for (int i = 0; i <= S; ++i) {
        const Tensor & z = bundle.trajectory[static_cast<size_t>(i)];
        require(z.shape == Shape({n, n, 3}), "save_bundle: trajectory latent shape mismatch");
        std::copy(z.data.begin(), z.data.end(),
                  traj.data.begin() + static_cast<int64_t>(i) * z.size());
    }
    Tensor nulls({S, kModelDim});
    for (int j = 0; j < S; ++j) {
        const Tensor & e = bundle.nulls[static_cast<size_t>(j)];
        require(e.size() == kModelDim, "save_bundle: null embedding size mismatch");
        std::copy(e.data.begin(), e.data.end(),
                  nulls.data.begin() + static_cast<int64_t>(j) * kModelDim);
    }

    nlohmann::json meta;
    meta["schedule"] = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
    meta["steps"] = S;
    meta["s"] = bundle.s;
    meta["image_size"] = n;
    meta["tokens"] = bundle.tokens.vec();
    meta["scene_seed"] = bundle.scene_seed;
    meta["weights_fingerprint"] = weights_fingerprint(w);
    nlohmann::json objs = nlohmann::json::array();
    for (const auto & o : bundle.scene_objects) {
        objs.push_back({{"shape", shape_name(o.shape)},
                        {"color", color_name(o.color)},
                        {"x", o.x},
                        {"y", o.y},
                        {"size", o.size}});
    }
    meta["scene"] = std::move(objs);
    nlohmann::json losses = nlohmann::json::array();
    for (const auto & [init, fin] : bundle.loss_log) losses.push_back({init, fin});
    meta["loss_log"] = std::move(losses);

    write_blob(path, "bundle", std::move(meta),
               {{"trajectory", std::move(traj)}, {"nulls", std::move(nulls)}});
}

InversionBundle load_bundle(const std::string & path, const NoiseSchedule & expect_sched,
                            const DenoiserWeights & expect_weights) {
    Blob blob = read_blob(path, "bundle");
    const auto & sj = blob.meta.at("schedule");
    require(sj.at("T").get<int>() == expect_sched.T &&
                sj.at("beta_start").get<double>() == expect_sched.beta_start &&
                sj.at("beta_end").get<double>() == expect_sched.beta_end,
            "bundle schedule does not match the checkpoint schedule");
    double fp = blob.meta.at("weights_fingerprint").get<double>();
    require(fp == weights_fingerprint(expect_weights),
            "bundle was produced by different weights than the loaded checkpoint");

    InversionBundle b;
    b.steps = blob.meta.at("steps").get<int>();
    b.s = blob.meta.at("s").get<double>();
    b.image_size = blob.meta.at("image_size").get<int>();
    b.grid = expect_sched.stride_grid(b.steps);
    b.scene_seed = blob.meta.at("scene_seed").get<uint64_t>();
    b.weights_fp = fp;
    std::vector<int> ids = blob.meta.at("tokens").get<std::vector<int>>();
    require(static_cast<int>(ids.size()) == kPromptLen, "bundle: bad token list");
    for (int i = 0; i < kPromptLen; ++i) {
        require(ids[static_cast<size_t>(i)] >= 0 && ids[static_cast<size_t>(i)] < kVocab,
                "bundle: token id out of range");
        b.tokens.ids[static_cast<size_t>(i)] = ids[static_cast<size_t>(i)];
    }
    for (const auto & oj : blob.meta.at("scene")) {
        SceneObject o;
        o.shape = shape_from_name(oj.at("shape").get<std::string>());
        o.color = color_from_name(oj.at("color").get<std::string>());
        o.x = oj.at("x").get<int>();
        o.y = oj.at("y").get<int>();
        o.size = oj.at("size").get<int>();
        b.scene_objects.push_back(o);
    }
    for (const auto & lj : blob.meta.at("loss_log")) {
        b.loss_log.emplace_back(lj.at(0).get<double>(), lj.at(1).get<double>());
    }

    int n = b.image_size;
    const Tensor & traj = blob.tensors.at("trajectory");
    require(traj.shape == Shape({b.steps + 1, n, n, 3}), "bundle: trajectory tensor shape mismatch");
    for (int i = 0; i <= b.steps; ++i) {
        Tensor z({n, n, 3});
        std::copy(traj.data.begin() + static_cast<int64_t>(i) * z.size(),
                  traj.data.begin() + static_cast<int64_t>(i + 1) * z.size(), z.data.begin());
        b.trajectory.push_back(std::move(z));
    }
    const Tensor & nulls = blob.tensors.at("nulls");
    require(nulls.shape == Shape({b.steps, kModelDim}), "bundle: nulls tensor shape mismatch");
    for (int j = 0; j < b.steps; ++j) {
        Tensor e({kModelDim});
        std::copy(nulls.data.begin() + static_cast<int64_t>(j) * kModelDim,
                  nulls.data.begin() + static_cast<int64_t>(j + 1) * kModelDim, e.data.begin());
        b.nulls.push_back(std::move(e));
    }
    b.check();
    return b;
}

} // namespace eraser
