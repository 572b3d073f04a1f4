#include "eraser/eval.h"

#include <cmath>
#include <limits>
#include <string>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

// Mean attention response of one aggregated map inside a binary mask.
double masked_mean(const Tensor & map, const std::vector<uint8_t> & mask) {
    double sum = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        sum += static_cast<double>(map.data[i]);
        ++count;
    }
    return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

} // namespace

double psnr(const Tensor & a, const Tensor & b) {
    require(a.same_shape(b), "psnr: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    double mse = acc / static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(4.0 / mse);
}

int attention_midpoint_level(const std::vector<int> & grid, const GuidanceConfig & cfg, int T) {
    double mid = 0.5 * (cfg.t_attn_lo + cfg.t_attn_hi) * static_cast<double>(T);
    int best = -1;
    double best_dist = 0.0;
    for (size_t i = 0; i < grid.size(); ++i) {
        int t = grid[i];
        if (!cfg.attn_active(t, T)) continue;
        double dist = std::abs(static_cast<double>(t) - mid);
        if (best < 0 || dist < best_dist || (dist == best_dist && t < grid[static_cast<size_t>(best)])) {
            best = static_cast<int>(i);
            best_dist = dist;
        }
    }
    return best;
}

EraseReport erase_report(const EditResult & result, const Scene & scene, int target_index,
                         const DenoiserWeights & w, const NoiseSchedule & sched) {
    require(target_index >= 0 && target_index < static_cast<int>(scene.objects.size()),
            "erase_report: target index out of range");
    require(!result.grid.empty() && result.lat_recon.size() == result.grid.size() &&
                result.lat_edit.size() == result.grid.size(),
            "erase_report: result is missing per-level latents");
    require(result.edit.same_shape(scene.image) && result.recon.same_shape(scene.image),
            "erase_report: image shape mismatch");

    EraseReport rep;
    rep.psnr_reconstruction = psnr(scene.image, result.recon);

    // Attention response, measured once at the level nearest the middle of
    // the attention window.
    int level = attention_midpoint_level(result.grid, result.config, sched.T);
    const std::vector<uint8_t> & gt_mask = scene.masks[static_cast<size_t>(target_index)];
    if (level >= 0) {
        int t = result.grid[static_cast<size_t>(level)];
        rep.attn_step = t;
        AttentionRecord rec_r =
            predict_noise(w, result.lat_recon[static_cast<size_t>(level)], t, scene.tokens).second;
        AttentionRecord rec_e =
            predict_noise(w, result.lat_edit[static_cast<size_t>(level)], t, scene.tokens).second;
        double mean_r = 0.0, mean_e = 0.0;
        std::vector<int> words = object_word_positions(scene, target_index);
        for (int k : words) {
            mean_r += masked_mean(aggregate_cross_attention(rec_r, k, scene.tokens), gt_mask);
            mean_e += masked_mean(aggregate_cross_attention(rec_e, k, scene.tokens), gt_mask);
        }
        mean_r /= static_cast<double>(words.size());
        mean_e /= static_cast<double>(words.size());
        rep.attn_drop = mean_r > 0.0 ? 1.0 - mean_e / mean_r : 0.0;
    }

    // Background: pixels outside every object mask, edit vs reconstruction.
    std::vector<uint8_t> any_mask(gt_mask.size(), 0);
    for (const auto & m : scene.masks)
        for (size_t i = 0; i < m.size(); ++i) any_mask[i] |= m[i];
    double bg_acc = 0.0;
    int64_t bg_n = 0;
    double obj_acc = 0.0;
    int64_t obj_n = 0;
    std::vector<SceneObject> rest;
    for (size_t i = 0; i < scene.objects.size(); ++i)
        if (static_cast<int>(i) != target_index) rest.push_back(scene.objects[i]);
    Tensor clean = render_objects(rest);
    const int n = scene.image.shape[0];
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            size_t pix = static_cast<size_t>(y) * n + x;
            for (int c = 0; c < 3; ++c) {
                int64_t off = scene.image.at3(y, x, c);
                if (!any_mask[pix]) {
                    double d = static_cast<double>(result.edit.data[off]) -
                               static_cast<double>(result.recon.data[off]);
                    bg_acc += d * d;
                    ++bg_n;
                }
                if (gt_mask[pix]) {
                    double d = static_cast<double>(result.edit.data[off]) -
                               static_cast<double>(clean.data[off]);
                    obj_acc += d * d;
                    ++obj_n;
                }
            }
        }
    rep.bg_mse = bg_n > 0 ? bg_acc / static_cast<double>(bg_n) : 0.0;
    rep.obj_mse_vs_clean = obj_n > 0 ? obj_acc / static_cast<double>(obj_n) : 0.0;
    return rep;
}

} // namespace eraser
