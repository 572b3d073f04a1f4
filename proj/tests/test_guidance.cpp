#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "eraser/guidance.h"
#include "eraser/scene.h"

using namespace eraser;

namespace {

NoiseSchedule default_sched() { return NoiseSchedule::linear(200, 1e-4, 0.02); }

bool same_bits(const Tensor & a, const Tensor & b) {
    return a.same_shape(b) &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

DenoiserWeights live_weights(uint64_t seed) {
    Rng rng(seed, Stream::init);
    DenoiserWeights w = DenoiserWeights::init(rng);
    auto fill = [&rng](Tensor & t) {
        for (float & v : t.data) v = static_cast<float>(0.3 * rng.gaussian());
    };
    fill(w.head_w);
    fill(w.head_b);
    for (AttnBlockWeights * ab : {&w.sattn, &w.cattn_a, &w.cattn_b}) {
        fill(ab->wo);
        fill(ab->bo);
    }
    return w;
}

Tensor random_latent(uint64_t seed) {
    Rng rng(seed, Stream::sample_noise);
    Tensor z({16, 16, 3});
    rng.fill_gaussian(z);
    return z;
}

PromptTokens two_word_prompt() {
    PromptTokens tok;
    tok.ids = {kTokRed, kTokSquare, kTokPad, kTokPad, kTokPad, kTokPad};
    return tok;
}

GuidanceConfig base_config() {
    GuidanceConfig cfg;
    cfg.target_tokens = {{0, 1}};
    return cfg;
}

Tensor null_row_of(const DenoiserWeights & w) {
    Tensor row({kModelDim});
    for (int i = 0; i < kModelDim; ++i) row[i] = w.token_emb[w.token_emb.at2(kTokNull, i)];
    return row;
}

double l2_diff(const Tensor & a, const Tensor & b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc;
}

} // namespace

TEST_CASE("erase energy hand evaluation and closed form") {
    Tensor a = Tensor::from({2, 2}, {0.0f, 0.5f, 1.0f, 0.5f});
    // c = 0 + 0.5*(1-0) = 0.5; g = sum |a - 0.5a| = 0.5*(0+0.5+1+0.5) = 1.
    CHECK(erase_energy(a, 0.5) == doctest::Approx(1.0).epsilon(1e-6));

    // lambda = 1 on a min-0/max-1 map: c = 1, residual vanishes identically.
    CHECK(erase_energy(a, 1.0) == 0.0);

    // lambda = 0: c = min = 0, g = ||A||_1.
    CHECK(erase_energy(a, 0.0) == doctest::Approx(2.0).epsilon(1e-6));

    // On a normalized map (min 0, max 1), c = lambda and g = (1-lambda)*||A||_1.
    Rng rng(61, Stream::data_gen);
    Tensor m({8, 8});
    for (auto & v : m.data) v = static_cast<float>(rng.uniform());
    float mn = m.data[0], mx = m.data[0];
    for (float v : m.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    double l1 = 0.0;
    for (auto & v : m.data) {
        v = (v - mn) / (mx - mn);
        l1 += v;
    }
    for (double lam : {0.0, 0.3, 0.8}) {
        double c = 0.0 + lam * 1.0;
        CHECK(erase_energy(m, lam) == doctest::Approx((1.0 - c) * l1).epsilon(1e-4));
    }

    CHECK_THROWS_AS(erase_energy(a, -0.1), contract_error);
    CHECK_THROWS_AS(erase_energy(a, 1.5), contract_error);
}

TEST_CASE("erase energy on the degenerate all-zero map is zero with zero gradient") {
    Tape tape;
    Tape::Id a = tape.input(Tensor::zeros({4, 4}), true);
    Tape::Id g = erase_energy_node(tape, a, 0.8, TargetMode::scaled_map);
    CHECK(tape.scalar64(g) == 0.0);
    tape.backward(g);
    if (tape.has_grad(a)) {
        for (float v : tape.grad(a)) CHECK(v == 0.0f);
    }
}

TEST_CASE("energy gradient flows through A but not through the target scalar") {
    // d/da_i sum |a - c*a| = (1-c)*sign(a_i) when a_i > 0, with c detached.
    Tape tape;
    Tape::Id a = tape.input(Tensor::from({2, 2}, {0.1f, 0.5f, 1.1f, 0.7f}), true);
    Tape::Id g = erase_energy_node(tape, a, 0.5, TargetMode::scaled_map);
    // c = 0.1 + 0.5*(1.1-0.1) = 0.6
    CHECK(tape.scalar64(g) == doctest::Approx(0.4 * (0.1 + 0.5 + 1.1 + 0.7)).epsilon(1e-5));
    tape.backward(g);
    REQUIRE(tape.has_grad(a));
    for (float v : tape.grad(a)) CHECK(v == doctest::Approx(0.4).epsilon(1e-5));
}

TEST_CASE("quantile target mode uses the nearest-rank 80th percentile") {
    Tensor a({4, 4});
    for (int i = 0; i < 16; ++i) a.data[static_cast<size_t>(i)] = static_cast<float>(i) / 15.0f;
    // nearest-rank index floor(0.8 * 15) = 12 -> q = 12/15.
    double q = 12.0 / 15.0;
    double want = 0.0;
    for (int i = 0; i < 16; ++i) want += std::abs(static_cast<double>(i) / 15.0 - q);

    Tape tape;
    Tape::Id ai = tape.input(a);
    Tape::Id g = erase_energy_node(tape, ai, 0.8, TargetMode::quantile);
    CHECK(tape.scalar64(g) == doctest::Approx(want).epsilon(1e-5));

    CHECK(target_mode_from("scaled_map") == TargetMode::scaled_map);
    CHECK(target_mode_from("quantile") == TargetMode::quantile);
    CHECK(to_string(TargetMode::quantile) == "quantile");
    CHECK_THROWS_AS(target_mode_from("percentile"), config_error);
    CHECK(mask_mode_from("anchor") == MaskMode::anchor);
    CHECK_THROWS_AS(mask_mode_from("on"), config_error);
}

TEST_CASE("classifier-free combination is the printed two-term formula") {
    Tensor c = Tensor::from({2}, {1.0f, 2.0f});
    Tensor u = Tensor::from({2}, {0.5f, 1.0f});
    Tensor out = cfg_combine(c, u, 2.0);
    CHECK(out.data == std::vector<float>({2.0f, 4.0f})); // 3c - 2u

    Tensor s0 = cfg_combine(c, u, 0.0);
    CHECK(s0.data == c.data);

    Tensor bad = Tensor::from({3}, {0, 0, 0});
    CHECK_THROWS_AS(cfg_combine(c, bad, 1.0), contract_error);
}

TEST_CASE("config validation rejects malformed guidance settings") {
    GuidanceConfig cfg = base_config();
    cfg.lambda = 1.2;
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg = base_config();
    cfg.t_attn_lo = 0.9;
    cfg.t_attn_hi = 0.2;
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg = base_config();
    cfg.n_opt = -1;
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg = base_config();
    cfg.target_tokens = {{}};
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg = base_config();
    cfg.target_tokens = {{7}};
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg = base_config();
    cfg.mask_mode = MaskMode::replace;
    cfg.mask = Tensor::full({16, 16}, 0.5f);
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg.mask = Tensor::zeros({8, 8});
    CHECK_THROWS_AS(cfg.validate(16), config_error);
    cfg.mask = Tensor::zeros({16, 16});
    cfg.reweight = false;
    CHECK_THROWS_AS(cfg.validate(16), config_error); // mask modes need reweight
    cfg.reweight = true;
    CHECK_NOTHROW(cfg.validate(16));
}

TEST_CASE("attention window gating is strict on both edges") {
    GuidanceConfig cfg = base_config(); // window (0.1, 0.8) of T
    CHECK(!cfg.attn_active(20, 200));
    CHECK(cfg.attn_active(21, 200));
    CHECK(cfg.attn_active(159, 200));
    CHECK(!cfg.attn_active(160, 200));
    CHECK(!cfg.attn_active(10, 200));
    CHECK(!cfg.attn_active(190, 200));
    // opt window (0.5, 0.8)
    CHECK(!cfg.opt_active(100, 200));
    CHECK(cfg.opt_active(101, 200));
    CHECK(cfg.opt_active(159, 200));
    CHECK(!cfg.opt_active(160, 200));
}

TEST_CASE("v=0 and out-of-window produce the untouched predictions") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(71);
    Tensor z = random_latent(72);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    // v = 0 in-window: eps_guid == eps_cfg, nothing recorded active.
    GuidanceConfig cfg = base_config();
    cfg.v = 0.0;
    GuidedNoise g0 = guided_noise(z, 100, tok, &null_row, w, sched, cfg);
    CHECK(!g0.active);
    CHECK(same_bits(g0.eps_guid, g0.eps_cfg));
    CHECK(g0.energy == 0.0);
    CHECK(g0.perturb_l1 == 0.0);

    // s = 0 outside the window: the raw conditional prediction comes through.
    GuidanceConfig cfg2 = base_config();
    cfg2.s = 0.0;
    GuidedNoise g1 = guided_noise(z, 180, tok, nullptr, w, sched, cfg2);
    CHECK(!g1.active);
    auto [eps_cond, rec] = predict_noise(w, z, 180, tok);
    CHECK(same_bits(g1.eps_guid, eps_cond));
    CHECK(same_bits(g1.eps_cfg, eps_cond));

    // In-window with v != 0 the perturbation must actually move something.
    GuidanceConfig cfg3 = base_config();
    GuidedNoise g2 = guided_noise(z, 100, tok, &null_row, w, sched, cfg3);
    CHECK(g2.active);
    CHECK(g2.energy > 0.0);
    CHECK(g2.perturb_l1 > 0.0);
    CHECK(l2_diff(g2.eps_guid, g2.eps_cfg) > 0.0);
}

TEST_CASE("duplicated targets add their perturbations") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(73);
    Tensor z = random_latent(74);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    GuidanceConfig one = base_config();
    one.target_tokens = {{0}};
    GuidanceConfig two = base_config();
    two.target_tokens = {{0}, {0}};

    GuidedNoise ga = guided_noise(z, 100, tok, &null_row, w, sched, one);
    GuidedNoise gb = guided_noise(z, 100, tok, &null_row, w, sched, two);
    CHECK(same_bits(ga.eps_cfg, gb.eps_cfg));
    // The duplicated object contributes an identical gradient, so the f64
    // aggregates double exactly.
    CHECK(gb.energy == 2.0 * ga.energy);
    CHECK(gb.perturb_l1 == doctest::Approx(2.0 * ga.perturb_l1).epsilon(1e-12));
    // Elementwise, recovery through the f32-stored sums costs ~ulp(|eps_cfg|).
    for (size_t i = 0; i < ga.eps_guid.data.size(); ++i) {
        double pa = static_cast<double>(ga.eps_guid.data[i]) - ga.eps_cfg.data[i];
        double pb = static_cast<double>(gb.eps_guid.data[i]) - gb.eps_cfg.data[i];
        CHECK(std::abs(pb - 2.0 * pa) < 1e-5);
    }
}

TEST_CASE("the perturbation lives inside the support of the reweight map") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(75);
    Tensor z = random_latent(76);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    // Replace the reweight map by a mask that keeps only a 4x4 corner.
    GuidanceConfig cfg = base_config();
    cfg.mask_mode = MaskMode::replace;
    cfg.mask = Tensor::zeros({16, 16});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) cfg.mask.data[static_cast<size_t>(cfg.mask.at2(y, x))] = 1.0f;

    GuidedNoise g = guided_noise(z, 100, tok, &null_row, w, sched, cfg);
    CHECK(g.active);
    bool inside_moved = false;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) {
                size_t i = static_cast<size_t>(g.eps_guid.at3(y, x, c));
                float d = g.eps_guid.data[i] - g.eps_cfg.data[i];
                if (y < 4 && x < 4) {
                    if (d != 0.0f) inside_moved = true;
                } else {
                    CHECK(d == 0.0f);
                }
            }
    CHECK(inside_moved);
}

TEST_CASE("lambda=1 neutralizes the energy and the perturbation") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(77);
    Tensor z = random_latent(78);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    GuidanceConfig cfg = base_config();
    cfg.lambda = 1.0;
    GuidedNoise g = guided_noise(z, 100, tok, &null_row, w, sched, cfg);
    CHECK(g.active);
    CHECK(g.energy == 0.0);
    CHECK(g.perturb_l1 == 0.0);
    CHECK(same_bits(g.eps_guid, g.eps_cfg));
}

TEST_CASE("guided_noise enforces its preconditions") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(79);
    Tensor z = random_latent(80);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    GuidanceConfig cfg = base_config();
    CHECK_THROWS_AS(guided_noise(z, 100, tok, nullptr, w, sched, cfg), contract_error);

    GuidanceConfig empty = base_config();
    empty.target_tokens.clear();
    CHECK_THROWS_AS(guided_noise(z, 100, tok, &null_row, w, sched, empty), contract_error);

    GuidanceConfig pad = base_config();
    pad.target_tokens = {{3}}; // PAD position in this prompt
    CHECK_THROWS_AS(guided_noise(z, 100, tok, &null_row, w, sched, pad), contract_error);

    CHECK_THROWS_AS(guided_noise(z, 0, tok, &null_row, w, sched, cfg), contract_error);
    CHECK_THROWS_AS(guided_noise(z, 201, tok, &null_row, w, sched, cfg), contract_error);

    // Anchor mode needs the inversion latent for the destination level.
    GuidanceConfig anc = base_config();
    anc.mask_mode = MaskMode::anchor;
    anc.mask = Tensor::zeros({16, 16});
    for (int i = 0; i < 16; ++i) anc.mask.data[static_cast<size_t>(i)] = 1.0f;
    CHECK_THROWS_AS(guided_noise(z, 100, tok, &null_row, w, sched, anc), contract_error);
}

TEST_CASE("anchor mode adds a background-preserving gradient term") {
    NoiseSchedule sched = default_sched();
    DenoiserWeights w = live_weights(81);
    Tensor z = random_latent(82);
    PromptTokens tok = two_word_prompt();
    Tensor null_row = null_row_of(w);

    GuidanceConfig plain = base_config();
    GuidanceConfig anc = base_config();
    anc.mask_mode = MaskMode::anchor;
    anc.mask = Tensor::zeros({16, 16});
    for (int y = 6; y < 10; ++y)
        for (int x = 6; x < 10; ++x) anc.mask.data[static_cast<size_t>(anc.mask.at2(y, x))] = 1.0f;

    Tensor zinv = random_latent(83);
    GuidedNoise ga = guided_noise(z, 100, tok, &null_row, w, sched, plain);
    GuidedNoise gb = guided_noise(z, 100, tok, &null_row, w, sched, anc, KvMode::none, nullptr,
                                  nullptr, &zinv, 90);
    CHECK(gb.active);
    gb.eps_guid.check_finite("anchor guided noise");
    CHECK(l2_diff(ga.eps_guid, gb.eps_guid) > 0.0);
}
