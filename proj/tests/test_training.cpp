#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "eraser/scene.h"
#include "eraser/train.h"

using namespace eraser;

namespace {

NoiseSchedule default_sched() { return NoiseSchedule::linear(200, 1e-4, 0.02); }

std::vector<float> weight_snapshot(const DenoiserWeights & w) {
    std::vector<float> all;
    w.visit([&](const std::string &, const Tensor & t) {
        all.insert(all.end(), t.data.begin(), t.data.end());
    });
    return all;
}

} // namespace

TEST_CASE("scenes are deterministic, well-formed and mask-consistent") {
    Rng r1(101, Stream::data_gen);
    Rng r2(101, Stream::data_gen);
    for (int i = 0; i < 20; ++i) {
        Scene a = gen_scene(r1);
        Scene b = gen_scene(r2);
        REQUIRE(a.objects.size() == b.objects.size());
        CHECK(a.image.data == b.image.data);
        CHECK(a.tokens.ids == b.tokens.ids);

        REQUIRE(a.objects.size() >= 1);
        REQUIRE(a.objects.size() <= 2);
        REQUIRE(a.masks.size() == a.objects.size());

        std::vector<uint8_t> covered(kImg * kImg, 0);
        for (size_t o = 0; o < a.objects.size(); ++o) {
            const SceneObject & obj = a.objects[o];
            CHECK(obj.size >= 4);
            CHECK(obj.size <= 7);
            CHECK(obj.color >= 0);
            CHECK(obj.color <= 2);
            CHECK(a.masks[o] == object_mask(obj));

            float col[3];
            color_vec(obj.color, col);
            int area = 0;
            for (int p = 0; p < kImg * kImg; ++p) {
                uint8_t m = a.masks[o][static_cast<size_t>(p)];
                CHECK((m == 0 || m == 1));
                if (!m) continue;
                ++area;
                CHECK(covered[static_cast<size_t>(p)] == 0); // disjoint objects
                covered[static_cast<size_t>(p)] = 1;
                for (int c = 0; c < 3; ++c)
                    CHECK(a.image.data[static_cast<size_t>(p * 3 + c)] == col[c]);
            }
            CHECK(area > 0);

            // Token layout: words 2o and 2o+1 name the object.
            std::vector<int> pos = object_word_positions(a, static_cast<int>(o));
            REQUIRE(pos.size() == 2);
            CHECK(pos[0] == static_cast<int>(2 * o));
            CHECK(pos[1] == static_cast<int>(2 * o + 1));
            CHECK(a.tokens.ids[static_cast<size_t>(pos[0])] == obj.color_token());
            CHECK(a.tokens.ids[static_cast<size_t>(pos[1])] == obj.shape_token());
        }
        // Background is exactly gray 0 outside the union of masks; trailing
        // prompt slots are PAD.
        for (int p = 0; p < kImg * kImg; ++p) {
            if (covered[static_cast<size_t>(p)]) continue;
            for (int c = 0; c < 3; ++c) CHECK(a.image.data[static_cast<size_t>(p * 3 + c)] == 0.0f);
        }
        for (size_t k = 2 * a.objects.size(); k < kPromptLen; ++k)
            CHECK(a.tokens.ids[k] == kTokPad);

        if (a.objects.size() == 2) {
            CHECK((a.objects[0].shape != a.objects[1].shape ||
                   a.objects[0].color != a.objects[1].color));
        }
    }
}

TEST_CASE("object count follows the fair coin over many scenes") {
    Rng rng(777, Stream::data_gen);
    int two = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i)
        if (gen_scene(rng).objects.size() == 2) ++two;
    double frac = static_cast<double>(two) / n;
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);
}

TEST_CASE("conditional dropout frequency sits near its probability") {
    Rng rng(55, Stream::train_noise);
    int dropped = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        if (drop_condition(rng, 0.1)) ++dropped;
    double frac = static_cast<double>(dropped) / n;
    CHECK(frac >= 0.08);
    CHECK(frac <= 0.12);
}

TEST_CASE("first training step reproduces the zero-predictor loss oracle") {
    NoiseSchedule sched = default_sched();
    TrainConfig cfg;
    Rng init_rng(1, Stream::init);
    DenoiserWeights w = DenoiserWeights::init(init_rng);
    AdamState opt = AdamState::init_like(w);

    Rng data_rng(1, Stream::data_gen);
    std::vector<TrainSample> batch = draw_batch(data_rng, cfg.batch_size);

    Rng noise_rng(1, Stream::train_noise);
    Rng replay = noise_rng; // value copy: same seed, stream and cursor
    double loss = train_step(w, opt, batch, noise_rng, sched, cfg);

    // At init eps_theta == 0, so the loss is the mean squared noise. Replay
    // the exact draw sequence (t, dropout coin, eps) and accumulate the same
    // way the tape does: f32 squares, f64 sums.
    double acc = 0.0;
    for (const TrainSample & sample : batch) {
        (void)replay.uniform_int(static_cast<uint32_t>(sched.T));
        (void)replay.uniform();
        Tensor eps = replay.gaussian_tensor(sample.image.shape);
        double s = 0.0;
        for (float e : eps.data) {
            float sq = e * e;
            s += static_cast<double>(sq);
        }
        acc += s / static_cast<double>(eps.data.size());
    }
    double oracle = acc / cfg.batch_size;
    CHECK(loss == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(loss >= 0.5); // Gaussian second moment, per-element scale ~1
    CHECK(loss <= 2.0);
    CHECK(opt.step == 1);
}

TEST_CASE("first Adam update is bounded by the learning rate and bias-corrected") {
    NoiseSchedule sched = default_sched();
    TrainConfig cfg;
    Rng init_rng(9, Stream::init);
    DenoiserWeights w = DenoiserWeights::init(init_rng);
    std::vector<float> before = weight_snapshot(w);
    AdamState opt = AdamState::init_like(w);

    Rng data_rng(9, Stream::data_gen);
    Rng noise_rng(9, Stream::train_noise);
    std::vector<TrainSample> batch = draw_batch(data_rng, cfg.batch_size);
    double loss = train_step(w, opt, batch, noise_rng, sched, cfg);
    CHECK(std::isfinite(loss));

    // Step 1 with zero moment state: update = lr * g / (|g| + eps') < lr.
    std::vector<float> after = weight_snapshot(w);
    REQUIRE(before.size() == after.size());
    double biggest = 0.0;
    int moved = 0;
    for (size_t i = 0; i < before.size(); ++i) {
        double d = std::abs(static_cast<double>(after[i]) - before[i]);
        if (d > 0.0) ++moved;
        biggest = std::max(biggest, d);
    }
    CHECK(biggest <= cfg.lr * 1.0000001);
    // The head gradient is dense (loss = mean eps^2 at init), so a healthy
    // share of parameters must take a near-full step.
    CHECK(biggest >= 0.9 * cfg.lr);
    CHECK(moved > 0);
}

TEST_CASE("training runs are bit-reproducible") {
    NoiseSchedule sched = default_sched();
    TrainConfig cfg;

    auto run = [&](int steps) {
        Rng init_rng(21, Stream::init);
        DenoiserWeights w = DenoiserWeights::init(init_rng);
        AdamState opt = AdamState::init_like(w);
        Rng data_rng(21, Stream::data_gen);
        Rng noise_rng(21, Stream::train_noise);
        std::vector<double> losses;
        for (int s = 0; s < steps; ++s) {
            std::vector<TrainSample> batch = draw_batch(data_rng, cfg.batch_size);
            losses.push_back(train_step(w, opt, batch, noise_rng, sched, cfg));
        }
        return std::make_pair(losses, weight_snapshot(w));
    };

    auto [l1, w1] = run(3);
    auto [l2, w2] = run(3);
    CHECK(l1 == l2);
    REQUIRE(w1.size() == w2.size());
    CHECK(std::memcmp(w1.data(), w2.data(), w1.size() * sizeof(float)) == 0);
}

TEST_CASE("non-finite inputs abort the step with state intact") {
    NoiseSchedule sched = default_sched();
    TrainConfig cfg;
    Rng init_rng(33, Stream::init);
    DenoiserWeights w = DenoiserWeights::init(init_rng);
    AdamState opt = AdamState::init_like(w);
    Rng data_rng(33, Stream::data_gen);
    Rng noise_rng(33, Stream::train_noise);

    std::vector<TrainSample> batch = draw_batch(data_rng, cfg.batch_size);
    batch[5].image.data[100] = std::numeric_limits<float>::quiet_NaN();

    std::vector<float> before = weight_snapshot(w);
    CHECK_THROWS_AS(train_step(w, opt, batch, noise_rng, sched, cfg), contract_error);
    std::vector<float> after = weight_snapshot(w);
    CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0);
    CHECK(opt.step == 0);

    // Batch size contract.
    std::vector<TrainSample> small(batch.begin(), batch.begin() + 3);
    CHECK_THROWS_AS(train_step(w, opt, small, noise_rng, sched, cfg), contract_error);
}
