#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "eraser/rng.h"
#include "eraser/tape.h"
#include "eraser/tensor.h"

using namespace eraser;

namespace {

// Scalar probe with a per-coordinate anchor term: comp + amp*sum((x-x0).*sgn).
// The anchor bounds every coordinate's true gradient away from zero so the
// relative finite-difference error is measured against a healthy denominator
// instead of f32 storage noise.
double anchored_check(const Tensor & x, double h, double amp,
                      const std::function<Tape::Id(Tape &, Tape::Id)> & comp) {
    Tensor x0 = x;
    Tensor sgn(x.shape);
    Rng srng(991, Stream::data_gen);
    for (auto & v : sgn.data) v = srng.uniform() < 0.5 ? -1.0f : 1.0f;
    auto f = [&](Tape & tape, Tape::Id xi) {
        Tape::Id c = comp(tape, xi);
        Tape::Id centered = tape.sub(xi, tape.constant(x0));
        Tape::Id anchor = tape.sum(tape.mul(centered, tape.constant(sgn)));
        return tape.add(c, tape.mul_scalar(anchor, amp));
    };
    return grad_check(x, h, f);
}

} // namespace

TEST_CASE("tensor layout is row-major and finiteness is enforced") {
    Tensor t = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
    CHECK(t.size() == 6);
    CHECK(t.at2(1, 2) == 5);
    CHECK(t[t.at2(0, 2)] == 2.0f);

    Tensor img = Tensor::from({2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(img.at3(1, 0, 2) == 8);
    CHECK(img[img.at3(0, 1, 1)] == 4.0f);

    Tensor bad = Tensor::from({2}, {1.0f, std::nanf("")});
    CHECK_THROWS_AS(bad.check_finite("unit"), contract_error);
    Tensor inf = Tensor::from({1}, {std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(inf.check_finite("unit"), contract_error);
}

TEST_CASE("exact_unit_scale sends the span to exactly one") {
    Rng rng(71, Stream::data_gen);
    for (int i = 0; i < 2000; ++i) {
        float span = static_cast<float>(std::exp(8.0 * (rng.uniform() - 0.5)));
        float c = exact_unit_scale(span);
        CHECK(span * c == 1.0f);
    }
    CHECK(exact_unit_scale(1.0f) == 1.0f);
    CHECK(exact_unit_scale(0.25f) == 4.0f);
    // Degenerate spans fall back to the plain reciprocal.
    CHECK(exact_unit_scale(0.0f) == std::numeric_limits<float>::infinity());
    CHECK(!std::isfinite(exact_unit_scale(1e-45f)));
}

TEST_CASE("rng draws are reproducible and stream-separated") {
    Rng a(1234, Stream::data_gen);
    Rng b(1234, Stream::data_gen);
    for (int i = 0; i < 16; ++i) CHECK(a.uniform() == b.uniform());

    // Indexed access is pure: same (seed, stream, index) -> same value.
    Rng c(1234, Stream::data_gen);
    CHECK(c.uniform_at(5) == c.uniform_at(5));
    Rng d(1234, Stream::train_noise);
    CHECK(c.uniform_at(5) != d.uniform_at(5));
    Rng e(1235, Stream::data_gen);
    CHECK(c.uniform_at(5) != e.uniform_at(5));

    Rng u(77, Stream::init);
    for (int i = 0; i < 1000; ++i) {
        double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
    for (int i = 0; i < 1000; ++i) {
        int k = u.uniform_int(7);
        CHECK(k >= 0);
        CHECK(k < 7);
    }
}

TEST_CASE("rng gaussian moments sit near N(0,1)") {
    Rng g(42, Stream::sample_noise);
    const int n = 20000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = g.gaussian();
        s1 += v;
        s2 += v * v;
    }
    double mean = s1 / n;
    double stdev = std::sqrt(s2 / n - mean * mean);
    CHECK(std::abs(mean) < 0.03);
    CHECK(stdev > 0.97);
    CHECK(stdev < 1.03);
}

TEST_CASE("softmax matches the analytic cases") {
    Tape tape;
    Tape::Id x = tape.input(Tensor::from({1, 2}, {0.0f, 0.0f}));
    const Tensor & y = tape.val(tape.softmax(x, 1));
    CHECK(y.data[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(y.data[1] == doctest::Approx(0.5).epsilon(1e-6));

    Tape::Id x2 = tape.input(Tensor::from({1, 2}, {std::log(1.0f), std::log(3.0f)}));
    const Tensor & y2 = tape.val(tape.softmax(x2, 1));
    CHECK(y2.data[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(y2.data[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax rows are stochastic, stabilized, and axis-consistent") {
    Rng rng(5, Stream::data_gen);
    Tensor a({4, 7});
    rng.fill_gaussian(a);

    Tape tape;
    Tape::Id ai = tape.input(a);
    const Tensor & p = tape.val(tape.softmax(ai, 1));
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 7; ++c) {
            float v = p.data[static_cast<size_t>(p.at2(r, c))];
            CHECK(v >= 0.0f);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    // Max-subtraction: a large common shift must not change the result.
    Tensor shifted = a;
    for (auto & v : shifted.data) v += 1000.0f;
    const Tensor & ps = tape.val(tape.softmax(tape.input(shifted), 1));
    for (size_t i = 0; i < p.data.size(); ++i)
        CHECK(ps.data[i] == doctest::Approx(p.data[i]).epsilon(1e-5));

    // softmax over axis 0 == transpose(softmax(transpose(a), 1)).
    const Tensor & c0 = tape.val(tape.softmax(ai, 0));
    const Tensor & c1 = tape.val(tape.transpose2d(tape.softmax(tape.transpose2d(ai), 1)));
    for (size_t i = 0; i < c0.data.size(); ++i)
        CHECK(c0.data[i] == doctest::Approx(c1.data[i]).epsilon(1e-6));
}

TEST_CASE("softmax backward matches central finite differences") {
    Rng rng(17, Stream::data_gen);
    Tensor x({4, 7});
    rng.fill_gaussian(x);
    Tensor wt({4, 7});
    for (auto & v : wt.data) v = static_cast<float>((rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform()));
    double err = anchored_check(x, 1e-3, 4.0, [&](Tape & tape, Tape::Id xi) {
        return tape.sum(tape.mul(tape.softmax(xi, 1), tape.constant(wt)));
    });
    CHECK(err < 1e-3);
}

TEST_CASE("grad_check validates the quadratic and rejects bad steps") {
    auto quad = [](Tape & tape, Tape::Id xi) { return tape.sum(tape.mul(xi, xi)); };
    Tensor x = Tensor::from({2}, {1.0f, 2.0f});
    CHECK(grad_check(x, 1e-2, quad) < 1e-4);

    // Analytic gradient of sum(x^2) at [1,2] is [2,4] exactly.
    Tape tape;
    Tape::Id xi = tape.input(x, true);
    tape.backward(tape.sum(tape.mul(xi, xi)));
    const auto & g = tape.grad(xi);
    CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-6));

    CHECK_THROWS_AS(grad_check(x, 1e-5, quad), contract_error);
    CHECK_THROWS_AS(grad_check(x, 0.5, quad), contract_error);
}

TEST_CASE("stop-gradient acts as a detached multiplier") {
    Tensor x = Tensor::from({4}, {0.5f, -1.25f, 2.0f, 3.5f});

    // d/dx sum(sg(x) * x) = sg(x): the detached factor is a plain constant.
    Tape tape;
    Tape::Id xi = tape.input(x, true);
    tape.backward(tape.sum(tape.mul(tape.stop_grad(xi), xi)));
    REQUIRE(tape.has_grad(xi));
    const auto & g = tape.grad(xi);
    for (size_t i = 0; i < x.data.size(); ++i) CHECK(g[i] == x.data[i]);

    // Pure stop_grad path: no gradient reaches x at all.
    Tape t2;
    Tape::Id x2 = t2.input(x, true);
    t2.backward(t2.sum(t2.stop_grad(x2)));
    CHECK(!t2.has_grad(x2));
}

TEST_CASE("min/max reductions stop gradients by contract") {
    Tensor x = Tensor::from({3}, {1.0f, -2.0f, 3.0f});
    Tape tape;
    Tape::Id xi = tape.input(x, true);
    Tape::Id mn = tape.reduce_min(xi);
    Tape::Id mx = tape.reduce_max(xi);
    CHECK(tape.scalar64(mn) == doctest::Approx(-2.0));
    CHECK(tape.scalar64(mx) == doctest::Approx(3.0));
    tape.backward(tape.add(mn, mx));
    CHECK(!tape.has_grad(xi));

    CHECK(tape.scalar64(tape.l1(xi)) == doctest::Approx(6.0));
    CHECK(tape.scalar64(tape.mean(tape.input(Tensor::from({4}, {1, 2, 3, 4})))) == doctest::Approx(2.5));
}

TEST_CASE("matmul, linear, lincomb and scale_shift hand cases") {
    Tape tape;
    Tape::Id a = tape.input(Tensor::from({2, 2}, {1, 2, 3, 4}));
    Tape::Id b = tape.input(Tensor::from({2, 2}, {5, 6, 7, 8}));
    const Tensor & m = tape.val(tape.matmul(a, b));
    CHECK(m.data == std::vector<float>({19, 22, 43, 50}));

    Tape::Id bias = tape.input(Tensor::from({2}, {0.5f, -0.5f}));
    const Tensor & lin = tape.val(tape.linear(a, b, bias));
    CHECK(lin.data == std::vector<float>({19.5f, 21.5f, 43.5f, 49.5f}));

    const Tensor & lc = tape.val(tape.lincomb(2.0, a, -3.0, b));
    CHECK(lc.data == std::vector<float>({2 * 1 - 3 * 5, 2 * 2 - 3 * 6, 2 * 3 - 3 * 7, 2 * 4 - 3 * 8}));

    // scale_shift: out[.,c] = x[.,c] * (1 + sv[c]) + sv[C+c].
    Tape::Id x = tape.input(Tensor::from({1, 2, 2}, {1, 2, 3, 4}));
    Tape::Id sv = tape.input(Tensor::from({4}, {1.0f, -0.5f, 10.0f, 20.0f}));
    const Tensor & ss = tape.val(tape.scale_shift(x, sv));
    CHECK(ss.data == std::vector<float>({1 * 2 + 10, 2 * 0.5f + 20, 3 * 2 + 10, 4 * 0.5f + 20}));
}

TEST_CASE("silu and group_norm analytic values") {
    Tape tape;
    Tape::Id x = tape.input(Tensor::from({3}, {0.0f, 1.0f, -1.0f}));
    const Tensor & s = tape.val(tape.silu(x));
    CHECK(s.data[0] == doctest::Approx(0.0));
    CHECK(s.data[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-6));
    CHECK(s.data[2] == doctest::Approx(-1.0 / (1.0 + std::exp(1.0))).epsilon(1e-6));

    // Constant input: x - mean == 0, so the output is exactly beta.
    Tape::Id cx = tape.input(Tensor::full({2, 2, 4}, 3.25f));
    Tape::Id gamma = tape.input(Tensor::full({4}, 1.7f));
    Tape::Id beta = tape.input(Tensor::from({4}, {0.1f, 0.2f, 0.3f, 0.4f}));
    const Tensor & gn = tape.val(tape.group_norm(cx, gamma, beta, 2));
    for (int p = 0; p < 4; ++p)
        for (int c = 0; c < 4; ++c)
            CHECK(gn.data[static_cast<size_t>(p * 4 + c)] ==
                  doctest::Approx(0.1 * (c + 1)).epsilon(1e-6));

    // Normalized output has zero mean / unit variance per group before affine.
    Rng rng(9, Stream::data_gen);
    Tensor r({4, 4, 8});
    rng.fill_gaussian(r);
    Tape t2;
    const Tensor & gr = t2.val(t2.group_norm(t2.input(r), t2.input(Tensor::full({8}, 1.0f)),
                                             t2.input(Tensor::zeros({8})), 8));
    for (int c = 0; c < 8; ++c) {
        double s1 = 0.0, s2 = 0.0;
        for (int p = 0; p < 16; ++p) {
            double v = gr.data[static_cast<size_t>(p * 8 + c)];
            s1 += v;
            s2 += v * v;
        }
        CHECK(std::abs(s1 / 16.0) < 1e-5);
        CHECK(s2 / 16.0 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("conv3x3 respects zero padding, stride and kernel layout") {
    // Identity kernel: center tap 1 -> stride-1 output equals the input.
    Tensor img = Tensor::from({4, 4, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    Tensor idw = Tensor::zeros({3, 3, 1, 1});
    idw.data[static_cast<size_t>((1 * 3 + 1) * 1 + 0)] = 1.0f; // tap (dy=1, dx=1)
    Tensor zb = Tensor::zeros({1});

    Tape tape;
    const Tensor & same = tape.val(tape.conv3x3(tape.input(img), tape.input(idw), tape.input(zb), 1));
    CHECK(same.shape == Shape({4, 4, 1}));
    CHECK(same.data == img.data);

    // Stride 2 samples input centers (0,0),(0,2),(2,0),(2,2).
    const Tensor & half = tape.val(tape.conv3x3(tape.input(img), tape.input(idw), tape.input(zb), 2));
    CHECK(half.shape == Shape({2, 2, 1}));
    CHECK(half.data == std::vector<float>({1, 3, 9, 11}));

    // All-ones kernel on all-ones image counts in-bounds taps (zero padding).
    Tensor ones = Tensor::full({4, 4, 1}, 1.0f);
    Tensor onew = Tensor::full({3, 3, 1, 1}, 1.0f);
    const Tensor & cnt = tape.val(tape.conv3x3(tape.input(ones), tape.input(onew), tape.input(zb), 1));
    CHECK(cnt.data[static_cast<size_t>(cnt.at3(0, 0, 0))] == 4.0f);
    CHECK(cnt.data[static_cast<size_t>(cnt.at3(0, 1, 0))] == 6.0f);
    CHECK(cnt.data[static_cast<size_t>(cnt.at3(1, 1, 0))] == 9.0f);

    // Bias is added once per output element.
    Tensor bb = Tensor::from({1}, {0.25f});
    const Tensor & wb = tape.val(tape.conv3x3(tape.input(img), tape.input(idw), tape.input(bb), 1));
    CHECK(wb.data[static_cast<size_t>(wb.at3(2, 3, 0))] == doctest::Approx(12.25));
}

TEST_CASE("2x resizes follow the stated sampling conventions") {
    Tensor src = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
    Tape tape;

    const Tensor & nn = tape.val(tape.resize2x_nearest(tape.input(src)));
    CHECK(nn.shape == Shape({4, 4, 1}));
    CHECK(nn.data == std::vector<float>({1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));

    // Half-pixel centers with clamped borders; separable taps (1, .75/.25, .25/.75, 1).
    const Tensor & bl = tape.val(tape.resize2x_bilinear(tape.input(src)));
    std::vector<float> want = {1.0f,  1.25f, 1.75f, 2.0f,  1.5f, 1.75f, 2.25f, 2.5f,
                               2.5f,  2.75f, 3.25f, 3.5f,  3.0f, 3.25f, 3.75f, 4.0f};
    REQUIRE(bl.data.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
        CHECK(bl.data[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("op chains are bit-deterministic across runs") {
    Rng rng(31, Stream::data_gen);
    Tensor img({8, 8, 4});
    Tensor w({3, 3, 4, 4});
    Tensor b({4});
    rng.fill_gaussian(img);
    rng.fill_gaussian(w);
    rng.fill_gaussian(b);

    auto run = [&]() {
        Tape tape;
        Tape::Id x = tape.input(img);
        Tape::Id y = tape.conv3x3(x, tape.input(w), tape.input(b), 1);
        y = tape.silu(y);
        y = tape.group_norm(y, tape.input(Tensor::full({4}, 1.0f)), tape.input(Tensor::zeros({4})), 2);
        Tape::Id flat = tape.reshape(y, {64, 4});
        Tape::Id p = tape.softmax(flat, 1);
        return tape.val(p);
    };
    Tensor r1 = run();
    Tensor r2 = run();
    REQUIRE(r1.data.size() == r2.data.size());
    CHECK(std::memcmp(r1.data.data(), r2.data.data(), r1.data.size() * sizeof(float)) == 0);
}

TEST_CASE("reshape and transpose preserve and reorder data") {
    Tape tape;
    Tape::Id a = tape.input(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    const Tensor & r = tape.val(tape.reshape(a, {3, 2}));
    CHECK(r.shape == Shape({3, 2}));
    CHECK(r.data == std::vector<float>({1, 2, 3, 4, 5, 6}));
    const Tensor & t = tape.val(tape.transpose2d(a));
    CHECK(t.shape == Shape({3, 2}));
    CHECK(t.data == std::vector<float>({1, 4, 2, 5, 3, 6}));
}
