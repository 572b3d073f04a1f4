#include "eraser/tape.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

inline float sigmoid_f(float x) {
    return 1.0f / (1.0f + std::exp(-x));
}

} // namespace

Tape::Node & Tape::node(Id id) {
    require(id >= 0 && static_cast<size_t>(id) < nodes_.size(),
            "tape: node id " + std::to_string(id) + " out of range");
    return nodes_[static_cast<size_t>(id)];
}

const Tape::Node & Tape::node(Id id) const {
    require(id >= 0 && static_cast<size_t>(id) < nodes_.size(),
            "tape: node id " + std::to_string(id) + " out of range");
    return nodes_[static_cast<size_t>(id)];
}

Tape::Id Tape::push(Node n, const char * what) {
    check_finite(n.out.data.data(), n.out.size(), what);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(Tensor t, bool requires_grad) {
    Node n;
    n.op = Op::input;
    n.out = std::move(t);
    n.needs = requires_grad;
    return push(std::move(n), "input");
}

Tape::Id Tape::add(Id a, Id b) {
    const Tensor & ta = val(a);
    const Tensor & tb = val(b);
    require(ta.same_shape(tb), "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    n.out = Tensor(ta.shape);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] + tb[i];
    n.needs = wants(a) || wants(b);
    return push(std::move(n), "add");
}

Tape::Id Tape::sub(Id a, Id b) {
    const Tensor & ta = val(a);
    const Tensor & tb = val(b);
    require(ta.same_shape(tb), "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::sub;
    n.a = a;
    n.b = b;
    n.out = Tensor(ta.shape);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] - tb[i];
    n.needs = wants(a) || wants(b);
    return push(std::move(n), "sub");
}

Tape::Id Tape::mul(Id a, Id b) {
    const Tensor & ta = val(a);
    const Tensor & tb = val(b);
    require(ta.same_shape(tb), "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::mul;
    n.a = a;
    n.b = b;
    n.out = Tensor(ta.shape);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] * tb[i];
    n.needs = wants(a) || wants(b);
    return push(std::move(n), "mul");
}

Tape::Id Tape::add_scalar(Id a, double c) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::add_scalar;
    n.a = a;
    n.d0 = c;
    n.out = Tensor(ta.shape);
    float cf = static_cast<float>(c);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] + cf;
    n.needs = wants(a);
    return push(std::move(n), "add_scalar");
}

Tape::Id Tape::mul_scalar(Id a, double c) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::mul_scalar;
    n.a = a;
    n.d0 = c;
    n.out = Tensor(ta.shape);
    float cf = static_cast<float>(c);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] * cf;
    n.needs = wants(a);
    return push(std::move(n), "mul_scalar");
}

Tape::Id Tape::lincomb(double ca, Id a, double cb, Id b) {
    const Tensor & ta = val(a);
    const Tensor & tb = val(b);
    require(ta.same_shape(tb), "lincomb: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::lincomb;
    n.a = a;
    n.b = b;
    n.d0 = ca;
    n.d1 = cb;
    n.out = Tensor(ta.shape);
    float caf = static_cast<float>(ca);
    float cbf = static_cast<float>(cb);
    for (int64_t i = 0; i < ta.size(); ++i) n.out[i] = caf * ta[i] + cbf * tb[i];
    n.needs = wants(a) || wants(b);
    return push(std::move(n), "lincomb");
}

namespace {

// C[r,:] += A[r,:] x B with f64 accumulators, sequential over k for every
// output element. Blocked over output columns; order within one accumulator
// never changes.
void matmul_f64(const float * A, const float * B, float * C, int m, int k, int n, bool accumulate) {
    constexpr int NB = 8;
    for (int r = 0; r < m; ++r) {
        const float * ar = A + static_cast<int64_t>(r) * k;
        float * cr = C + static_cast<int64_t>(r) * n;
        int c0 = 0;
        for (; c0 + NB <= n; c0 += NB) {
            double acc[NB] = {0, 0, 0, 0, 0, 0, 0, 0};
            for (int kk = 0; kk < k; ++kk) {
                double av = static_cast<double>(ar[kk]);
                const float * br = B + static_cast<int64_t>(kk) * n + c0;
                for (int j = 0; j < NB; ++j) acc[j] += av * static_cast<double>(br[j]);
            }
            for (int j = 0; j < NB; ++j) {
                float v = static_cast<float>(acc[j]);
                cr[c0 + j] = accumulate ? cr[c0 + j] + v : v;
            }
        }
        for (; c0 < n; ++c0) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) {
                acc += static_cast<double>(ar[kk]) * static_cast<double>(B[static_cast<int64_t>(kk) * n + c0]);
            }
            float v = static_cast<float>(acc);
            cr[c0] = accumulate ? cr[c0] + v : v;
        }
    }
}

// C += A^T x B  (A:[m,k], B:[m,n], C:[k,n])
void matmul_at_b_f64(const float * A, const float * B, float * C, int m, int k, int n) {
    constexpr int NB = 8;
    for (int kk = 0; kk < k; ++kk) {
        float * cr = C + static_cast<int64_t>(kk) * n;
        int c0 = 0;
        for (; c0 + NB <= n; c0 += NB) {
            double acc[NB] = {0, 0, 0, 0, 0, 0, 0, 0};
            for (int r = 0; r < m; ++r) {
                double av = static_cast<double>(A[static_cast<int64_t>(r) * k + kk]);
                const float * br = B + static_cast<int64_t>(r) * n + c0;
                for (int j = 0; j < NB; ++j) acc[j] += av * static_cast<double>(br[j]);
            }
            for (int j = 0; j < NB; ++j) cr[c0 + j] += static_cast<float>(acc[j]);
        }
        for (; c0 < n; ++c0) {
            double acc = 0.0;
            for (int r = 0; r < m; ++r) {
                acc += static_cast<double>(A[static_cast<int64_t>(r) * k + kk]) *
                       static_cast<double>(B[static_cast<int64_t>(r) * n + c0]);
            }
            cr[c0] += static_cast<float>(acc);
        }
    }
}

// C += A x B^T  (A:[m,n], B:[k,n], C:[m,k])
void matmul_a_bt_f64(const float * A, const float * B, float * C, int m, int n, int k) {
    for (int r = 0; r < m; ++r) {
        const float * ar = A + static_cast<int64_t>(r) * n;
        float * cr = C + static_cast<int64_t>(r) * k;
        for (int kk = 0; kk < k; ++kk) {
            const float * br = B + static_cast<int64_t>(kk) * n;
            double acc = 0.0;
            for (int c = 0; c < n; ++c) acc += static_cast<double>(ar[c]) * static_cast<double>(br[c]);
            cr[kk] += static_cast<float>(acc);
        }
    }
}

} // namespace

Tape::Id Tape::matmul(Id a, Id b) {
    const Tensor & ta = val(a);
    const Tensor & tb = val(b);
    require(ta.ndim() == 2 && tb.ndim() == 2, "matmul: inputs must be 2-D");
    require(ta.shape[1] == tb.shape[0],
            "matmul: inner dims differ, " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.out = Tensor({ta.shape[0], tb.shape[1]});
    matmul_f64(ta.data.data(), tb.data.data(), n.out.data.data(), ta.shape[0], ta.shape[1], tb.shape[1], false);
    n.needs = wants(a) || wants(b);
    return push(std::move(n), "matmul");
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
    const Tensor & tx = val(x);
    const Tensor & tw = val(w);
    const Tensor & tb = val(b);
    require(tx.ndim() == 2 && tw.ndim() == 2 && tb.ndim() == 1, "linear: want x[m,k], w[k,n], b[n]");
    require(tx.shape[1] == tw.shape[0] && tw.shape[1] == tb.shape[0],
            "linear: shape mismatch " + shape_str(tx.shape) + " x " + shape_str(tw.shape) + " + " +
                shape_str(tb.shape));
    Node n;
    n.op = Op::linear;
    n.a = x;
    n.b = w;
    n.c = b;
    int m = tx.shape[0], nn = tw.shape[1];
    n.out = Tensor({m, nn});
    matmul_f64(tx.data.data(), tw.data.data(), n.out.data.data(), m, tx.shape[1], nn, false);
    for (int r = 0; r < m; ++r) {
        float * orow = n.out.data.data() + static_cast<int64_t>(r) * nn;
        for (int c = 0; c < nn; ++c) orow[c] += tb[c];
    }
    n.needs = wants(x) || wants(w) || wants(b);
    return push(std::move(n), "linear");
}

Tape::Id Tape::softmax(Id a, int axis) {
    const Tensor & ta = val(a);
    require(ta.ndim() == 2, "softmax: input must be 2-D");
    require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
    int m = ta.shape[0], nn = ta.shape[1];
    Node n;
    n.op = Op::softmax;
    n.a = a;
    n.i0 = axis;
    n.out = Tensor(ta.shape);
    int slices = axis == 1 ? m : nn;
    int len = axis == 1 ? nn : m;
    int64_t stride = axis == 1 ? 1 : nn;
    for (int s = 0; s < slices; ++s) {
        int64_t base = axis == 1 ? static_cast<int64_t>(s) * nn : s;
        float mx = ta[base];
        for (int i = 1; i < len; ++i) mx = std::max(mx, ta[base + i * stride]);
        double denom = 0.0;
        for (int i = 0; i < len; ++i) {
            double e = std::exp(static_cast<double>(ta[base + i * stride]) - static_cast<double>(mx));
            n.out[base + i * stride] = static_cast<float>(e);
            denom += e;
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int i = 0; i < len; ++i) n.out[base + i * stride] *= inv;
    }
    n.needs = wants(a);
    return push(std::move(n), "softmax");
}

Tape::Id Tape::conv3x3(Id x, Id w, Id b, int stride) {
    const Tensor & tx = val(x);
    const Tensor & tw = val(w);
    const Tensor & tb = val(b);
    require(stride == 1 || stride == 2, "conv3x3: stride must be 1 or 2");
    require(tx.ndim() == 3, "conv3x3: input must be [H,W,C]");
    require(tw.ndim() == 4 && tw.shape[0] == 3 && tw.shape[1] == 3, "conv3x3: weight must be [3,3,Ci,Co]");
    require(tw.shape[2] == tx.shape[2], "conv3x3: channel mismatch");
    require(tb.ndim() == 1 && tb.shape[0] == tw.shape[3], "conv3x3: bias must be [Co]");
    int H = tx.shape[0], W = tx.shape[1], Ci = tx.shape[2], Co = tw.shape[3];
    require(stride == 1 || (H % 2 == 0 && W % 2 == 0), "conv3x3: stride 2 needs even H,W");
    int Ho = stride == 1 ? H : H / 2;
    int Wo = stride == 1 ? W : W / 2;

    Node n;
    n.op = Op::conv3x3;
    n.a = x;
    n.b = w;
    n.c = b;
    n.i0 = stride;
    n.out = Tensor({Ho, Wo, Co});
    std::vector<float> acc(static_cast<size_t>(Co));
    for (int y = 0; y < Ho; ++y) {
        for (int xcol = 0; xcol < Wo; ++xcol) {
            std::memcpy(acc.data(), tb.data.data(), sizeof(float) * static_cast<size_t>(Co));
            for (int dy = 0; dy < 3; ++dy) {
                int yy = stride * y + dy - 1;
                if (yy < 0 || yy >= H) continue;
                for (int dx = 0; dx < 3; ++dx) {
                    int xx = stride * xcol + dx - 1;
                    if (xx < 0 || xx >= W) continue;
                    const float * ip = tx.data.data() + (static_cast<int64_t>(yy) * W + xx) * Ci;
                    const float * wp = tw.data.data() + static_cast<int64_t>(dy * 3 + dx) * Ci * Co;
                    for (int ci = 0; ci < Ci; ++ci) {
                        float iv = ip[ci];
                        const float * wr = wp + static_cast<int64_t>(ci) * Co;
                        for (int co = 0; co < Co; ++co) acc[static_cast<size_t>(co)] += iv * wr[co];
                    }
                }
            }
            std::memcpy(n.out.data.data() + (static_cast<int64_t>(y) * Wo + xcol) * Co, acc.data(),
                        sizeof(float) * static_cast<size_t>(Co));
        }
    }
    n.needs = wants(x) || wants(w) || wants(b);
    return push(std::move(n), "conv3x3");
}

Tape::Id Tape::resize2x_nearest(Id a) {
    const Tensor & ta = val(a);
    require(ta.ndim() == 3, "resize2x_nearest: input must be [H,W,C]");
    int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
    Node n;
    n.op = Op::resize2x_nearest;
    n.a = a;
    n.out = Tensor({2 * H, 2 * W, C});
    for (int oy = 0; oy < 2 * H; ++oy) {
        for (int ox = 0; ox < 2 * W; ++ox) {
            const float * src = ta.data.data() + (static_cast<int64_t>(oy / 2) * W + ox / 2) * C;
            float * dst = n.out.data.data() + (static_cast<int64_t>(oy) * 2 * W + ox) * C;
            std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(C));
        }
    }
    n.needs = wants(a);
    return push(std::move(n), "resize2x_nearest");
}

namespace {

// Half-pixel-center source coordinates for 2x upsampling: src = (dst+0.5)/2 - 0.5.
struct BilinTap {
    int lo, hi;
    float f; // weight of hi
};

inline BilinTap bilin_tap(int o, int n_src) {
    float s = 0.5f * static_cast<float>(o) - 0.25f;
    int lo = static_cast<int>(std::floor(s));
    float f = s - static_cast<float>(lo);
    int hi = std::min(lo + 1, n_src - 1);
    lo = std::max(lo, 0);
    return {lo, hi, f};
}

} // namespace

Tape::Id Tape::resize2x_bilinear(Id a) {
    const Tensor & ta = val(a);
    require(ta.ndim() == 3, "resize2x_bilinear: input must be [H,W,C]");
    int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
    Node n;
    n.op = Op::resize2x_bilinear;
    n.a = a;
    n.out = Tensor({2 * H, 2 * W, C});
    for (int oy = 0; oy < 2 * H; ++oy) {
        BilinTap ty = bilin_tap(oy, H);
        for (int ox = 0; ox < 2 * W; ++ox) {
            BilinTap tx2 = bilin_tap(ox, W);
            const float * p00 = ta.data.data() + (static_cast<int64_t>(ty.lo) * W + tx2.lo) * C;
            const float * p01 = ta.data.data() + (static_cast<int64_t>(ty.lo) * W + tx2.hi) * C;
            const float * p10 = ta.data.data() + (static_cast<int64_t>(ty.hi) * W + tx2.lo) * C;
            const float * p11 = ta.data.data() + (static_cast<int64_t>(ty.hi) * W + tx2.hi) * C;
            float w00 = (1.0f - ty.f) * (1.0f - tx2.f);
            float w01 = (1.0f - ty.f) * tx2.f;
            float w10 = ty.f * (1.0f - tx2.f);
            float w11 = ty.f * tx2.f;
            float * dst = n.out.data.data() + (static_cast<int64_t>(oy) * 2 * W + ox) * C;
            for (int c = 0; c < C; ++c) {
                dst[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
            }
        }
    }
    n.needs = wants(a);
    return push(std::move(n), "resize2x_bilinear");
}

Tape::Id Tape::group_norm(Id x, Id gamma, Id beta, int groups) {
    const Tensor & tx = val(x);
    const Tensor & tg = val(gamma);
    const Tensor & tb = val(beta);
    require(tx.ndim() == 3, "group_norm: input must be [H,W,C]");
    int H = tx.shape[0], W = tx.shape[1], C = tx.shape[2];
    require(groups > 0 && C % groups == 0, "group_norm: groups must divide C");
    require(tg.ndim() == 1 && tg.shape[0] == C && tb.ndim() == 1 && tb.shape[0] == C,
            "group_norm: gamma/beta must be [C]");
    int cpg = C / groups;
    int64_t npg = static_cast<int64_t>(H) * W * cpg;

    Node n;
    n.op = Op::group_norm;
    n.a = x;
    n.b = gamma;
    n.c = beta;
    n.i0 = groups;
    n.out = Tensor(tx.shape);
    n.aux.resize(static_cast<size_t>(2 * groups));
    for (int g = 0; g < groups; ++g) {
        double mean = 0.0;
        for (int y = 0; y < H; ++y) {
            for (int xcol = 0; xcol < W; ++xcol) {
                const float * p = tx.data.data() + (static_cast<int64_t>(y) * W + xcol) * C + g * cpg;
                for (int c = 0; c < cpg; ++c) mean += static_cast<double>(p[c]);
            }
        }
        mean /= static_cast<double>(npg);
        double var = 0.0;
        for (int y = 0; y < H; ++y) {
            for (int xcol = 0; xcol < W; ++xcol) {
                const float * p = tx.data.data() + (static_cast<int64_t>(y) * W + xcol) * C + g * cpg;
                for (int c = 0; c < cpg; ++c) {
                    double d = static_cast<double>(p[c]) - mean;
                    var += d * d;
                }
            }
        }
        var /= static_cast<double>(npg);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        n.aux[static_cast<size_t>(2 * g)] = mean;
        n.aux[static_cast<size_t>(2 * g + 1)] = inv;
        float meanf = static_cast<float>(mean);
        float invf = static_cast<float>(inv);
        for (int y = 0; y < H; ++y) {
            for (int xcol = 0; xcol < W; ++xcol) {
                int64_t base = (static_cast<int64_t>(y) * W + xcol) * C + g * cpg;
                for (int c = 0; c < cpg; ++c) {
                    float xhat = (tx[base + c] - meanf) * invf;
                    n.out[base + c] = xhat * tg[g * cpg + c] + tb[g * cpg + c];
                }
            }
        }
    }
    n.needs = wants(x) || wants(gamma) || wants(beta);
    return push(std::move(n), "group_norm");
}

Tape::Id Tape::silu(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::silu;
    n.a = a;
    n.out = Tensor(ta.shape);
    for (int64_t i = 0; i < ta.size(); ++i) {
        float s = sigmoid_f(ta[i]);
        n.out[i] = ta[i] * s;
    }
    n.needs = wants(a);
    return push(std::move(n), "silu");
}

Tape::Id Tape::token_embed(Id table, const std::vector<int> & ids, int null_id, Id override_row) {
    const Tensor & tt = val(table);
    require(tt.ndim() == 2, "token_embed: table must be [V,d]");
    int V = tt.shape[0], d = tt.shape[1];
    for (int id : ids) require(id >= 0 && id < V, "token_embed: token id out of range");
    if (override_row >= 0) {
        require(val(override_row).size() == d, "token_embed: override row must have d elements");
    }
    Node n;
    n.op = Op::token_embed;
    n.a = table;
    n.b = override_row;
    n.i0 = null_id;
    n.ids = ids;
    int L = static_cast<int>(ids.size());
    n.out = Tensor({L, d});
    for (int l = 0; l < L; ++l) {
        const float * src = (override_row >= 0 && ids[static_cast<size_t>(l)] == null_id)
                                ? val(override_row).data.data()
                                : tt.data.data() + static_cast<int64_t>(ids[static_cast<size_t>(l)]) * d;
        std::memcpy(n.out.data.data() + static_cast<int64_t>(l) * d, src, sizeof(float) * static_cast<size_t>(d));
    }
    n.needs = wants(table) || (override_row >= 0 && wants(override_row));
    return push(std::move(n), "token_embed");
}

Tape::Id Tape::scale_shift(Id x, Id sv) {
    const Tensor & tx = val(x);
    const Tensor & ts = val(sv);
    require(tx.ndim() == 3, "scale_shift: input must be [H,W,C]");
    int C = tx.shape[2];
    require(ts.size() == 2 * C, "scale_shift: sv must have 2C elements");
    Node n;
    n.op = Op::scale_shift;
    n.a = x;
    n.b = sv;
    n.out = Tensor(tx.shape);
    int64_t hw = static_cast<int64_t>(tx.shape[0]) * tx.shape[1];
    const float * sp = ts.data.data();
    for (int64_t p = 0; p < hw; ++p) {
        const float * ip = tx.data.data() + p * C;
        float * op = n.out.data.data() + p * C;
        for (int c = 0; c < C; ++c) op[c] = ip[c] * (1.0f + sp[c]) + sp[C + c];
    }
    n.needs = wants(x) || wants(sv);
    return push(std::move(n), "scale_shift");
}

Tape::Id Tape::reshape(Id a, Shape s) {
    const Tensor & ta = val(a);
    require(shape_numel(s) == ta.size(),
            "reshape: cannot view " + shape_str(ta.shape) + " as " + shape_str(s));
    Node n;
    n.op = Op::reshape;
    n.a = a;
    n.out.shape = std::move(s);
    n.out.data = ta.data;
    n.needs = wants(a);
    return push(std::move(n), "reshape");
}

Tape::Id Tape::transpose2d(Id a) {
    const Tensor & ta = val(a);
    require(ta.ndim() == 2, "transpose2d: input must be 2-D");
    int m = ta.shape[0], nn = ta.shape[1];
    Node n;
    n.op = Op::transpose2d;
    n.a = a;
    n.out = Tensor({nn, m});
    for (int r = 0; r < m; ++r) {
        for (int c = 0; c < nn; ++c) n.out[static_cast<int64_t>(c) * m + r] = ta[static_cast<int64_t>(r) * nn + c];
    }
    n.needs = wants(a);
    return push(std::move(n), "transpose2d");
}

Tape::Id Tape::sum(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::sum;
    n.a = a;
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += static_cast<double>(ta[i]);
    n.acc64 = acc;
    n.out = Tensor::scalar(static_cast<float>(acc));
    n.needs = wants(a);
    return push(std::move(n), "sum");
}

Tape::Id Tape::mean(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::mean;
    n.a = a;
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += static_cast<double>(ta[i]);
    acc /= static_cast<double>(ta.size());
    n.acc64 = acc;
    n.out = Tensor::scalar(static_cast<float>(acc));
    n.needs = wants(a);
    return push(std::move(n), "mean");
}

Tape::Id Tape::l1(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::l1;
    n.a = a;
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += std::abs(static_cast<double>(ta[i]));
    n.acc64 = acc;
    n.out = Tensor::scalar(static_cast<float>(acc));
    n.needs = wants(a);
    return push(std::move(n), "l1");
}

Tape::Id Tape::reduce_min(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::reduce_min;
    n.a = a;
    float v = ta[0];
    for (int64_t i = 1; i < ta.size(); ++i) v = std::min(v, ta[i]);
    n.acc64 = static_cast<double>(v);
    n.out = Tensor::scalar(v);
    n.needs = false; // non-differentiable by contract
    return push(std::move(n), "reduce_min");
}

Tape::Id Tape::reduce_max(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::reduce_max;
    n.a = a;
    float v = ta[0];
    for (int64_t i = 1; i < ta.size(); ++i) v = std::max(v, ta[i]);
    n.acc64 = static_cast<double>(v);
    n.out = Tensor::scalar(v);
    n.needs = false; // non-differentiable by contract
    return push(std::move(n), "reduce_max");
}

Tape::Id Tape::minmax_norm(Id a) {
    const Tensor & ta = val(a);
    Node n;
    n.op = Op::minmax_norm;
    n.a = a;
    float mn = ta[0], mx = ta[0];
    for (int64_t i = 1; i < ta.size(); ++i) {
        mn = std::min(mn, ta[i]);
        mx = std::max(mx, ta[i]);
    }
    n.out = Tensor(ta.shape);
    if (mx > mn) {
        double lo = static_cast<double>(mn);
        double span = static_cast<double>(mx) - lo;
        n.d0 = 1.0 / span;
        for (int64_t i = 0; i < ta.size(); ++i)
            n.out[i] = static_cast<float>((static_cast<double>(ta[i]) - lo) / span);
    } else {
        n.d0 = 0.0; // degenerate: all zeros, gradient vanishes
    }
    n.needs = wants(a);
    return push(std::move(n), "minmax_norm");
}

Tape::Id Tape::stop_grad(Id a) {
    Node n;
    n.op = Op::stop_grad;
    n.a = a;
    n.out = val(a);
    n.out.grad.clear();
    n.needs = false;
    return push(std::move(n), "stop_grad");
}

double Tape::scalar64(Id id) const {
    const Node & n = node(id);
    require(n.out.size() == 1, "scalar64: node is not scalar");
    switch (n.op) {
        case Op::sum:
        case Op::mean:
        case Op::l1:
        case Op::reduce_min:
        case Op::reduce_max:
            return n.acc64;
        default:
            return static_cast<double>(n.out[0]);
    }
}

bool Tape::has_grad(Id id) const {
    return !node(id).grad.empty();
}

const std::vector<float> & Tape::grad(Id id) const {
    const Node & n = node(id);
    require(!n.grad.empty(), "grad: no gradient reached this node");
    return n.grad;
}

Tensor Tape::grad_tensor(Id id) const {
    const Node & n = node(id);
    Tensor t(n.out.shape);
    if (!n.grad.empty()) t.data = n.grad;
    return t;
}

std::vector<float> & Tape::grad_buf(Id id) {
    Node & n = node(id);
    if (n.grad.empty()) n.grad.assign(n.out.data.size(), 0.0f);
    return n.grad;
}

void Tape::backward(Id seed) {
    Node & s = node(seed);
    require(s.out.size() == 1, "backward: seed must be a scalar node");
    grad_buf(seed)[0] = 1.0f;
    for (Id id = seed; id >= 0; --id) {
        Node & n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty() || n.op == Op::input) continue;
        backward_node(id);
    }
}

void Tape::zero_grads() {
    for (Node & n : nodes_) {
        n.grad.clear();
        n.grad.shrink_to_fit();
    }
}

void Tape::backward_node(Id id) {
    Node & n = nodes_[static_cast<size_t>(id)];
    const std::vector<float> & g = n.grad;
    switch (n.op) {
        case Op::input:
            break;
        case Op::add: {
            if (wants(n.a)) {
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (wants(n.b)) {
                auto & db = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
            }
            break;
        }
        case Op::sub: {
            if (wants(n.a)) {
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (wants(n.b)) {
                auto & db = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
            }
            break;
        }
        case Op::mul: {
            const Tensor & ta = val(n.a);
            const Tensor & tb = val(n.b);
            if (wants(n.a)) {
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * tb.data[i];
            }
            if (wants(n.b)) {
                auto & db = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * ta.data[i];
            }
            break;
        }
        case Op::add_scalar: {
            if (wants(n.a)) {
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            break;
        }
        case Op::mul_scalar: {
            if (wants(n.a)) {
                float cf = static_cast<float>(n.d0);
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += cf * g[i];
            }
            break;
        }
        case Op::lincomb: {
            if (wants(n.a)) {
                float cf = static_cast<float>(n.d0);
                auto & da = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) da[i] += cf * g[i];
            }
            if (wants(n.b)) {
                float cf = static_cast<float>(n.d1);
                auto & db = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) db[i] += cf * g[i];
            }
            break;
        }
        case Op::matmul: {
            const Tensor & ta = val(n.a);
            const Tensor & tb = val(n.b);
            int m = ta.shape[0], k = ta.shape[1], nn = tb.shape[1];
            if (wants(n.a)) {
                matmul_a_bt_f64(g.data(), tb.data.data(), grad_buf(n.a).data(), m, nn, k);
            }
            if (wants(n.b)) {
                matmul_at_b_f64(ta.data.data(), g.data(), grad_buf(n.b).data(), m, k, nn);
            }
            break;
        }
        case Op::linear: {
            const Tensor & tx = val(n.a);
            const Tensor & tw = val(n.b);
            int m = tx.shape[0], k = tx.shape[1], nn = tw.shape[1];
            if (wants(n.a)) {
                matmul_a_bt_f64(g.data(), tw.data.data(), grad_buf(n.a).data(), m, nn, k);
            }
            if (wants(n.b)) {
                matmul_at_b_f64(tx.data.data(), g.data(), grad_buf(n.b).data(), m, k, nn);
            }
            if (wants(n.c)) {
                auto & db = grad_buf(n.c);
                for (int c = 0; c < nn; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < m; ++r) acc += static_cast<double>(g[static_cast<size_t>(r) * nn + c]);
                    db[static_cast<size_t>(c)] += static_cast<float>(acc);
                }
            }
            break;
        }
        case Op::softmax: {
            if (!wants(n.a)) break;
            const Tensor & y = n.out;
            int m = y.shape[0], nn = y.shape[1];
            int axis = n.i0;
            int slices = axis == 1 ? m : nn;
            int len = axis == 1 ? nn : m;
            int64_t stride = axis == 1 ? 1 : nn;
            auto & da = grad_buf(n.a);
            for (int s = 0; s < slices; ++s) {
                int64_t base = axis == 1 ? static_cast<int64_t>(s) * nn : s;
                double dot = 0.0;
                for (int i = 0; i < len; ++i) {
                    int64_t idx = base + i * stride;
                    dot += static_cast<double>(g[static_cast<size_t>(idx)]) * static_cast<double>(y[idx]);
                }
                float dotf = static_cast<float>(dot);
                for (int i = 0; i < len; ++i) {
                    int64_t idx = base + i * stride;
                    da[static_cast<size_t>(idx)] += y[idx] * (g[static_cast<size_t>(idx)] - dotf);
                }
            }
            break;
        }
        case Op::conv3x3: {
            const Tensor & tx = val(n.a);
            const Tensor & tw = val(n.b);
            int stride = n.i0;
            int H = tx.shape[0], W = tx.shape[1], Ci = tx.shape[2], Co = tw.shape[3];
            int Ho = n.out.shape[0], Wo = n.out.shape[1];
            bool wx = wants(n.a), ww = wants(n.b), wb = wants(n.c);
            float * din = wx ? grad_buf(n.a).data() : nullptr;
            float * dw = ww ? grad_buf(n.b).data() : nullptr;
            float * db = wb ? grad_buf(n.c).data() : nullptr;
            std::vector<float> wT;
            if (wx) {
                // [ky,kx,co,ci] transpose so the dIn update vectorizes over ci
                wT.resize(tw.data.size());
                for (int t = 0; t < 9; ++t) {
                    for (int ci = 0; ci < Ci; ++ci) {
                        for (int co = 0; co < Co; ++co) {
                            wT[(static_cast<int64_t>(t) * Co + co) * Ci + ci] =
                                tw.data[(static_cast<int64_t>(t) * Ci + ci) * Co + co];
                        }
                    }
                }
            }
            for (int y = 0; y < Ho; ++y) {
                for (int xcol = 0; xcol < Wo; ++xcol) {
                    const float * gp = g.data() + (static_cast<int64_t>(y) * Wo + xcol) * Co;
                    if (wb) {
                        for (int co = 0; co < Co; ++co) db[co] += gp[co];
                    }
                    for (int dy = 0; dy < 3; ++dy) {
                        int yy = stride * y + dy - 1;
                        if (yy < 0 || yy >= H) continue;
                        for (int dx = 0; dx < 3; ++dx) {
                            int xx = stride * xcol + dx - 1;
                            if (xx < 0 || xx >= W) continue;
                            int64_t ibase = (static_cast<int64_t>(yy) * W + xx) * Ci;
                            int t = dy * 3 + dx;
                            if (ww) {
                                const float * ip = tx.data.data() + ibase;
                                float * dwp = dw + static_cast<int64_t>(t) * Ci * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    float iv = ip[ci];
                                    float * dwr = dwp + static_cast<int64_t>(ci) * Co;
                                    for (int co = 0; co < Co; ++co) dwr[co] += iv * gp[co];
                                }
                            }
                            if (wx) {
                                float * dip = din + ibase;
                                const float * wp = wT.data() + static_cast<int64_t>(t) * Co * Ci;
                                for (int co = 0; co < Co; ++co) {
                                    float gv = gp[co];
                                    const float * wr = wp + static_cast<int64_t>(co) * Ci;
                                    for (int ci = 0; ci < Ci; ++ci) dip[ci] += gv * wr[ci];
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case Op::resize2x_nearest: {
            if (!wants(n.a)) break;
            const Tensor & ta = val(n.a);
            int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
            auto & da = grad_buf(n.a);
            for (int oy = 0; oy < 2 * H; ++oy) {
                for (int ox = 0; ox < 2 * W; ++ox) {
                    const float * gp = g.data() + (static_cast<int64_t>(oy) * 2 * W + ox) * C;
                    float * dp = da.data() + (static_cast<int64_t>(oy / 2) * W + ox / 2) * C;
                    for (int c = 0; c < C; ++c) dp[c] += gp[c];
                }
            }
            break;
        }
        case Op::resize2x_bilinear: {
            if (!wants(n.a)) break;
            const Tensor & ta = val(n.a);
            int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
            auto & da = grad_buf(n.a);
            for (int oy = 0; oy < 2 * H; ++oy) {
                BilinTap ty = bilin_tap(oy, H);
                for (int ox = 0; ox < 2 * W; ++ox) {
                    BilinTap tx2 = bilin_tap(ox, W);
                    float w00 = (1.0f - ty.f) * (1.0f - tx2.f);
                    float w01 = (1.0f - ty.f) * tx2.f;
                    float w10 = ty.f * (1.0f - tx2.f);
                    float w11 = ty.f * tx2.f;
                    const float * gp = g.data() + (static_cast<int64_t>(oy) * 2 * W + ox) * C;
                    float * d00 = da.data() + (static_cast<int64_t>(ty.lo) * W + tx2.lo) * C;
                    float * d01 = da.data() + (static_cast<int64_t>(ty.lo) * W + tx2.hi) * C;
                    float * d10 = da.data() + (static_cast<int64_t>(ty.hi) * W + tx2.lo) * C;
                    float * d11 = da.data() + (static_cast<int64_t>(ty.hi) * W + tx2.hi) * C;
                    for (int c = 0; c < C; ++c) {
                        d00[c] += w00 * gp[c];
                        d01[c] += w01 * gp[c];
                        d10[c] += w10 * gp[c];
                        d11[c] += w11 * gp[c];
                    }
                }
            }
            break;
        }
        case Op::group_norm: {
            const Tensor & tx = val(n.a);
            const Tensor & tg = val(n.b);
            int H = tx.shape[0], W = tx.shape[1], C = tx.shape[2];
            int groups = n.i0;
            int cpg = C / groups;
            int64_t npg = static_cast<int64_t>(H) * W * cpg;
            int64_t hw = static_cast<int64_t>(H) * W;
            bool wx = wants(n.a), wg = wants(n.b), wb = wants(n.c);
            for (int grp = 0; grp < groups; ++grp) {
                double mean = n.aux[static_cast<size_t>(2 * grp)];
                double inv = n.aux[static_cast<size_t>(2 * grp + 1)];
                float meanf = static_cast<float>(mean);
                float invf = static_cast<float>(inv);
                if (wx) {
                    double s1 = 0.0, s2 = 0.0; // sum(gy * xhat), sum(gy)
                    for (int64_t p = 0; p < hw; ++p) {
                        int64_t base = p * C + grp * cpg;
                        for (int c = 0; c < cpg; ++c) {
                            float xhat = (tx[base + c] - meanf) * invf;
                            double gy = static_cast<double>(g[static_cast<size_t>(base + c)]) *
                                        static_cast<double>(tg[grp * cpg + c]);
                            s1 += gy * static_cast<double>(xhat);
                            s2 += gy;
                        }
                    }
                    float m1 = static_cast<float>(s1 / static_cast<double>(npg));
                    float m2 = static_cast<float>(s2 / static_cast<double>(npg));
                    auto & da = grad_buf(n.a);
                    for (int64_t p = 0; p < hw; ++p) {
                        int64_t base = p * C + grp * cpg;
                        for (int c = 0; c < cpg; ++c) {
                            float xhat = (tx[base + c] - meanf) * invf;
                            float gy = g[static_cast<size_t>(base + c)] * tg[grp * cpg + c];
                            da[static_cast<size_t>(base + c)] += invf * (gy - m2 - xhat * m1);
                        }
                    }
                }
                if (wg || wb) {
                    for (int c = 0; c < cpg; ++c) {
                        double sg = 0.0, sb = 0.0;
                        for (int64_t p = 0; p < hw; ++p) {
                            int64_t idx = p * C + grp * cpg + c;
                            float xhat = (tx[idx] - meanf) * invf;
                            double gv = static_cast<double>(g[static_cast<size_t>(idx)]);
                            sg += gv * static_cast<double>(xhat);
                            sb += gv;
                        }
                        if (wg) grad_buf(n.b)[static_cast<size_t>(grp * cpg + c)] += static_cast<float>(sg);
                        if (wb) grad_buf(n.c)[static_cast<size_t>(grp * cpg + c)] += static_cast<float>(sb);
                    }
                }
            }
            break;
        }
        case Op::silu: {
            if (!wants(n.a)) break;
            const Tensor & ta = val(n.a);
            auto & da = grad_buf(n.a);
            for (size_t i = 0; i < g.size(); ++i) {
                float x = ta.data[i];
                float s = sigmoid_f(x);
                da[i] += g[i] * s * (1.0f + x * (1.0f - s));
            }
            break;
        }
        case Op::token_embed: {
            int d = n.out.shape[1];
            bool wt = wants(n.a);
            bool wo = n.b >= 0 && wants(n.b);
            for (size_t l = 0; l < n.ids.size(); ++l) {
                const float * gp = g.data() + l * static_cast<size_t>(d);
                bool overridden = n.b >= 0 && n.ids[l] == n.i0;
                if (overridden && wo) {
                    auto & dov = grad_buf(n.b);
                    for (int c = 0; c < d; ++c) dov[static_cast<size_t>(c)] += gp[c];
                } else if (!overridden && wt) {
                    auto & dt = grad_buf(n.a);
                    float * dst = dt.data() + static_cast<size_t>(n.ids[l]) * static_cast<size_t>(d);
                    for (int c = 0; c < d; ++c) dst[c] += gp[c];
                }
            }
            break;
        }
        case Op::scale_shift: {
            const Tensor & tx = val(n.a);
            const Tensor & ts = val(n.b);
            int C = tx.shape[2];
            int64_t hw = static_cast<int64_t>(tx.shape[0]) * tx.shape[1];
            if (wants(n.a)) {
                auto & da = grad_buf(n.a);
                for (int64_t p = 0; p < hw; ++p) {
                    const float * gp = g.data() + p * C;
                    float * dp = da.data() + p * C;
                    for (int c = 0; c < C; ++c) dp[c] += gp[c] * (1.0f + ts[c]);
                }
            }
            if (wants(n.b)) {
                auto & ds = grad_buf(n.b);
                for (int c = 0; c < C; ++c) {
                    double as = 0.0, at = 0.0;
                    for (int64_t p = 0; p < hw; ++p) {
                        double gv = static_cast<double>(g[static_cast<size_t>(p * C + c)]);
                        as += gv * static_cast<double>(tx[p * C + c]);
                        at += gv;
                    }
                    ds[static_cast<size_t>(c)] += static_cast<float>(as);
                    ds[static_cast<size_t>(C + c)] += static_cast<float>(at);
                }
            }
            break;
        }
        case Op::reshape: {
            if (!wants(n.a)) break;
            auto & da = grad_buf(n.a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            break;
        }
        case Op::transpose2d: {
            if (!wants(n.a)) break;
            const Tensor & ta = val(n.a);
            int m = ta.shape[0], nn = ta.shape[1];
            auto & da = grad_buf(n.a);
            for (int r = 0; r < m; ++r) {
                for (int c = 0; c < nn; ++c) {
                    da[static_cast<size_t>(r) * static_cast<size_t>(nn) + static_cast<size_t>(c)] +=
                        g[static_cast<size_t>(c) * static_cast<size_t>(m) + static_cast<size_t>(r)];
                }
            }
            break;
        }
        case Op::sum: {
            if (!wants(n.a)) break;
            auto & da = grad_buf(n.a);
            float gv = g[0];
            for (auto & v : da) v += gv;
            break;
        }
        case Op::mean: {
            if (!wants(n.a)) break;
            auto & da = grad_buf(n.a);
            float gv = static_cast<float>(static_cast<double>(g[0]) / static_cast<double>(da.size()));
            for (auto & v : da) v += gv;
            break;
        }
        case Op::l1: {
            if (!wants(n.a)) break;
            const Tensor & ta = val(n.a);
            auto & da = grad_buf(n.a);
            float gv = g[0];
            for (size_t i = 0; i < da.size(); ++i) {
                float x = ta.data[i];
                float s = x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
                da[i] += gv * s;
            }
            break;
        }
        case Op::minmax_norm: {
            if (!wants(n.a) || n.d0 == 0.0) break;
            float cf = static_cast<float>(n.d0);
            auto & da = grad_buf(n.a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += cf * g[i];
            break;
        }
        case Op::reduce_min:
        case Op::reduce_max:
        case Op::stop_grad:
            // gradient stops here by contract
            break;
    }
}

double grad_check(const Tensor & x, double h, const std::function<Tape::Id(Tape &, Tape::Id)> & f) {
    if (!(h >= 1e-4 && h <= 1e-2)) {
        throw contract_error("grad_check: step h must lie in [1e-4, 1e-2]");
    }
    Tape tape;
    Tape::Id xi = tape.input(x, true);
    Tape::Id y = f(tape, xi);
    if (tape.val(y).size() != 1) throw contract_error("grad_check: f must produce a scalar");
    tape.backward(y);
    Tensor g = tape.grad_tensor(xi);

    auto eval = [&](const Tensor & probe) {
        Tape t2;
        Tape::Id pi = t2.input(probe, false);
        double v = t2.scalar64(f(t2, pi));
        if (!std::isfinite(v)) throw contract_error("grad_check: non-finite probe value");
        return v;
    };

    double max_err = 0.0;
    Tensor probe = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        float base = x[i];
        float xp = static_cast<float>(static_cast<double>(base) + h);
        float xm = static_cast<float>(static_cast<double>(base) - h);
        probe[i] = xp;
        double fp = eval(probe);
        probe[i] = xm;
        double fm = eval(probe);
        probe[i] = base;
        // use the realized f32 step, not the nominal one
        double denom = static_cast<double>(xp) - static_cast<double>(xm);
        double fd = (fp - fm) / denom;
        double err = std::abs(static_cast<double>(g[i]) - fd) / (std::abs(fd) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace eraser
