#include "eraser/denoiser.h"

#include <cmath>
#include <map>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

constexpr float kPadLogit = -1e30f; // exp underflows to exactly 0 after the row-max shift

} // namespace

const char * token_name(int id) {
    static const char * names[kVocab] = {"NULL", "PAD", "red", "green", "blue", "square", "disk"};
    require(id >= 0 && id < kVocab, "token_name: id out of range");
    return names[id];
}

int token_id(const std::string & name) {
    for (int i = 0; i < kVocab; ++i) {
        if (name == token_name(i)) return i;
    }
    throw config_error("unknown token name: " + name);
}

bool PromptTokens::is_uncond() const {
    for (int id : ids) {
        if (id != kTokNull) return false;
    }
    return true;
}

std::string PromptTokens::str() const {
    std::string out;
    for (int i = 0; i < kPromptLen; ++i) {
        if (i) out += " ";
        out += token_name(ids[static_cast<size_t>(i)]);
    }
    return out;
}

Tensor time_embedding(int t) {
    Tensor e({1, kTimeDim});
    int half = kTimeDim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half - 1));
        double a = static_cast<double>(t) * freq;
        e[i] = static_cast<float>(std::sin(a));
        e[half + i] = static_cast<float>(std::cos(a));
    }
    return e;
}

namespace {

void alloc_res(ResBlockWeights & r) {
    r.gn1_g = Tensor({kModelDim});
    r.gn1_b = Tensor({kModelDim});
    r.conv1_w = Tensor({3, 3, kModelDim, kModelDim});
    r.conv1_b = Tensor({kModelDim});
    r.time_w = Tensor({kTimeDim, 2 * kModelDim});
    r.time_b = Tensor({2 * kModelDim});
    r.gn2_g = Tensor({kModelDim});
    r.gn2_b = Tensor({kModelDim});
    r.conv2_w = Tensor({3, 3, kModelDim, kModelDim});
    r.conv2_b = Tensor({kModelDim});
}

void alloc_attn(AttnBlockWeights & a) {
    a.gn_g = Tensor({kModelDim});
    a.gn_b = Tensor({kModelDim});
    a.wq = Tensor({kModelDim, kModelDim});
    a.bq = Tensor({kModelDim});
    a.wk = Tensor({kModelDim, kModelDim});
    a.bk = Tensor({kModelDim});
    a.wv = Tensor({kModelDim, kModelDim});
    a.bv = Tensor({kModelDim});
    a.wo = Tensor({kModelDim, kModelDim});
    a.bo = Tensor({kModelDim});
}

void fill_gauss(Tensor & t, Rng & rng, double scale) {
    for (auto & v : t.data) v = static_cast<float>(rng.gaussian() * scale);
}

void fill_ones(Tensor & t) {
    for (auto & v : t.data) v = 1.0f;
}

void init_res(ResBlockWeights & r, Rng & rng) {
    fill_ones(r.gn1_g);
    fill_gauss(r.conv1_w, rng, std::sqrt(2.0 / (9.0 * kModelDim)));
    fill_gauss(r.time_w, rng, std::sqrt(2.0 / (kTimeDim + 2 * kModelDim)));
    fill_ones(r.gn2_g);
    // conv2 stays zero so the block starts as identity
}

void init_attn(AttnBlockWeights & a, Rng & rng) {
    fill_ones(a.gn_g);
    double xav = std::sqrt(2.0 / (kModelDim + kModelDim));
    fill_gauss(a.wq, rng, xav);
    fill_gauss(a.wk, rng, xav);
    fill_gauss(a.wv, rng, xav);
    // wo stays zero so the block starts as identity
}

} // namespace

DenoiserWeights DenoiserWeights::alloc() {
    DenoiserWeights w;
    w.token_emb = Tensor({kVocab, kModelDim});
    w.tmlp1_w = Tensor({kTimeDim, kTimeDim});
    w.tmlp1_b = Tensor({kTimeDim});
    w.tmlp2_w = Tensor({kTimeDim, kTimeDim});
    w.tmlp2_b = Tensor({kTimeDim});
    w.stem_w = Tensor({3, 3, 3, kModelDim});
    w.stem_b = Tensor({kModelDim});
    alloc_res(w.res1);
    alloc_res(w.res2);
    w.down_w = Tensor({3, 3, kModelDim, kModelDim});
    w.down_b = Tensor({kModelDim});
    alloc_attn(w.sattn);
    alloc_attn(w.cattn_a);
    w.up_w = Tensor({3, 3, kModelDim, kModelDim});
    w.up_b = Tensor({kModelDim});
    alloc_attn(w.cattn_b);
    alloc_res(w.res3);
    w.head_w = Tensor({3, 3, kModelDim, 3});
    w.head_b = Tensor({3});
    return w;
}

DenoiserWeights DenoiserWeights::init(Rng & rng) {
    // Draw order is fixed: visit order, skipping zero/one-initialized tensors.
    DenoiserWeights w = alloc();
    fill_gauss(w.token_emb, rng, 0.3);
    double xav_t = std::sqrt(2.0 / (kTimeDim + kTimeDim));
    fill_gauss(w.tmlp1_w, rng, xav_t);
    fill_gauss(w.tmlp2_w, rng, xav_t);
    fill_gauss(w.stem_w, rng, std::sqrt(2.0 / (9.0 * 3)));
    init_res(w.res1, rng);
    init_res(w.res2, rng);
    fill_gauss(w.down_w, rng, std::sqrt(2.0 / (9.0 * kModelDim)));
    init_attn(w.sattn, rng);
    init_attn(w.cattn_a, rng);
    fill_gauss(w.up_w, rng, std::sqrt(2.0 / (9.0 * kModelDim)));
    init_attn(w.cattn_b, rng);
    init_res(w.res3, rng);
    // head stays zero: eps(init) == 0, so the first-step loss is E||eps||^2
    return w;
}

namespace {

template <typename F>
void visit_res(const std::string & p, ResBlockWeights & r, const F & fn) {
    fn(p + "_gn1_g", r.gn1_g);
    fn(p + "_gn1_b", r.gn1_b);
    fn(p + "_conv1_w", r.conv1_w);
    fn(p + "_conv1_b", r.conv1_b);
    fn(p + "_time_w", r.time_w);
    fn(p + "_time_b", r.time_b);
    fn(p + "_gn2_g", r.gn2_g);
    fn(p + "_gn2_b", r.gn2_b);
    fn(p + "_conv2_w", r.conv2_w);
    fn(p + "_conv2_b", r.conv2_b);
}

template <typename F>
void visit_attn(const std::string & p, AttnBlockWeights & a, const F & fn) {
    fn(p + "_gn_g", a.gn_g);
    fn(p + "_gn_b", a.gn_b);
    fn(p + "_wq", a.wq);
    fn(p + "_bq", a.bq);
    fn(p + "_wk", a.wk);
    fn(p + "_bk", a.bk);
    fn(p + "_wv", a.wv);
    fn(p + "_bv", a.bv);
    fn(p + "_wo", a.wo);
    fn(p + "_bo", a.bo);
}

template <typename F>
void visit_all(DenoiserWeights & w, const F & fn) {
    fn("token_emb", w.token_emb);
    fn("tmlp1_w", w.tmlp1_w);
    fn("tmlp1_b", w.tmlp1_b);
    fn("tmlp2_w", w.tmlp2_w);
    fn("tmlp2_b", w.tmlp2_b);
    fn("stem_w", w.stem_w);
    fn("stem_b", w.stem_b);
    visit_res("res1", w.res1, fn);
    visit_res("res2", w.res2, fn);
    fn("down_w", w.down_w);
    fn("down_b", w.down_b);
    visit_attn("sattn", w.sattn, fn);
    visit_attn("cattn_a", w.cattn_a, fn);
    fn("up_w", w.up_w);
    fn("up_b", w.up_b);
    visit_attn("cattn_b", w.cattn_b, fn);
    visit_res("res3", w.res3, fn);
    fn("head_w", w.head_w);
    fn("head_b", w.head_b);
}

} // namespace

void DenoiserWeights::visit(const std::function<void(const std::string &, Tensor &)> & fn) {
    visit_all(*this, fn);
}

void DenoiserWeights::visit(const std::function<void(const std::string &, const Tensor &)> & fn) const {
    visit_all(const_cast<DenoiserWeights &>(*this),
              [&](const std::string & name, Tensor & t) { fn(name, t); });
}

int64_t DenoiserWeights::param_count() const {
    int64_t n = 0;
    visit([&](const std::string &, const Tensor & t) { n += t.size(); });
    return n;
}

namespace {

struct Builder {
    Tape & tape;
    std::map<std::string, Tape::Id> wid;

    Tape::Id W(const std::string & name) const {
        auto it = wid.find(name);
        require(it != wid.end(), "build_forward: unknown weight " + name);
        return it->second;
    }

    Tape::Id res_block(const std::string & p, Tape::Id x, Tape::Id temb) {
        Tape::Id h = tape.group_norm(x, W(p + "_gn1_g"), W(p + "_gn1_b"), 8);
        h = tape.silu(h);
        h = tape.conv3x3(h, W(p + "_conv1_w"), W(p + "_conv1_b"), 1);
        Tape::Id tp = tape.linear(temb, W(p + "_time_w"), W(p + "_time_b"));
        h = tape.group_norm(h, W(p + "_gn2_g"), W(p + "_gn2_b"), 8);
        h = tape.scale_shift(h, tp);
        h = tape.silu(h);
        h = tape.conv3x3(h, W(p + "_conv2_w"), W(p + "_conv2_b"), 1);
        return tape.add(x, h);
    }

    // Returns the residual output; exposes intermediate ids via out-params.
    Tape::Id attn_block(const std::string & p, Tape::Id x, int h, int w, Tape::Id kv_src, int kv_rows,
                        const Tensor * logit_bias, const ForwardOpts & opts, bool is_self,
                        Tape::Id * attn_out, Tape::Id * k_out, Tape::Id * v_out) {
        int n = h * w;
        Tape::Id hn = tape.group_norm(x, W(p + "_gn_g"), W(p + "_gn_b"), 8);
        Tape::Id flat = tape.reshape(hn, {n, kModelDim});
        Tape::Id q = tape.linear(flat, W(p + "_wq"), W(p + "_bq"));
        Tape::Id k, v;
        if (is_self && opts.kv == KvMode::inject) {
            require(opts.k_inj != nullptr && opts.v_inj != nullptr,
                    "predict_noise: inject mode needs K and V");
            require(opts.k_inj->shape == Shape({n, kModelDim}) &&
                        opts.v_inj->shape == Shape({n, kModelDim}),
                    "predict_noise: injected K/V shape mismatch");
            k = tape.constant(*opts.k_inj);
            v = tape.constant(*opts.v_inj);
        } else {
            Tape::Id src = is_self ? flat : kv_src;
            k = tape.linear(src, W(p + "_wk"), W(p + "_bk"));
            v = tape.linear(src, W(p + "_wv"), W(p + "_bv"));
        }
        Tape::Id scores = tape.mul_scalar(tape.matmul(q, tape.transpose2d(k)),
                                          1.0 / std::sqrt(static_cast<double>(kModelDim)));
        if (logit_bias != nullptr) {
            Tensor bias({n, kv_rows});
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < kv_rows; ++c) bias[static_cast<int64_t>(r) * kv_rows + c] = (*logit_bias)[c];
            }
            scores = tape.add(scores, tape.constant(std::move(bias)));
        }
        Tape::Id attn = tape.softmax(scores, 1);
        Tape::Id ctx = tape.matmul(attn, v);
        Tape::Id proj = tape.linear(ctx, W(p + "_wo"), W(p + "_bo"));
        if (attn_out) *attn_out = attn;
        if (k_out) *k_out = k;
        if (v_out) *v_out = v;
        return tape.add(x, tape.reshape(proj, {h, w, kModelDim}));
    }
};

} // namespace

ForwardTrace build_forward(Tape & tape, const DenoiserWeights & w, const Tensor & z, int t,
                           const PromptTokens & tokens, const Tensor * null_override,
                           const ForwardOpts & opts) {
    require(z.ndim() == 3 && z.shape[2] == 3, "build_forward: z must be [H,W,3]");
    int H = z.shape[0], Wd = z.shape[1];
    require(H >= 4 && Wd >= 4 && H % 2 == 0 && Wd % 2 == 0, "build_forward: H,W must be even and >= 4");
    bool any_non_pad = false;
    for (int id : tokens.ids) any_non_pad = any_non_pad || (id != kTokPad);
    require(any_non_pad, "build_forward: prompt must contain a non-PAD token");

    Builder b{tape, {}};
    ForwardTrace trace;
    trace.h = H;
    trace.w = Wd;

    if (opts.reuse_z >= 0) {
        require(shape_eq(tape.val(opts.reuse_z).shape, z.shape), "build_forward: reuse_z shape mismatch");
        trace.z = opts.reuse_z;
    } else {
        trace.z = tape.input(z, opts.track_z);
    }

    const_cast<DenoiserWeights &>(w).visit([&](const std::string & name, Tensor & tw) {
        Tape::Id id = tape.input(tw, opts.track_weights);
        b.wid[name] = id;
        trace.weight_ids.push_back(id);
    });
    if (null_override != nullptr) {
        require(null_override->size() == kModelDim, "build_forward: null_override must have 32 elements");
        trace.null_override = tape.input(*null_override, opts.track_null);
    }

    // token matrix [L,32]
    Tape::Id tokmat = tape.token_embed(b.W("token_emb"), tokens.vec(), kTokNull, trace.null_override);

    // time embedding MLP
    Tape::Id temb = tape.constant(time_embedding(t));
    temb = tape.linear(temb, b.W("tmlp1_w"), b.W("tmlp1_b"));
    temb = tape.silu(temb);
    temb = tape.linear(temb, b.W("tmlp2_w"), b.W("tmlp2_b"));

    // PAD columns get -inf logits in every cross-attention
    Tensor pad_bias({kPromptLen});
    for (int i = 0; i < kPromptLen; ++i) {
        pad_bias[i] = tokens.ids[static_cast<size_t>(i)] == kTokPad ? kPadLogit : 0.0f;
    }

    Tape::Id x = tape.conv3x3(trace.z, b.W("stem_w"), b.W("stem_b"), 1);
    x = b.res_block("res1", x, temb);
    x = b.res_block("res2", x, temb);
    x = tape.conv3x3(x, b.W("down_w"), b.W("down_b"), 2);

    int h2 = H / 2, w2 = Wd / 2;
    x = b.attn_block("sattn", x, h2, w2, /*kv_src=*/-1, h2 * w2, nullptr, opts, true, nullptr,
                     &trace.k_self, &trace.v_self);
    x = b.attn_block("cattn_a", x, h2, w2, tokmat, kPromptLen, &pad_bias, opts, false, &trace.attn_lo,
                     nullptr, nullptr);
    x = tape.resize2x_nearest(x);
    x = tape.conv3x3(x, b.W("up_w"), b.W("up_b"), 1);
    x = b.attn_block("cattn_b", x, H, Wd, tokmat, kPromptLen, &pad_bias, opts, false, &trace.attn_hi,
                     nullptr, nullptr);
    x = b.res_block("res3", x, temb);
    trace.eps = tape.conv3x3(x, b.W("head_w"), b.W("head_b"), 1);
    trace.kv_recorded = opts.kv == KvMode::record;
    return trace;
}

std::pair<Tensor, AttentionRecord> predict_noise(const DenoiserWeights & w, const Tensor & z, int t,
                                                 const PromptTokens & tokens,
                                                 const Tensor * null_override, KvMode kv,
                                                 const Tensor * k_inj, const Tensor * v_inj) {
    Tape tape;
    ForwardOpts opts;
    opts.kv = kv;
    opts.k_inj = k_inj;
    opts.v_inj = v_inj;
    ForwardTrace trace = build_forward(tape, w, z, t, tokens, null_override, opts);
    return {tape.val(trace.eps), take_record(tape, trace)};
}

AttentionRecord take_record(const Tape & tape, const ForwardTrace & trace) {
    AttentionRecord rec;
    rec.h_lo = trace.h / 2;
    rec.w_lo = trace.w / 2;
    rec.h_hi = trace.h;
    rec.w_hi = trace.w;
    rec.cross_lo = tape.val(trace.attn_lo);
    rec.cross_hi = tape.val(trace.attn_hi);
    if (trace.kv_recorded) {
        rec.k_self = tape.val(trace.k_self);
        rec.v_self = tape.val(trace.v_self);
        rec.has_kv = true;
    }
    return rec;
}

Tape::Id aggregate_cross_attention_node(Tape & tape, Tape::Id attn_lo, Tape::Id attn_hi, int h_lo,
                                        int w_lo, int h_hi, int w_hi, int k) {
    require(h_hi == 2 * h_lo && w_hi == 2 * w_lo, "aggregate: resolutions must differ by 2x");
    require(k >= 0 && k < kPromptLen, "aggregate: token index out of range");
    Tensor onehot({kPromptLen, 1});
    onehot[k] = 1.0f;
    Tape::Id oh = tape.constant(onehot);

    Tape::Id col_lo = tape.reshape(tape.matmul(attn_lo, oh), {h_lo, w_lo, 1});
    Tape::Id up = tape.resize2x_bilinear(col_lo);
    Tape::Id col_hi = tape.reshape(tape.matmul(attn_hi, oh), {h_hi, w_hi, 1});
    Tape::Id s = tape.add(up, col_hi);

    // Fused min-max normalization: extremes land exactly on 0 and 1, the
    // min/max scalars are detached, and a constant map degenerates to zeros.
    return tape.reshape(tape.minmax_norm(s), {h_hi, w_hi});
}

Tensor aggregate_cross_attention(const AttentionRecord & rec, int k, const PromptTokens & tokens) {
    require(k >= 0 && k < kPromptLen, "aggregate_cross_attention: token index out of range");
    require(tokens.ids[static_cast<size_t>(k)] != kTokPad, "aggregate_cross_attention: k is PAD");
    Tape tape;
    Tape::Id lo = tape.constant(rec.cross_lo);
    Tape::Id hi = tape.constant(rec.cross_hi);
    Tape::Id out =
        aggregate_cross_attention_node(tape, lo, hi, rec.h_lo, rec.w_lo, rec.h_hi, rec.w_hi, k);
    return tape.val(out);
}

} // namespace eraser
