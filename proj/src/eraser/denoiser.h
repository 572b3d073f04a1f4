#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eraser/rng.h"
#include "eraser/tape.h"
#include "eraser/tensor.h"

namespace eraser {

// Closed vocabulary. NULL is the unconditional token; PAD rows are masked out
// of every cross-attention softmax with -inf logits.
inline constexpr int kTokNull = 0;
inline constexpr int kTokPad = 1;
inline constexpr int kTokRed = 2;
inline constexpr int kTokGreen = 3;
inline constexpr int kTokBlue = 4;
inline constexpr int kTokSquare = 5;
inline constexpr int kTokDisk = 6;
inline constexpr int kVocab = 7;
inline constexpr int kPromptLen = 6;
inline constexpr int kModelDim = 32;
inline constexpr int kTimeDim = 64;

const char * token_name(int id);
int token_id(const std::string & name); // throws config_error on unknown name

struct PromptTokens {
    std::array<int, kPromptLen> ids{kTokNull, kTokNull, kTokNull, kTokNull, kTokNull, kTokNull};

    static PromptTokens uncond() { return PromptTokens{}; }
    bool is_uncond() const;
    std::vector<int> vec() const { return std::vector<int>(ids.begin(), ids.end()); }
    std::string str() const;
};

// Residual conv block: x + conv2(silu(gn2(film(conv1(silu(gn1(x))), t)))).
struct ResBlockWeights {
    Tensor gn1_g, gn1_b;
    Tensor conv1_w, conv1_b;
    Tensor time_w, time_b; // projects the 64-d time embedding to per-channel scale/shift
    Tensor gn2_g, gn2_b;
    Tensor conv2_w, conv2_b;
};

// Pre-norm single-head attention block: x + Wo(attn(GN(x))).
struct AttnBlockWeights {
    Tensor gn_g, gn_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// 16x16 -> 8x8 -> 16x16 conditional denoiser. Channels-last images, 32
// channels everywhere after the stem, cross-attention at both resolutions.
struct DenoiserWeights {
    Tensor token_emb; // [7,32]
    Tensor tmlp1_w, tmlp1_b, tmlp2_w, tmlp2_b;
    Tensor stem_w, stem_b;
    ResBlockWeights res1, res2;
    Tensor down_w, down_b;
    AttnBlockWeights sattn;  // self-attention, low resolution
    AttnBlockWeights cattn_a; // cross-attention, low resolution
    Tensor up_w, up_b;
    AttnBlockWeights cattn_b; // cross-attention, full resolution
    ResBlockWeights res3;
    Tensor head_w, head_b;

    // Allocates every tensor and fills it from the init stream in visit order.
    // Residual-final convs, attention output projections and the conv head are
    // zero-initialized so the net starts as eps = 0.
    static DenoiserWeights init(Rng & rng);
    static DenoiserWeights alloc(); // zero weights with correct shapes

    // Fixed enumeration order; checkpoint layout, Adam state and tape inputs
    // all follow it.
    void visit(const std::function<void(const std::string &, Tensor &)> & fn);
    void visit(const std::function<void(const std::string &, const Tensor &)> & fn) const;
    int64_t param_count() const;
};

enum class KvMode { none, record, inject };

struct AttentionRecord {
    Tensor cross_lo;  // [h/2*w/2, L] post-softmax
    Tensor cross_hi;  // [h*w, L]
    int h_lo = 0, w_lo = 0, h_hi = 0, w_hi = 0;
    Tensor k_self, v_self; // [h/2*w/2, d], present only in record mode
    bool has_kv = false;
};

struct ForwardOpts {
    bool track_z = false;
    bool track_weights = false;
    bool track_null = false;
    KvMode kv = KvMode::none;
    const Tensor * k_inj = nullptr;
    const Tensor * v_inj = nullptr;
    // When >= 0 the pass reads the latent from this existing tape node instead
    // of creating a fresh input; lets two passes differentiate a shared latent.
    Tape::Id reuse_z = -1;
};

struct ForwardTrace {
    Tape::Id z = -1;
    Tape::Id eps = -1;
    Tape::Id null_override = -1;
    Tape::Id attn_lo = -1, attn_hi = -1; // post-softmax cross-attention nodes
    Tape::Id k_self = -1, v_self = -1;
    std::vector<Tape::Id> weight_ids;
    int h = 0, w = 0;
    bool kv_recorded = false;
};

// Appends the whole denoiser forward pass to `tape`. z is [H,W,3] with even
// H,W; null_override (optional, numel 32) replaces the NULL token's embedding.
ForwardTrace build_forward(Tape & tape, const DenoiserWeights & w, const Tensor & z, int t,
                           const PromptTokens & tokens, const Tensor * null_override,
                           const ForwardOpts & opts);

// Plain evaluation wrapper around build_forward.
std::pair<Tensor, AttentionRecord> predict_noise(const DenoiserWeights & w, const Tensor & z, int t,
                                                 const PromptTokens & tokens,
                                                 const Tensor * null_override = nullptr,
                                                 KvMode kv = KvMode::none,
                                                 const Tensor * k_inj = nullptr,
                                                 const Tensor * v_inj = nullptr);

AttentionRecord take_record(const Tape & tape, const ForwardTrace & trace);

// Column k of each recorded map -> spatial grid -> bilinear resize to the high
// resolution -> sum -> min-max normalize to [0,1] (all-zeros when max == min).
Tensor aggregate_cross_attention(const AttentionRecord & rec, int k, const PromptTokens & tokens);

// Tape version used by the guidance energy; same arithmetic as the plain one.
Tape::Id aggregate_cross_attention_node(Tape & tape, Tape::Id attn_lo, Tape::Id attn_hi, int h_lo,
                                        int w_lo, int h_hi, int w_hi, int k);

// Sinusoidal embedding of the integer step, dim 64.
Tensor time_embedding(int t);

} // namespace eraser
