#pragma once

// Dual-path decoder. Each block advances a sentence-conditioned recurrent
// state and applies a per-channel affine on the global path (RAT), then
// refines a parallel spatial stream through word cross-attention and a
// channel-wise affine (MCAT / CrossAffine). Both modulations are residual, so
// zero-initialized modulation MLPs make every block an identity map.

#include <optional>

#include "daft/encoder.hpp"
#include "daft/text.hpp"

namespace daft {

// two-layer perceptron; the output layer is zero-initialized so modulation
// starts as the identity
struct MlpParams {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;

    static MlpParams build(ParamStore& store, const std::string& prefix, int in, int hidden,
                           int out, Rng& rng) {
        MlpParams p;
        p.w1 = store.add(prefix + ".w1", Shape{hidden, in});
        p.b1 = store.add(prefix + ".b1", Shape{hidden});
        p.w2 = store.add(prefix + ".w2", Shape{out, hidden});
        p.b2 = store.add(prefix + ".b2", Shape{out});
        fill_normal(store.at(p.w1), rng, 0.02);
        // w2/b2 stay zero
        return p;
    }
};

inline Tensor mlp_forward(Binder& bind, const MlpParams& p, const Tensor& x) {
    Tensor h = relu(linear(x, bind(p.w1), bind(p.b1)));
    return linear(h, bind(p.w2), bind(p.b2));
}

struct LstmCellParams {
    int w_ih = -1, w_hh = -1, b_ih = -1, b_hh = -1;
    int d = 0;

    static LstmCellParams build(ParamStore& store, const std::string& prefix, int d, Rng& rng) {
        LstmCellParams p;
        p.d = d;
        p.w_ih = store.add(prefix + ".w_ih", Shape{4 * d, d});
        p.w_hh = store.add(prefix + ".w_hh", Shape{4 * d, d});
        p.b_ih = store.add(prefix + ".b_ih", Shape{4 * d});
        p.b_hh = store.add(prefix + ".b_hh", Shape{4 * d});
        fill_normal(store.at(p.w_ih), rng, 0.02);
        fill_normal(store.at(p.w_hh), rng, 0.02);
        return p;
    }
};

struct RecurrentState {
    Tensor h;  // [d_w]
    Tensor c;  // [d_w]
    int step = 0;
};

inline RecurrentState initial_state(Tape& tape, int d_w) {
    RecurrentState st;
    st.h = tape.full(Shape{d_w}, 0.0);
    st.c = tape.full(Shape{d_w}, 0.0);
    st.step = 0;
    return st;
}

// standard cell, gate order i, f, g, o
inline RecurrentState lstm_step(Binder& bind, const LstmCellParams& p, const Tensor& input,
                                const RecurrentState& st) {
    Tensor gates = add(linear(input, bind(p.w_ih), bind(p.b_ih)),
                       linear(st.h, bind(p.w_hh), bind(p.b_hh)));
    int d = p.d;
    Tensor gi = sigmoid(slice_axis(gates, 0, 0, d));
    Tensor gf = sigmoid(slice_axis(gates, 0, d, d));
    Tensor gg = tanh(slice_axis(gates, 0, 2 * d, d));
    Tensor go = sigmoid(slice_axis(gates, 0, 3 * d, d));
    RecurrentState out;
    out.c = add(mul(gf, st.c), mul(gi, gg));
    out.h = mul(go, tanh(out.c));
    out.step = st.step + 1;
    return out;
}

// ---------------------------------------------------------------------------
// RAT: recurrent affine transformation (global path)
// ---------------------------------------------------------------------------

struct RatParams {
    LstmCellParams cell;
    MlpParams gamma_mlp, beta_mlp;  // h_t -> per-channel modulation

    static RatParams build(ParamStore& store, const std::string& prefix, int d_w, int channels,
                           Rng& rng) {
        RatParams p;
        p.cell = LstmCellParams::build(store, prefix + ".lstm", d_w, rng);
        p.gamma_mlp = MlpParams::build(store, prefix + ".gamma", d_w, d_w, channels, rng);
        p.beta_mlp = MlpParams::build(store, prefix + ".beta", d_w, d_w, channels, rng);
        return p;
    }
};

inline std::pair<Tensor, RecurrentState> rat_step(Binder& bind, const RatParams& p, const Tensor& f,
                                                  const Tensor& sentence,
                                                  const RecurrentState& st) {
    RecurrentState next = lstm_step(bind, p.cell, sentence, st);
    Tensor gamma = mlp_forward(bind, p.gamma_mlp, next.h);
    Tensor beta = mlp_forward(bind, p.beta_mlp, next.h);
    Tensor out = add(f, channel_affine(f, gamma, beta));
    return {out, next};
}

// ---------------------------------------------------------------------------
// CrossAffine and MCAT (spatial path)
// ---------------------------------------------------------------------------

// per spatial location: attention logits q . w_l over words (unscaled),
// softmax over words, then the attention-weighted word average
inline Tensor cross_attention(const Tensor& x, const Tensor& words, const Tensor& wq) {
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int d_w = wq.shape()[0];
    Tensor rows = transpose2d(reshape(x, Shape{C, H * W}));        // [HW, C]
    Tensor q = linear(rows, wq);                                   // [HW, d_w]
    Tensor logits = linear(q, words);                              // [HW, L]
    Tensor attn = softmax(logits, 1);
    Tensor fa = linear(attn, transpose2d(words));                  // [HW, d_w]
    return reshape(transpose2d(fa), Shape{d_w, H, W});
}

struct CrossAffineParams {
    int wq = -1;                    // [d_w, C]
    MlpParams gamma_mlp, beta_mlp;  // channel-wise, per spatial location: 2*d_w -> C

    static CrossAffineParams build(ParamStore& store, const std::string& prefix, int d_w,
                                   int channels, Rng& rng) {
        CrossAffineParams p;
        p.wq = store.add(prefix + ".wq", Shape{d_w, channels});
        fill_normal(store.at(p.wq), rng, 0.02);
        p.gamma_mlp = MlpParams::build(store, prefix + ".gamma", 2 * d_w, d_w, channels, rng);
        p.beta_mlp = MlpParams::build(store, prefix + ".beta", 2 * d_w, d_w, channels, rng);
        return p;
    }
};

inline Tensor cross_affine(Binder& bind, const CrossAffineParams& p, const Tensor& x,
                           const Tensor& h_t, const Tensor& words) {
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor f_attn = cross_attention(x, words, bind(p.wq));
    Tensor f_spatial = concat({f_attn, replicate_spatial(h_t, H, W)}, 0);  // [2 d_w, H, W]
    int dd = f_spatial.shape()[0];
    Tensor rows = transpose2d(reshape(f_spatial, Shape{dd, H * W}));       // [HW, 2 d_w]
    Tensor gamma = reshape(transpose2d(mlp_forward(bind, p.gamma_mlp, rows)), Shape{C, H, W});
    Tensor beta = reshape(transpose2d(mlp_forward(bind, p.beta_mlp, rows)), Shape{C, H, W});
    return add(x, add(mul(gamma, x), beta));
}

struct McatParams {
    CrossAffineParams ca;
    int conv_w = -1, conv_b = -1;  // 3x3, block width -> spatial-path width

    static McatParams build(ParamStore& store, const std::string& prefix, int d_w, int channels,
                            int spatial_channels, Rng& rng) {
        McatParams p;
        p.ca = CrossAffineParams::build(store, prefix + ".ca", d_w, channels, rng);
        p.conv_w = store.add(prefix + ".conv.w", Shape{spatial_channels, channels, 3, 3});
        p.conv_b = store.add(prefix + ".conv.b", Shape{spatial_channels});
        fill_normal(store.at(p.conv_w), rng, 0.02);
        return p;
    }
};

inline Tensor mcat_module(Binder& bind, const McatParams& p, const Tensor& f_g_out,
                          const Tensor& words, const Tensor& h_t,
                          const std::optional<Tensor>& prev_spatial) {
    Tensor y = cross_affine(bind, p.ca, f_g_out, h_t, words);
    y = conv2d(leaky_relu(y), bind(p.conv_w), bind(p.conv_b), 1, 1);
    if (prev_spatial) {
        Tensor up = upsample_nearest2x(*prev_spatial);
        if (up.shape() != y.shape())
            throw ShapeError("previous spatial feature upsampled to " + shape_str(up.shape()) +
                             " does not match " + shape_str(y.shape()));
        y = add(y, up);
    }
    return y;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct DaftBlockParams {
    RatParams rat;
    McatParams mcat;
    int skip_proj_w = -1, skip_proj_b = -1;  // 1x1 width change ahead of the upsample
    bool upsample = false;
    int width = 0;
};

struct GeneratorParams {
    EncoderParams enc;
    int init_w = -1, init_b = -1;  // z -> C_L*4*4
    std::vector<DaftBlockParams> blocks;
    int img_w = -1, img_b = -1;  // spatial channels -> 3, zero-init
    int attn_query = -1;         // [d_w, 3]; fixed pixel-space projection for the attention map
    int d_z = 0, d_w = 0, spatial_channels = 0;

    static GeneratorParams build(ParamStore& store, int depth, int image_size, int base_channels,
                                 int channel_cap, int d_w, int d_z, int spatial_channels,
                                 Rng& rng) {
        GeneratorParams g;
        g.enc = EncoderParams::build(store, depth, image_size, base_channels, channel_cap, rng);
        g.d_z = d_z;
        g.d_w = d_w;
        g.spatial_channels = spatial_channels;
        int cl = g.enc.widths.back();
        g.init_w = store.add("gen.init.w", Shape{cl * 16, d_z});
        g.init_b = store.add("gen.init.b", Shape{cl * 16});
        fill_normal(store.at(g.init_w), rng, 0.02);
        // block i runs at the width of encoder pyramid level depth-i
        for (int i = 0; i < depth; ++i) {
            DaftBlockParams blk;
            blk.width = g.enc.widths[size_t(depth - i)];
            blk.upsample = i > 0;
            std::string prefix = "gen.block" + std::to_string(i);
            blk.rat = RatParams::build(store, prefix + ".rat", d_w, blk.width, rng);
            blk.mcat = McatParams::build(store, prefix + ".mcat", d_w, blk.width, spatial_channels,
                                         rng);
            if (i > 0) {
                int prev_width = g.enc.widths[size_t(depth - i + 1)];
                blk.skip_proj_w =
                    store.add(prefix + ".skip.w", Shape{blk.width, prev_width, 1, 1});
                blk.skip_proj_b = store.add(prefix + ".skip.b", Shape{blk.width});
                fill_normal(store.at(blk.skip_proj_w), rng, 0.02);
            }
            g.blocks.push_back(blk);
        }
        g.img_w = store.add("gen.image.w", Shape{3, spatial_channels, 3, 3});
        g.img_b = store.add("gen.image.b", Shape{3});
        // zero-init image head: an untrained generator composites to exactly
        // the masked input
        g.attn_query = store.add("gen.attn_query", Shape{d_w, 3}, /*trainable=*/false);
        fill_normal(store.at(g.attn_query), rng, 1.0);
        return g;
    }
};

struct GeneratorOutput {
    Tensor raw;         // [3,S,S] in [-1,1]
    Tensor composited;  // input at valid pixels, raw at invalid pixels
    EncoderPyramid pyramid;
};

inline Tensor init_input(Binder& bind, const GeneratorParams& g, const Tensor& z,
                         const Tensor& bottleneck) {
    if (z.shape() != Shape{g.d_z})
        throw ShapeError("noise vector must be [" + std::to_string(g.d_z) + "], got " +
                         shape_str(z.shape()));
    int cl = g.enc.widths.back();
    Tensor mapped = reshape(linear(z, bind(g.init_w), bind(g.init_b)), Shape{cl, 4, 4});
    return add(mapped, bottleneck);
}

inline Tensor fuse_skip(const Tensor& enc_feature, const Tensor& dec_feature) {
    if (enc_feature.shape() != dec_feature.shape())
        throw ShapeError("skip fusion requires matching shapes, got " +
                         shape_str(enc_feature.shape()) + " vs " + shape_str(dec_feature.shape()));
    return add(enc_feature, dec_feature);
}

inline GeneratorOutput generate(Binder& bind, const GeneratorParams& g, const Tensor& masked_image,
                                const MaskGrid& m0, const Tensor& z, const TextBundle& text) {
    GeneratorOutput out;
    out.pyramid = encode(bind, g.enc, masked_image, m0);
    int depth = g.enc.depth;
    RecurrentState state = initial_state(bind.tape(), g.d_w);
    Tensor global = init_input(bind, g, z, out.pyramid.bottleneck());
    std::optional<Tensor> spatial;
    for (int i = 0; i < depth; ++i) {
        const DaftBlockParams& blk = g.blocks[size_t(i)];
        if (i > 0) {
            Tensor projected = conv2d(global, bind(blk.skip_proj_w), bind(blk.skip_proj_b), 1, 0);
            global = fuse_skip(out.pyramid.features[size_t(depth - i)],
                               upsample_nearest2x(projected));
        }
        auto [g_out, next_state] = rat_step(bind, blk.rat, global, text.sentence, state);
        spatial = mcat_module(bind, blk.mcat, g_out, text.words, next_state.h, spatial);
        global = g_out;
        state = next_state;
    }
    out.raw = tanh(conv2d(*spatial, bind(g.img_w), bind(g.img_b), 1, 1));
    out.composited = add(mask_mul(masked_image, m0, false), mask_mul(out.raw, m0, true));
    return out;
}

}  // namespace daft
