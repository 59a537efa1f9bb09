#pragma once

// Separated mask convolution encoder. Valid and invalid regions are convolved
// through distinct kernels, normalized against region statistics, and
// recomposed by the min-pool-updated mask, so nothing computed from invalid
// pixels ever lands in a valid-region feature.

#include "daft/params.hpp"

namespace daft {

struct ConvGeometry {
    int k = 3;
    int stride = 1;
    int pad = 1;
};

// Eq.-4-style update: output cell is valid (0) iff its receptive field
// contains at least one valid cell. Padding counts as invalid. Equivalent to
// -MaxPool(-M) with -inf padding, run directly on the grid.
inline MaskGrid mask_update(const MaskGrid& m, int k, int stride, int pad) {
    if (k <= 0 || stride <= 0 || pad < 0)
        throw ContractError("mask_update requires k > 0, stride > 0, pad >= 0");
    if (m.h + 2 * pad < k || m.w + 2 * pad < k)
        throw ContractError("mask_update window " + std::to_string(k) + " exceeds padded grid " +
                            std::to_string(m.h) + "x" + std::to_string(m.w));
    int Ho = (m.h + 2 * pad - k) / stride + 1;
    int Wo = (m.w + 2 * pad - k) / stride + 1;
    MaskGrid out(Ho, Wo, 1);
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            uint8_t v = 1;
            for (int ky = 0; ky < k && v; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= m.h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= m.w) continue;
                    if (m.at(iy, ix) == 0) {
                        v = 0;
                        break;
                    }
                }
            }
            out.at(oy, ox) = v;
        }
    }
    return out;
}

inline MaskGrid mask_update(const MaskGrid& m, const ConvGeometry& g) {
    return mask_update(m, g.k, g.stride, g.pad);
}

// Region-split standardization followed by a learnable per-channel affine
// shared between the two regions.
inline Tensor mask_normalize(Binder& bind, const Tensor& f, const MaskGrid& m, int gamma_pid,
                             int beta_pid) {
    return channel_affine(region_standardize(f, m), bind(gamma_pid), bind(beta_pid));
}

struct SmcBlockParams {
    int conv_valid_w = -1, conv_valid_b = -1;
    int conv_invalid_w = -1, conv_invalid_b = -1;
    int norm_gamma = -1, norm_beta = -1;
    ConvGeometry geom;
    int in_channels = 0, out_channels = 0;

    static SmcBlockParams build(ParamStore& store, const std::string& prefix, int cin, int cout,
                                ConvGeometry geom, Rng& rng) {
        SmcBlockParams p;
        p.geom = geom;
        p.in_channels = cin;
        p.out_channels = cout;
        Shape wshape{cout, cin, geom.k, geom.k};
        p.conv_valid_w = store.add(prefix + ".conv_valid.w", wshape);
        p.conv_valid_b = store.add(prefix + ".conv_valid.b", Shape{cout});
        p.conv_invalid_w = store.add(prefix + ".conv_invalid.w", wshape);
        p.conv_invalid_b = store.add(prefix + ".conv_invalid.b", Shape{cout});
        p.norm_gamma = store.add(prefix + ".norm.gamma", Shape{cout});
        p.norm_beta = store.add(prefix + ".norm.beta", Shape{cout});
        fill_normal(store.at(p.conv_valid_w), rng, 0.02);
        fill_normal(store.at(p.conv_invalid_w), rng, 0.02);
        fill_const(store.at(p.norm_gamma), 1.0);
        return p;
    }
};

// F_val  = Norm(Conv_val (F (1-M)))   -> valid region of the output
// F_inv  = Norm(Conv_inv (F    M ))   -> invalid region of the output
// M_next = mask_update(M), same geometry as the convolutions
inline std::pair<Tensor, MaskGrid> smc_block(Binder& bind, const SmcBlockParams& p, const Tensor& f,
                                             const MaskGrid& m) {
    if (f.shape().size() != 3 || f.shape()[0] != p.in_channels)
        throw ShapeError("smc_block expects [" + std::to_string(p.in_channels) + ",H,W], got " +
                         shape_str(f.shape()));
    if (f.shape()[1] != m.h || f.shape()[2] != m.w)
        throw ContractError("smc_block mask geometry does not match the feature");
    MaskGrid m_next = mask_update(m, p.geom);
    Tensor valid_in = mask_mul(f, m, /*keep_invalid=*/false);
    Tensor invalid_in = mask_mul(f, m, /*keep_invalid=*/true);
    Tensor f_val = conv2d(valid_in, bind(p.conv_valid_w), bind(p.conv_valid_b), p.geom.stride,
                          p.geom.pad);
    Tensor f_inv = conv2d(invalid_in, bind(p.conv_invalid_w), bind(p.conv_invalid_b),
                          p.geom.stride, p.geom.pad);
    f_val = mask_normalize(bind, f_val, m_next, p.norm_gamma, p.norm_beta);
    f_inv = mask_normalize(bind, f_inv, m_next, p.norm_gamma, p.norm_beta);
    Tensor out = add(mask_mul(f_val, m_next, false), mask_mul(f_inv, m_next, true));
    return {out, m_next};
}

struct EncoderParams {
    std::vector<SmcBlockParams> blocks;
    int depth = 0;          // number of SMC blocks (L)
    int image_size = 0;     // S = 4 * 2^(L-1)
    std::vector<int> widths;  // channel count per pyramid level 0..L (level 0 = image)

    static EncoderParams build(ParamStore& store, int depth, int image_size, int base_channels,
                               int channel_cap, Rng& rng) {
        if (depth < 1) throw ConfigError("encoder depth must be >= 1");
        int expected = 4 << (depth - 1);
        if (image_size != expected)
            throw ConfigError("image size " + std::to_string(image_size) +
                              " violates S = 4*2^(L-1); depth " + std::to_string(depth) +
                              " requires S = " + std::to_string(expected));
        EncoderParams p;
        p.depth = depth;
        p.image_size = image_size;
        p.widths.push_back(3);
        for (int b = 0; b < depth; ++b) {
            int cout = std::min(base_channels << b, channel_cap);
            p.widths.push_back(cout);
            ConvGeometry g = b == 0 ? ConvGeometry{3, 1, 1} : ConvGeometry{4, 2, 1};
            p.blocks.push_back(SmcBlockParams::build(store, "enc.block" + std::to_string(b),
                                                     p.widths[size_t(b)], cout, g, rng));
        }
        return p;
    }
};

// The pyramid keeps the masked image itself as level 0, then one level per
// SMC block. Spatial sizes: S, S, S/2, ..., 4.
struct EncoderPyramid {
    std::vector<Tensor> features;
    std::vector<MaskGrid> masks;

    const Tensor& bottleneck() const { return features.back(); }
    int levels() const { return int(features.size()); }
};

inline EncoderPyramid encode(Binder& bind, const EncoderParams& p, const Tensor& masked_image,
                             const MaskGrid& m0) {
    int S = p.image_size;
    if (masked_image.shape() != Shape{3, S, S})
        throw ConfigError("encoder expects a [3," + std::to_string(S) + "," + std::to_string(S) +
                          "] image, got " + shape_str(masked_image.shape()));
    if (m0.h != S || m0.w != S)
        throw ConfigError("initial mask must be " + std::to_string(S) + "x" + std::to_string(S));
    EncoderPyramid py;
    py.features.push_back(masked_image);
    py.masks.push_back(m0);
    Tensor f = masked_image;
    MaskGrid m = m0;
    for (const SmcBlockParams& blk : p.blocks) {
        auto [fn, mn] = smc_block(bind, blk, f, m);
        py.features.push_back(fn);
        py.masks.push_back(mn);
        f = fn;
        m = mn;
    }
    return py;
}

}  // namespace daft
