#include <gtest/gtest.h>

#include "daft/encoder.hpp"
#include "oracles.hpp"

using namespace daft;

namespace {

MaskGrid random_mask(Rng& rng, int h, int w) {
    MaskGrid m(h, w, 0);
    for (uint8_t& c : m.cells) c = uint8_t(rng.below(2));
    return m;
}

std::vector<double> randn(Rng& rng, size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

}  // namespace

TEST(MaskUpdate, AllInvalidStaysInvalid) {
    MaskGrid m(2, 2, 1);
    MaskGrid out = mask_update(m, 2, 2, 0);
    ASSERT_EQ(out.h, 1);
    ASSERT_EQ(out.w, 1);
    EXPECT_EQ(out.at(0, 0), 1);
}

TEST(MaskUpdate, AnyValidMakesValid) {
    MaskGrid m(2, 2, 1);
    m.at(0, 0) = 0;
    MaskGrid out = mask_update(m, 2, 2, 0);
    EXPECT_EQ(out.at(0, 0), 0);
}

TEST(MaskUpdate, MatchesReceptiveFieldOracle) {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        MaskGrid m = random_mask(rng, 8, 8);
        MaskGrid got = mask_update(m, 4, 2, 1);
        int ho = 0, wo = 0;
        auto want = oracles::mask_update(m.cells, 8, 8, 4, 2, 1, &ho, &wo);
        ASSERT_EQ(got.h, ho);
        ASSERT_EQ(got.w, wo);
        EXPECT_EQ(got.cells, want);
    }
}

TEST(MaskUpdate, ExhaustiveFourByFour) {
    // every mask on a 4x4 grid, two geometries
    for (uint32_t bits = 0; bits < (1u << 16); ++bits) {
        MaskGrid m(4, 4, 0);
        for (int i = 0; i < 16; ++i) m.cells[size_t(i)] = uint8_t((bits >> i) & 1u);
        for (auto [k, s, p] : {std::tuple{3, 1, 1}, std::tuple{4, 2, 1}}) {
            MaskGrid got = mask_update(m, k, s, p);
            auto want = oracles::mask_update(m.cells, 4, 4, k, s, p);
            ASSERT_EQ(got.cells, want) << "bits=" << bits << " k=" << k;
        }
    }
}

TEST(MaskUpdate, RejectsBadGeometry) {
    MaskGrid m(4, 4, 0);
    EXPECT_THROW(mask_update(m, 0, 1, 0), ContractError);
    EXPECT_THROW(mask_update(m, 8, 1, 1), ContractError);
}

TEST(MaskNormalize, ConstantRegionGoesToZero) {
    ParamStore store;
    Rng rng(1);
    MaskGrid m(2, 2, 0);
    m.at(0, 0) = 1;
    Tape tape;
    // valid cells hold constant 5.0, invalid holds 9.0
    auto f = tape.leaf({1, 2, 2}, {9.0, 5.0, 5.0, 5.0}, false);
    Tensor out = region_standardize(f, m);
    for (double v : out.value()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(MaskNormalize, AllValidEqualsInstanceNorm) {
    Rng rng(2);
    MaskGrid m(3, 3, 0);
    auto xv = randn(rng, 9);
    Tape tape;
    Tensor out = region_standardize(tape.constant({1, 3, 3}, xv), m);
    double mean = 0, var = 0;
    for (double v : xv) mean += v;
    mean /= 9;
    for (double v : xv) var += (v - mean) * (v - mean);
    var /= 9;
    for (size_t i = 0; i < 9; ++i)
        EXPECT_NEAR(out.value()[i], (xv[i] - mean) / std::sqrt(var), 1e-12);
}

TEST(MaskNormalize, ValidOutputsIgnoreInvalidContent) {
    Rng rng(3);
    MaskGrid m = random_mask(rng, 4, 4);
    m.at(0, 0) = 0;  // ensure both regions populated
    m.at(3, 3) = 1;
    auto base = randn(rng, 32);
    auto noisy = base;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 16; ++i)
            if (m.cells[size_t(i)]) noisy[size_t(c) * 16 + i] = rng.normal() * 100.0;
    Tape tape;
    Tensor a = region_standardize(tape.constant({2, 4, 4}, base), m);
    Tensor b = region_standardize(tape.constant({2, 4, 4}, noisy), m);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 16; ++i)
            if (!m.cells[size_t(i)])
                EXPECT_EQ(a.value()[size_t(c) * 16 + i], b.value()[size_t(c) * 16 + i]);
}

TEST(SmcBlock, AllValidMaskUsesOnlyValidPath) {
    ParamStore store;
    Rng rng(4);
    auto p = SmcBlockParams::build(store, "b", 2, 3, ConvGeometry{3, 1, 1}, rng);
    // make the two conv paths differ appreciably
    fill_normal(store.at(p.conv_invalid_w), rng, 5.0);
    MaskGrid m(4, 4, 0);
    Tape tape;
    Binder bind(tape, store, false);
    auto xv = randn(rng, 32);
    Tensor f = tape.constant({2, 4, 4}, xv);
    auto [out, m_next] = smc_block(bind, p, f, m);
    EXPECT_EQ(m_next.count_invalid(), 0u);
    // compare against the valid path alone: Norm(Conv_val(F))
    Tensor ref = mask_normalize(bind, conv2d(f, bind(p.conv_valid_w), bind(p.conv_valid_b), 1, 1),
                                m_next, p.norm_gamma, p.norm_beta);
    EXPECT_EQ(out.value(), ref.value());
}

TEST(SmcBlock, AllInvalidMaskUsesOnlyInvalidPath) {
    ParamStore store;
    Rng rng(5);
    auto p = SmcBlockParams::build(store, "b", 2, 3, ConvGeometry{3, 1, 1}, rng);
    MaskGrid m(4, 4, 1);
    Tape tape;
    Binder bind(tape, store, false);
    Tensor f = tape.constant({2, 4, 4}, randn(rng, 32));
    auto [out, m_next] = smc_block(bind, p, f, m);
    EXPECT_EQ(m_next.count_invalid(), size_t(m_next.h) * m_next.w);
    Tensor ref = mask_normalize(bind, conv2d(f, bind(p.conv_invalid_w), bind(p.conv_invalid_b), 1, 1),
                                m_next, p.norm_gamma, p.norm_beta);
    EXPECT_EQ(out.value(), ref.value());
}

TEST(SmcBlock, OutputPartitionSourcesEachPositionOnce) {
    ParamStore store;
    Rng rng(6);
    auto p = SmcBlockParams::build(store, "b", 2, 3, ConvGeometry{4, 2, 1}, rng);
    MaskGrid m = random_mask(rng, 8, 8);
    Tape tape;
    Binder bind(tape, store, false);
    Tensor f = tape.constant({2, 8, 8}, randn(rng, 128));
    auto [out, m_next] = smc_block(bind, p, f, m);
    Tensor f_val = mask_normalize(
        bind, conv2d(mask_mul(f, m, false), bind(p.conv_valid_w), bind(p.conv_valid_b), 2, 1),
        m_next, p.norm_gamma, p.norm_beta);
    Tensor f_inv = mask_normalize(
        bind, conv2d(mask_mul(f, m, true), bind(p.conv_invalid_w), bind(p.conv_invalid_b), 2, 1),
        m_next, p.norm_gamma, p.norm_beta);
    int hw = m_next.h * m_next.w;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i) {
            double want = m_next.cells[size_t(i)] ? f_inv.value()[size_t(c) * hw + i]
                                                  : f_val.value()[size_t(c) * hw + i];
            EXPECT_EQ(out.value()[size_t(c) * hw + i], want);
        }
}

TEST(SmcBlock, NoLeakageFromInvalidPixels) {
    ParamStore store;
    Rng rng(7);
    auto p = SmcBlockParams::build(store, "b", 2, 3, ConvGeometry{4, 2, 1}, rng);
    MaskGrid m = random_mask(rng, 8, 8);
    m.at(0, 0) = 0;
    m.at(7, 7) = 1;
    auto base = randn(rng, 128);
    auto perturbed = base;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 64; ++i)
            if (m.cells[size_t(i)]) perturbed[size_t(c) * 64 + i] += rng.normal() * 50.0;
    Tape tape;
    Binder bind(tape, store, false);
    auto [out_a, m_next] = smc_block(bind, p, tape.constant({2, 8, 8}, base), m);
    auto [out_b, m_next2] = smc_block(bind, p, tape.constant({2, 8, 8}, perturbed), m);
    ASSERT_EQ(m_next.cells, m_next2.cells);
    int hw = m_next.h * m_next.w;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i)
            if (!m_next.cells[size_t(i)])
                EXPECT_NEAR(out_a.value()[size_t(c) * hw + i], out_b.value()[size_t(c) * hw + i],
                            1e-12);
}

TEST(Encode, GeometryLevels) {
    ParamStore store;
    Rng rng(8);
    auto p = EncoderParams::build(store, 4, 32, 8, 64, rng);
    Tape tape;
    Binder bind(tape, store, false);
    MaskGrid m(32, 32, 0);
    Tensor img = tape.constant({3, 32, 32}, std::vector<double>(3 * 32 * 32, 0.1));
    EncoderPyramid py = encode(bind, p, img, m);
    ASSERT_EQ(py.levels(), 5);
    std::vector<int> sizes;
    for (const Tensor& f : py.features) sizes.push_back(f.shape()[1]);
    EXPECT_EQ(sizes, (std::vector<int>{32, 32, 16, 8, 4}));
    EXPECT_EQ(py.bottleneck().shape(), (Shape{64, 4, 4}));
}

TEST(Encode, RejectsIllegalSize) {
    ParamStore store;
    Rng rng(9);
    EXPECT_THROW(EncoderParams::build(store, 4, 48, 8, 64, rng), ConfigError);
}

TEST(Encode, AllValidPropagatesToEveryLevel) {
    ParamStore store;
    Rng rng(10);
    auto p = EncoderParams::build(store, 3, 16, 4, 16, rng);
    Tape tape;
    Binder bind(tape, store, false);
    MaskGrid m(16, 16, 0);
    Tensor img = tape.constant({3, 16, 16}, randn(rng, 3 * 256));
    EncoderPyramid py = encode(bind, p, img, m);
    for (const MaskGrid& level : py.masks) EXPECT_EQ(level.count_invalid(), 0u);
}

TEST(Encode, DegenerateMasksEncodeAtEveryDepth) {
    for (int depth : {1, 2, 3}) {
        int S = 4 << (depth - 1);
        for (int fill : {0, 1}) {
            ParamStore store;
            Rng rng(11);
            auto p = EncoderParams::build(store, depth, S, 4, 16, rng);
            Tape tape;
            Binder bind(tape, store, false);
            MaskGrid m(S, S, uint8_t(fill));
            Tensor img = tape.constant({3, S, S}, randn(rng, size_t(3) * S * S));
            EXPECT_NO_THROW(encode(bind, p, img, m));
        }
    }
}

TEST(Encode, SingleValidPixelFootprintMatchesOracle) {
    ParamStore store;
    Rng rng(12);
    auto p = EncoderParams::build(store, 3, 16, 4, 16, rng);
    MaskGrid m(16, 16, 1);
    m.at(5, 9) = 0;
    Tape tape;
    Binder bind(tape, store, false);
    Tensor img = tape.constant({3, 16, 16}, randn(rng, 3 * 256));
    EncoderPyramid py = encode(bind, p, img, m);
    // level-by-level the mask must equal the oracle applied to the previous level
    std::vector<uint8_t> cur = m.cells;
    int h = 16, w = 16;
    for (int level = 1; level < py.levels(); ++level) {
        ConvGeometry g = level == 1 ? ConvGeometry{3, 1, 1} : ConvGeometry{4, 2, 1};
        int ho = 0, wo = 0;
        cur = oracles::mask_update(cur, h, w, g.k, g.stride, g.pad, &ho, &wo);
        h = ho;
        w = wo;
        EXPECT_EQ(py.masks[size_t(level)].cells, cur) << "level " << level;
    }
}

// mask monotonicity: a valid output cell implies a valid cell in its
// receptive field (checked exhaustively on small grids)
TEST(MaskUpdate, MonotonicityExhaustiveSmallGrids) {
    Rng rng(13);
    for (int trial = 0; trial < 2000; ++trial) {
        int h = 5 + int(rng.below(12));
        int w = 5 + int(rng.below(12));
        MaskGrid m = random_mask(rng, h, w);
        MaskGrid out = mask_update(m, 4, 2, 1);
        for (int oy = 0; oy < out.h; ++oy)
            for (int ox = 0; ox < out.w; ++ox) {
                if (out.at(oy, ox)) continue;
                bool found = false;
                for (int ky = 0; ky < 4 && !found; ++ky)
                    for (int kx = 0; kx < 4; ++kx) {
                        int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w && m.at(iy, ix) == 0) {
                            found = true;
                            break;
                        }
                    }
                EXPECT_TRUE(found);
            }
    }
}
