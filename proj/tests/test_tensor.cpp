#include <gtest/gtest.h>

#include "daft/tensor.hpp"
#include "oracles.hpp"

using namespace daft;

namespace {
std::vector<double> randn(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * scale;
    return v;
}
}  // namespace

TEST(Conv2d, OneByOneKernelIsScalarMultiply) {
    Tape t;
    auto x = t.leaf({1, 1, 1}, {1.0}, true);
    auto w = t.leaf({1, 1, 1, 1}, {2.0}, true);
    auto b = t.leaf({1}, {0.0}, true);
    auto y = conv2d(x, w, b, 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
}

TEST(Conv2d, SumOverWindow) {
    Tape t;
    auto x = t.constant({1, 4, 4}, std::vector<double>(16, 1.0));
    auto w = t.constant({1, 1, 2, 2}, std::vector<double>(4, 1.0));
    auto b = t.constant({1}, {0.0});
    auto y = conv2d(x, w, b, 2, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
    for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Conv2d, MatchesDirectLoopOracleWithGradients) {
    Rng rng(7);
    oracles::ConvSpec spec{2, 5, 5, 3, 3, 1, 1};
    auto xv = randn(rng, size_t(2 * 5 * 5));
    auto wv = randn(rng, size_t(3 * 2 * 3 * 3));
    auto bv = randn(rng, 3);

    Tape t;
    auto x = t.leaf({2, 5, 5}, xv, true);
    auto w = t.leaf({3, 2, 3, 3}, wv, true);
    auto b = t.leaf({3}, bv, true);
    auto y = conv2d(x, w, b, 1, 1);
    auto proj = randn(rng, y.value().size());
    auto loss = sum(mul(y, t.constant(y.shape(), proj)));
    t.backward(loss);

    auto want = oracles::conv2d(spec, xv, wv, bv);
    ASSERT_EQ(want.size(), y.value().size());
    for (size_t i = 0; i < want.size(); ++i)
        EXPECT_NEAR(y.value()[i], want[i], 1e-10 * std::max(1.0, std::fabs(want[i])));

    auto grads = oracles::conv2d_grads(spec, xv, wv, proj);
    for (size_t i = 0; i < grads.dx.size(); ++i)
        EXPECT_NEAR(x.grad()[i], grads.dx[i], 1e-10 * std::max(1.0, std::fabs(grads.dx[i])));
    for (size_t i = 0; i < grads.dw.size(); ++i)
        EXPECT_NEAR(w.grad()[i], grads.dw[i], 1e-10 * std::max(1.0, std::fabs(grads.dw[i])));
    for (size_t i = 0; i < grads.db.size(); ++i)
        EXPECT_NEAR(b.grad()[i], grads.db[i], 1e-10 * std::max(1.0, std::fabs(grads.db[i])));
}

TEST(Conv2d, RejectsChannelMismatch) {
    Tape t;
    auto x = t.leaf({2, 4, 4}, false);
    auto w = t.leaf({1, 3, 3, 3}, false);
    auto b = t.leaf({1}, false);
    EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(Conv2d, RejectsWindowLargerThanPaddedInput) {
    Tape t;
    auto x = t.leaf({1, 2, 2}, false);
    auto w = t.leaf({1, 1, 5, 5}, false);
    auto b = t.leaf({1}, false);
    EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(MaxPool, BasicWindow) {
    Tape t;
    auto x = t.constant({1, 2, 2}, {1, 2, 3, 4});
    auto y = max_pool2d(x, 2, 2, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
}

TEST(MaxPool, TieRoutesGradientToFirstElement) {
    Tape t;
    auto x = t.leaf({1, 2, 2}, {5, 5, 5, 5}, true);
    auto y = max_pool2d(x, 2, 2, 0);
    EXPECT_DOUBLE_EQ(y.value()[0], 5.0);
    t.backward(sum(y));
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, MatchesSlidingWindowOracle) {
    Rng rng(11);
    auto xv = randn(rng, 36);
    Tape t;
    auto x = t.constant({1, 6, 6}, xv);
    auto y = max_pool2d(x, 3, 2, 1);
    auto want = oracles::max_pool(xv, 1, 6, 6, 3, 2, 1);
    ASSERT_EQ(want.size(), y.value().size());
    for (size_t i = 0; i < want.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], want[i]);
}

TEST(MaxPool, RejectsBadParameters) {
    Tape t;
    auto x = t.leaf({1, 4, 4}, false);
    EXPECT_THROW(max_pool2d(x, 0, 2, 0), ContractError);
    EXPECT_THROW(max_pool2d(x, 2, 0, 0), ContractError);
}

TEST(Linear, IdentityWeightKeepsInput) {
    Tape t;
    auto x = t.leaf({2, 3}, {1, 2, 3, 4, 5, 6}, false);
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    auto w = t.constant({3, 3}, eye);
    auto b = t.constant({3}, {0, 0, 0});
    auto y = linear(x, w, b);
    EXPECT_EQ(y.value(), x.value());
}

TEST(Linear, ZeroWeightGivesBiasRows) {
    Tape t;
    auto x = t.leaf({2, 3}, {1, 2, 3, 4, 5, 6}, false);
    auto w = t.constant({2, 3}, std::vector<double>(6, 0.0));
    auto b = t.constant({2}, {7.0, -1.0});
    auto y = linear(x, w, b);
    EXPECT_EQ(y.value(), (std::vector<double>{7, -1, 7, -1}));
}

TEST(Linear, MatchesTripleLoopOracle) {
    Rng rng(13);
    auto xv = randn(rng, 12);
    auto wv = randn(rng, 20);
    auto bv = randn(rng, 5);
    Tape t;
    auto y = linear(t.constant({3, 4}, xv), t.constant({5, 4}, wv), t.constant({5}, bv));
    auto want = oracles::linear(xv, 3, 4, wv, 5, bv);
    for (size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.value()[i], want[i], 1e-12);
}

TEST(Linear, RejectsTrailingDimensionMismatch) {
    Tape t;
    auto x = t.leaf({2, 3}, false);
    auto w = t.leaf({5, 4}, false);
    auto b = t.leaf({5}, false);
    EXPECT_THROW(linear(x, w, b), ShapeError);
}

TEST(Softmax, UniformLogits) {
    Tape t;
    auto y = softmax(t.constant({4}, {2.5, 2.5, 2.5, 2.5}), 0);
    for (double v : y.value()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, ClosedFormQuarterThreeQuarters) {
    Tape t;
    auto y = softmax(t.constant({2}, {0.0, std::log(3.0)}), 0);
    EXPECT_NEAR(y.value()[0], 0.25, 1e-12);
    EXPECT_NEAR(y.value()[1], 0.75, 1e-12);
}

TEST(Softmax, MatchesExtendedPrecisionOracleAndSumsToOne) {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        double scale = trial % 2 ? 1e3 : 1.0;
        auto xv = randn(rng, 9, scale);
        Tape t;
        auto y = softmax(t.constant({9}, xv), 0);
        auto want = oracles::softmax(xv);
        double s = 0.0;
        for (size_t i = 0; i < want.size(); ++i) {
            EXPECT_NEAR(y.value()[i], want[i], 1e-12);
            s += y.value()[i];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Elementwise, ReluAndNormAndPowerClosedForms) {
    Tape t;
    auto r = relu(t.constant({2}, {-2.0, 3.0}));
    EXPECT_DOUBLE_EQ(r.value()[0], 0.0);
    EXPECT_DOUBLE_EQ(r.value()[1], 3.0);

    auto n = square_norm(t.constant({2}, {3.0, 4.0}));
    EXPECT_DOUBLE_EQ(n.item(), 25.0);

    auto x = t.leaf({1}, {1.5}, true);
    t.backward(sum(power(x, 6.0)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 45.5625);  // 6 * 1.5^5
}

TEST(Elementwise, ScalarBroadcastShapes) {
    Tape t;
    auto x = t.constant({2, 2}, {1, 2, 3, 4});
    auto c = t.scalar(10.0);
    EXPECT_EQ(add(x, c).value(), (std::vector<double>{11, 12, 13, 14}));
    EXPECT_EQ(mul(c, x).value(), (std::vector<double>{10, 20, 30, 40}));
    auto bad = t.constant({3}, {1, 2, 3});
    EXPECT_THROW(add(x, bad), ShapeError);
}

TEST(Upsample, BlocksAndBackward) {
    Tape t;
    auto x = t.leaf({1, 2, 2}, {1, 2, 3, 4}, true);
    auto y = upsample_nearest2x(x);
    ASSERT_EQ(y.shape(), (Shape{1, 4, 4}));
    std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    EXPECT_EQ(y.value(), want);
    t.backward(sum(y));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 4.0);  // each pixel covers a 2x2 block
}

TEST(Upsample, RandomIndexMapOracle) {
    Rng rng(23);
    auto xv = randn(rng, 9);
    Tape t;
    auto y = upsample_nearest2x(t.constant({1, 3, 3}, xv));
    for (int yy = 0; yy < 6; ++yy)
        for (int xx = 0; xx < 6; ++xx)
            EXPECT_DOUBLE_EQ(y.value()[size_t(yy) * 6 + xx], xv[size_t(yy / 2) * 3 + xx / 2]);
}

TEST(Concat, BasicsAndRoundTrip) {
    Tape t;
    auto a = t.constant({1}, {1.0});
    auto b = t.constant({1}, {2.0});
    EXPECT_EQ(concat({a}, 0).value(), a.value());
    EXPECT_EQ(concat({a, b}, 0).value(), (std::vector<double>{1.0, 2.0}));

    Rng rng(29);
    auto xv = randn(rng, 24);
    auto x = t.constant({2, 3, 4}, xv);
    auto p1 = slice_axis(x, 1, 0, 1);
    auto p2 = slice_axis(x, 1, 1, 2);
    auto joined = concat({p1, p2}, 1);
    EXPECT_EQ(joined.value(), xv);  // bit-exact round trip

    auto bad = t.constant({2, 2, 4}, std::vector<double>(16, 0.0));
    EXPECT_THROW(concat({x, bad}, 2), ShapeError);
}

TEST(Backward, SumGivesOnes) {
    Tape t;
    auto x = t.leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    t.backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    t.backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, TwiceWithoutResetIsAnError) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto loss = sum(x);
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), ContractError);
    t.zero_grad();
    t.backward(loss);  // fine after reset
}

TEST(Backward, NonScalarLossRejected) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, PopulatesEveryRequiresGradTensor) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto unused = t.leaf({3}, {1, 1, 1}, true);
    t.backward(sum(x));
    EXPECT_EQ(unused.grad(), (std::vector<double>{0, 0, 0}));
}

TEST(GradOfGrad, SquareNormClosedForm) {
    // scalar = sum(x^2); penalty = ||grad_x||^2 = 4 x^2 -> at [1,2]: 20
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto s = sum(mul(x, x));
    auto g = t.grad(s, x);
    EXPECT_DOUBLE_EQ(g.value()[0], 2.0);
    EXPECT_DOUBLE_EQ(g.value()[1], 4.0);
    auto penalty = square_norm(g);
    EXPECT_DOUBLE_EQ(penalty.item(), 20.0);
    t.backward(penalty);
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);  // d(4x^2)/dx = 8x
    EXPECT_DOUBLE_EQ(x.grad()[1], 16.0);
}

TEST(GradOfGrad, LinearScoreHasConstantGradient) {
    // D(x) = a . x : grad_x D = a independent of x; outer gradient w.r.t. x is 0
    Tape t;
    auto x = t.leaf({3}, {0.5, -1.0, 2.0}, true);
    auto a = t.constant({3}, {1.0, 2.0, 3.0});
    auto d = sum(mul(a, x));
    auto g = t.grad(d, x);
    EXPECT_EQ(g.value(), (std::vector<double>{1.0, 2.0, 3.0}));
    auto norm2 = square_norm(g);
    EXPECT_DOUBLE_EQ(norm2.item(), 14.0);
    t.backward(norm2);
    for (double gv : x.grad()) EXPECT_DOUBLE_EQ(gv, 0.0);
}

TEST(GradOfGrad, UnsupportedOpNamesTheOp) {
    Tape t;
    auto x = t.leaf({2}, {0.3, 0.4}, true);
    auto s = sum(tanh(x));
    try {
        t.grad(s, x);
        FAIL() << "expected UnsupportedOpError";
    } catch (const UnsupportedOpError& e) {
        EXPECT_NE(std::string(e.what()).find("tanh"), std::string::npos);
    }
}

TEST(GradOfGrad, RequiresScalar) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto y = mul(x, x);
    EXPECT_THROW(t.grad(y, x), ContractError);
}

TEST(GradOfGrad, DisconnectedTargetGivesZeros) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto y = t.leaf({2}, {3.0, 4.0}, true);
    auto s = sum(mul(x, x));
    auto g = t.grad(s, y);
    EXPECT_EQ(g.value(), (std::vector<double>{0.0, 0.0}));
}

TEST(Tape, DeterministicForwardAndGradients) {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tape t;
        auto x = t.leaf({2, 4, 4}, randn(rng, 32), true);
        auto w = t.leaf({3, 2, 3, 3}, randn(rng, 54), true);
        auto b = t.leaf({3}, randn(rng, 3), true);
        auto y = leaky_relu(conv2d(x, w, b, 1, 1));
        auto loss = sum(mul(y, y));
        t.backward(loss);
        std::vector<double> out = {loss.item()};
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    EXPECT_EQ(run(99), run(99));  // bit-identical
}

TEST(Tape, DumpHasOneRecordPerNode) {
    Tape t;
    auto x = t.leaf({2}, {1.0, 2.0}, true);
    auto y = sum(mul(x, x));
    (void)y;
    std::ostringstream os;
    t.dump(os);
    std::string text = os.str();
    EXPECT_NE(text.find("leaf"), std::string::npos);
    EXPECT_NE(text.find("mul"), std::string::npos);
    EXPECT_NE(text.find("sum"), std::string::npos);
    int lines = 0;
    for (char c : text)
        if (c == '\n') ++lines;
    EXPECT_EQ(lines, t.size());
}
