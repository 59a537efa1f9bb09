#include <gtest/gtest.h>

#include "daft/text.hpp"

using namespace daft;

TEST(Tokenize, MapsKnownWords) {
    Vocabulary v;
    auto toks = tokenize(v, "red circle");
    ASSERT_EQ(toks.size(), 2u);
    EXPECT_EQ(v.token(toks[0]), "red");
    EXPECT_EQ(v.token(toks[1]), "circle");
}

TEST(Tokenize, EmptyCaptionBecomesUnknown) {
    Vocabulary v;
    EXPECT_EQ(tokenize(v, ""), (std::vector<int32_t>{0}));
    EXPECT_EQ(tokenize(v, "   \t  "), (std::vector<int32_t>{0}));
}

TEST(Tokenize, TruncatesToEightTokens) {
    Vocabulary v;
    auto toks = tokenize(v, "red green blue yellow white black circle square triangle bar left right");
    ASSERT_EQ(toks.size(), 8u);
    EXPECT_EQ(v.token(toks[7]), "square");
}

TEST(Tokenize, UnknownsAbsorbedAndCaseFolded) {
    Vocabulary v;
    auto toks = tokenize(v, "LARGE Zebra Circle");
    ASSERT_EQ(toks.size(), 3u);
    EXPECT_EQ(v.token(toks[0]), "large");
    EXPECT_EQ(toks[1], 0);
    EXPECT_EQ(v.token(toks[2]), "circle");
}

TEST(Vocabulary, DenseIndicesUnknownAtZero) {
    Vocabulary v;
    EXPECT_EQ(v.lookup("<unk>"), 0);
    for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.lookup(v.token(i)), i);
}

TEST(EncodeText, SingleTokenSentenceEqualsWordRow) {
    ParamStore store;
    Vocabulary v;
    Rng rng(5);
    auto p = TextEncoderParams::build(store, v, 4, rng);
    Tape tape;
    Binder bind(tape, store, false);
    TextBundle b = encode_text(bind, p, {3});
    ASSERT_EQ(b.words.shape(), (Shape{1, 4}));
    EXPECT_EQ(b.sentence.value(), b.words.value());
}

TEST(EncodeText, TwoTokenSentenceIsMean) {
    ParamStore store;
    Vocabulary v;
    Rng rng(6);
    auto p = TextEncoderParams::build(store, v, 4, rng);
    Tape tape;
    Binder bind(tape, store, false);
    TextBundle b = encode_text(bind, p, {2, 9});
    const auto& w = b.words.value();
    for (int i = 0; i < 4; ++i)
        EXPECT_DOUBLE_EQ(b.sentence.value()[size_t(i)], (w[size_t(i)] + w[size_t(4 + i)]) / 2.0);
}

TEST(EncodeText, PermutationKeepsSentenceChangesWordOrder) {
    ParamStore store;
    Vocabulary v;
    Rng rng(7);
    auto p = TextEncoderParams::build(store, v, 6, rng);
    Tape tape;
    Binder bind(tape, store, false);
    TextBundle a = encode_text(bind, p, {1, 7, 12});
    TextBundle b = encode_text(bind, p, {12, 1, 7});
    EXPECT_EQ(a.sentence.value(), b.sentence.value());
    EXPECT_NE(a.words.value(), b.words.value());
}

TEST(EncodeText, DeterministicGivenTableAndTokens) {
    ParamStore store;
    Vocabulary v;
    Rng rng(8);
    auto p = TextEncoderParams::build(store, v, 4, rng);
    auto run = [&] {
        Tape tape;
        Binder bind(tape, store, false);
        return encode_text(bind, p, {2, 5, 11}).sentence.value();
    };
    EXPECT_EQ(run(), run());
}

// gradient of a scalar loss through the sentence embedding into the table
TEST(EncodeText, GradientFlowsIntoTable) {
    ParamStore store;
    Vocabulary v;
    Rng rng(9);
    auto p = TextEncoderParams::build(store, v, 3, rng);
    std::vector<int32_t> toks{4, 4, 8};  // repeated token accumulates

    auto loss_at = [&](const std::vector<double>& table_vals) {
        Param& tp = store.at(p.table);
        tp.value = table_vals;
        Tape tape;
        Binder bind(tape, store, true);
        TextBundle b = encode_text(bind, p, toks);
        return sum(mul(b.sentence, b.sentence));
    };

    std::vector<double> base = store.at(p.table).value;
    Tape tape;
    Binder bind(tape, store, true);
    TextBundle b = encode_text(bind, p, toks);
    Tensor loss = sum(mul(b.sentence, b.sentence));
    tape.backward(loss);
    store.zero_grad();
    bind.harvest();
    std::vector<double> analytic = store.at(p.table).grad;

    double h = 1e-5;
    for (size_t i = 0; i < base.size(); ++i) {
        auto vp = base, vm = base;
        vp[i] += h;
        vm[i] -= h;
        double fd = (loss_at(vp).item() - loss_at(vm).item()) / (2 * h);
        EXPECT_NEAR(analytic[i], fd, 1e-6 * std::max(1.0, std::fabs(fd)));
    }
    store.at(p.table).value = base;
}
