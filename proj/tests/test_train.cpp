#include <gtest/gtest.h>

#include "avd2/train.hpp"
#include "test_support.hpp"

using namespace avd2;
using avd2::testing::config_for;
using avd2::testing::params_equal;
using avd2::testing::synth_examples;

TEST(TeacherForced, ShiftsTargets) {
    const auto tf = teacher_forced({Vocab::kBos, 5, 6, Vocab::kEos});
    EXPECT_EQ(tf.prefix, (std::vector<TokenId>{Vocab::kBos, 5, 6}));
    EXPECT_EQ(tf.targets, (std::vector<TokenId>{5, 6, Vocab::kEos}));
    EXPECT_EQ(tf.mask, (std::vector<int>{1, 1, 1}));
}

TEST(MakeExample, TruncatesToMaxLen) {
    const Vocab v(Tokens{"a", "b"});
    const auto ex = make_example("x", Matrix(1, 16), Caption("a b a b a b", Role::Avoidance), v, 4);
    EXPECT_EQ(ex.ids.size(), 4u);
    EXPECT_EQ(ex.ids.front(), Vocab::kBos);
    EXPECT_EQ(ex.reference.size(), 6u);
}

TEST(TrainMle, MemorizesOneSample) {
    auto s = synth_examples(10);
    const std::vector<TrainingExample> one{s.train.front()};
    auto p = init_params(config_for(s.vocab, 3));
    const auto res = train_mle(p, one, MleConfig{50, 1, 5, AdamConfig{.lr = 2e-3}});
    ASSERT_EQ(res.epoch_loss.size(), 50u);
    EXPECT_LT(res.epoch_loss.back(), 0.1);
}

TEST(TrainMle, ZeroEpochsLeavesParams) {
    auto s = synth_examples(10);
    auto p = init_params(config_for(s.vocab, 3));
    const auto before = p;
    const auto res = train_mle(p, s.train, MleConfig{0, 4, 1, {}});
    EXPECT_TRUE(res.epoch_loss.empty());
    EXPECT_TRUE(params_equal(p, before));
}

TEST(TrainMle, SameSeedSameCurve) {
    auto s = synth_examples(40);
    auto a = init_params(config_for(s.vocab, 3));
    auto b = a;
    const MleConfig cfg{3, 8, 11, AdamConfig{.lr = 2e-3}};
    EXPECT_EQ(train_mle(a, s.train, cfg).epoch_loss, train_mle(b, s.train, cfg).epoch_loss);
    EXPECT_TRUE(params_equal(a, b));
}

TEST(TrainMle, LossStrictlyDecreasesOverFirstEpochs) {
    auto s = synth_examples(500);
    ModelConfig mc = config_for(s.vocab, derive_seed(1, "model"), 64);
    auto p = init_params(mc);
    const auto res = train_mle(p, s.train, MleConfig{3, 16, derive_seed(1, "mle"), AdamConfig{.lr = 2e-3}});
    ASSERT_EQ(res.epoch_loss.size(), 3u);
    EXPECT_LT(res.epoch_loss[1], res.epoch_loss[0]);
    EXPECT_LT(res.epoch_loss[2], res.epoch_loss[1]);
}

TEST(TrainMle, Errors) {
    auto s = synth_examples(10);
    auto p = init_params(config_for(s.vocab, 3));
    try {
        train_mle(p, {}, MleConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::EmptyDataset);
    }
    EXPECT_THROW(train_mle(p, s.train, MleConfig{1, 0, 0, {}}), Error);
}

TEST(TrainMle, NonFiniteLossIsNumericFailure) {
    auto s = synth_examples(10);
    auto p = init_params(config_for(s.vocab, 3));
    p[Tensor::TokEmb](Vocab::kBos, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train_mle(p, s.train, MleConfig{1, 4, 0, {}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::NumericFailure);
    }
}
