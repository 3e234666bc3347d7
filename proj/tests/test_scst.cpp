#include <cmath>

#include <gtest/gtest.h>

#include "avd2/decode.hpp"
#include "avd2/scst.hpp"
#include "test_support.hpp"

using namespace avd2;
using avd2::testing::config_for;
using avd2::testing::params_equal;
using avd2::testing::synth_examples;

namespace {

// All-zero parameters except the listed first-column token embeddings and a
// unit output bias: the first-step logits are exactly those embedding values.
ModelParams hand_built(std::initializer_list<std::pair<TokenId, double>> first_logits) {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.vocab_size = 10;
    c.max_len = 6;
    c.feature_dim = 3;
    auto p = ModelParams::zeros(c);
    p[Tensor::Ff2b](0, 0) = 1.0;
    for (auto [id, v] : first_logits) p[Tensor::TokEmb](static_cast<std::size_t>(id), 0) = v;
    return p;
}

Matrix random_features(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = rng.normal();
    return m;
}

DecodeOutput seq(std::vector<TokenId> ids) {
    DecodeOutput d;
    d.ids = std::move(ids);
    d.logp.assign(d.ids.size(), -0.5);
    d.logp[0] = 0.0;
    d.mask.assign(d.ids.size(), 1);
    return d;
}

} // namespace

TEST(DecodeGreedy, ForcedStop) {
    const auto p = hand_built({{Vocab::kEos, 10.0}});
    const auto out = decode_greedy(p, Matrix(2, 3), 6);
    EXPECT_EQ(out.ids, (std::vector<TokenId>{Vocab::kBos, Vocab::kEos}));
    EXPECT_EQ(out.mask, (std::vector<int>{1, 1}));
    EXPECT_LE(out.logp[1], 0.0);
}

TEST(DecodeGreedy, TieGoesToLowestId) {
    const auto p = hand_built({{5, 10.0}, {7, 10.0}});
    EXPECT_EQ(decode_greedy(p, Matrix(1, 3), 6).ids.at(1), 5);
    const std::vector<double> row{0.0, 3.0, 1.0, 3.0};
    EXPECT_EQ(argmax_lowest(row), 1u);
}

TEST(DecodeGreedy, DeterministicAndWellFormed) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 10;
    c.seed = 4;
    const auto p = init_params(c);
    const auto f = random_features(1, 5, 16);
    const auto a = decode_greedy(p, f, 10);
    EXPECT_EQ(a, decode_greedy(p, f, 10));
    EXPECT_EQ(a.ids.size(), a.logp.size());
    EXPECT_EQ(a.ids.size(), a.mask.size());
    EXPECT_LE(a.ids.size(), 10u);
    EXPECT_EQ(a.ids.front(), Vocab::kBos);
    for (double lp : a.logp) EXPECT_LE(lp, 0.0);
    EXPECT_EQ(decode_greedy(p, f, 3).ids.size(), 3u);
}

TEST(DecodeGreedy, LogpMatchesFullForward) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 10;
    c.seed = 5;
    const auto p = init_params(c);
    const auto f = random_features(2, 4, 16);
    const auto out = decode_greedy(p, f, 10);
    const std::vector<TokenId> prefix(out.ids.begin(), out.ids.end() - 1);
    const auto logits = forward_logits(p, f, prefix);
    for (std::size_t t = 0; t < prefix.size(); ++t) {
        const auto lp = log_softmax(logits.row(t));
        EXPECT_NEAR(lp[static_cast<std::size_t>(out.ids[t + 1])], out.logp[t + 1], 1e-12);
    }
}

TEST(IncrementalDecoder, MatchesFullForward) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 8;
    c.seed = 6;
    const auto p = init_params(c);
    const auto f = random_features(3, 6, 16);
    const std::vector<TokenId> prefix{Vocab::kBos, 5, 9, 4, 11, 7, 6, 8};
    const auto full = forward_logits(p, f, prefix);
    IncrementalDecoder dec(p, f);
    for (std::size_t t = 0; t < prefix.size(); ++t) {
        const auto row = dec.step(prefix[t]);
        for (std::size_t j = 0; j < row.size(); ++j) EXPECT_NEAR(row[j], full(t, j), 1e-10);
    }
    EXPECT_THROW(dec.step(5), Error);
}

TEST(DecodeSample, DeterministicGivenSeed) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 10;
    c.seed = 7;
    const auto p = init_params(c);
    const auto f = random_features(4, 4, 16);
    EXPECT_EQ(decode_sample(p, f, 10, 123), decode_sample(p, f, 10, 123));
    bool any_differs = false;
    for (std::uint64_t s = 0; s < 20 && !any_differs; ++s)
        any_differs = !(decode_sample(p, f, 10, s) == decode_sample(p, f, 10, 123));
    EXPECT_TRUE(any_differs);
}

TEST(DecodeSample, LowTemperatureEqualsGreedy) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ModelConfig c;
        c.vocab_size = 12;
        c.max_len = 10;
        c.seed = seed;
        const auto p = init_params(c);
        const auto f = random_features(seed + 10, 4, 16);
        const auto g = decode_greedy(p, f, 10);
        const auto s = decode_sample(p, f, 10, 99, 1e-6);
        EXPECT_EQ(s.ids, g.ids);
        for (std::size_t i = 0; i < g.logp.size(); ++i) EXPECT_NEAR(s.logp[i], g.logp[i], 1e-12);
    }
}

TEST(DecodeSample, FairCoinFrequency) {
    const auto p = hand_built({{5, 50.0}, {6, 50.0}});
    const Matrix f(1, 3);
    int fives = 0;
    const int draws = 10000;
    for (int s = 0; s < draws; ++s) {
        const auto out = decode_sample(p, f, 2, static_cast<std::uint64_t>(s));
        ASSERT_TRUE(out.ids[1] == 5 || out.ids[1] == 6);
        fives += out.ids[1] == 5;
        EXPECT_NEAR(out.logp[1], std::log(0.5), 1e-12);
    }
    const double freq = static_cast<double>(fives) / draws;
    EXPECT_GE(freq, 0.48);
    EXPECT_LE(freq, 0.52);
}

TEST(DecodeSample, LogpUsesUnitTemperature) {
    const auto p = hand_built({{5, 1.0}, {6, 0.0}});
    const auto out = decode_sample(p, Matrix(1, 3), 2, 3, 0.25);
    std::vector<double> logits(10, 0.0);
    logits[5] = 1.0;
    EXPECT_NEAR(out.logp[1], log_softmax(logits)[static_cast<std::size_t>(out.ids[1])], 1e-12);
}

TEST(DecodeSample, RejectsBadTemperature) {
    const auto p = hand_built({});
    for (double t : {0.0, -1.0, std::nan("")}) {
        try {
            decode_sample(p, Matrix(1, 3), 4, 1, t);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::InvalidTemperature);
        }
    }
}

TEST(SampleCategorical, InverseCdf) {
    const std::vector<double> probs{0.0, 0.25, 0.0, 0.75};
    EXPECT_EQ(sample_categorical(probs, 0.0), 1u);
    EXPECT_EQ(sample_categorical(probs, 0.2499), 1u);
    EXPECT_EQ(sample_categorical(probs, 0.25), 3u);
    EXPECT_EQ(sample_categorical(probs, 0.999999999), 3u);
}

TEST(DecodeOutput, ContentAndPadding) {
    const auto d = seq({Vocab::kBos, 5, 6, Vocab::kEos});
    EXPECT_EQ(d.content(), (std::vector<TokenId>{5, 6}));
    const auto p = d.padded(6);
    EXPECT_EQ(p.ids, (std::vector<TokenId>{Vocab::kBos, 5, 6, Vocab::kEos, Vocab::kPad, Vocab::kPad}));
    EXPECT_EQ(p.mask, (std::vector<int>{1, 1, 1, 1, 0, 0}));
    EXPECT_EQ(p.content(), d.content());
}

// ---------------------------------------------------------------------------

class Rewards : public ::testing::Test {
  protected:
    Vocab vocab{Tokens{"the", "car", "brakes", "bus", "turns", "left"}};
    metrics::IdfTable idf{{normalize("the car brakes"), normalize("the bus turns left"), normalize("a truck stops")}};
    Tokens ref = normalize("the car brakes");

    DecodeOutput words(const std::string& text) {
        std::vector<TokenId> ids{Vocab::kBos};
        for (const auto& t : normalize(text)) ids.push_back(vocab.id(t));
        ids.push_back(Vocab::kEos);
        return seq(ids);
    }
};

TEST_F(Rewards, IdenticalSampleGivesZero) {
    const auto g = words("the car brakes");
    const auto r = scst::compute_rewards(g, g, ref, idf, vocab);
    for (double v : r.r) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(r.r.size(), g.size());
}

TEST_F(Rewards, BroadcastOverMaskedPositions) {
    const auto sample = words("the car brakes").padded(7);
    const auto greedy = words("the bus turns left");
    const auto r = scst::compute_rewards(sample, greedy, ref, idf, vocab);
    const double diff = r.sample_score - r.baseline_score;
    EXPECT_GT(diff, 0.0);
    EXPECT_NEAR(r.sample_score, metrics::cider_d(ref, ref, idf), 1e-12);
    EXPECT_NEAR(r.baseline_score, metrics::cider_d(normalize("the bus turns left"), ref, idf), 1e-12);
    ASSERT_EQ(r.r.size(), 7u);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(r.r[i], sample.mask[i] ? diff : 0.0);
}

TEST_F(Rewards, WorseSampleIsUniformlyNegative) {
    const auto r = scst::compute_rewards(words("bus left"), words("the car brakes"), ref, idf, vocab);
    for (double v : r.r) EXPECT_LT(v, 0.0);
}

// ---------------------------------------------------------------------------

TEST(ScstLoss, UnitValue) {
    const auto l = scst::scst_loss({-1, -2, -3}, {0.5, 0.5, 0.5}, {1, 1, 0});
    EXPECT_EQ(l.loss, 0.75);
    EXPECT_EQ(l.tokens, 2);
    EXPECT_EQ(l.dlogp, (std::vector<double>{-0.25, -0.25, 0.0}));
}

TEST(ScstLoss, ZeroRewardAndAllMasked) {
    const auto l = scst::scst_loss({-1, -2}, {0, 0}, {1, 1});
    EXPECT_EQ(l.loss, 0.0);
    for (double g : l.dlogp) EXPECT_EQ(g, 0.0);
    try {
        scst::scst_loss({-1, -2, -3}, {1, 1, 1}, {0, 0, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::AllMasked);
    }
    EXPECT_THROW(scst::scst_loss({-1}, {1, 1}, {1, 1}), Error);
}

TEST(ScstLoss, GradientMatchesFiniteDifferences) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<double> logp(n), r(n);
        std::vector<int> m(n);
        for (std::size_t i = 0; i < n; ++i) {
            logp[i] = -3.0 * rng.uniform();
            r[i] = rng.normal();
            m[i] = rng.uniform() < 0.7;
        }
        m[0] = 1;
        const auto l = scst::scst_loss(logp, r, m);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(l.dlogp[i], m[i] ? -r[i] / l.tokens : 0.0);
            auto up = logp, down = logp;
            up[i] += 1e-3;
            down[i] -= 1e-3;
            const double fd = (scst::scst_loss(up, r, m).loss - scst::scst_loss(down, r, m).loss) / 2e-3;
            EXPECT_NEAR(fd, l.dlogp[i], 1e-10);
        }
    }
}

TEST(ScstLoss, LinearInReward) {
    const std::vector<double> logp{-0.3, -1.7, -0.9, -2.2};
    const std::vector<double> r{0.4, 0.4, 0.4, 0.0};
    const std::vector<int> m{1, 1, 1, 0};
    const double base = scst::scst_loss(logp, r, m).loss;
    for (double c : {-1.0, 2.0, 0.5}) {
        std::vector<double> rc = r;
        for (auto& v : rc) v *= c;
        EXPECT_NEAR(scst::scst_loss(logp, rc, m).loss, c * base, 1e-15);
    }
}

TEST(LogpGradToLogits, MatchesFiniteDifferences) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 8;
    c.seed = 9;
    const auto p = init_params(c);
    const auto f = random_features(5, 3, 16);
    const auto s = decode_sample(p, f, 8, 4);
    ASSERT_GE(s.size(), 2u);
    const std::vector<double> r(s.size(), 0.7);
    const auto lg = scst::scst_loss(s.logp, r, s.mask);
    const std::vector<TokenId> prefix(s.ids.begin(), s.ids.end() - 1);
    Matrix logits = forward_logits(p, f, prefix);
    const auto d = scst::logp_grad_to_logits(logits, s, lg.dlogp);

    auto loss_of = [&](const Matrix& lgt) {
        std::vector<double> lp(s.size(), 0.0);
        for (std::size_t t = 0; t < lgt.rows(); ++t)
            lp[t + 1] = log_softmax(lgt.row(t))[static_cast<std::size_t>(s.ids[t + 1])];
        return scst::scst_loss(lp, r, s.mask).loss;
    };
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double saved = logits.data()[k];
        logits.data()[k] = saved + 1e-6;
        const double up = loss_of(logits);
        logits.data()[k] = saved - 1e-6;
        const double down = loss_of(logits);
        logits.data()[k] = saved;
        EXPECT_NEAR((up - down) / 2e-6, d.data()[k], 1e-8);
    }
}

// ---------------------------------------------------------------------------

TEST(RolloutSeed, DependsOnIdAndEpochOnly) {
    EXPECT_EQ(scst::rollout_seed(1, "clip_0001", 2), scst::rollout_seed(1, "clip_0001", 2));
    EXPECT_NE(scst::rollout_seed(1, "clip_0001", 2), scst::rollout_seed(1, "clip_0002", 2));
    EXPECT_NE(scst::rollout_seed(1, "clip_0001", 2), scst::rollout_seed(1, "clip_0001", 3));
    EXPECT_NE(scst::rollout_seed(1, "clip_0001", 2), scst::rollout_seed(2, "clip_0001", 2));
}

class ScstTrain : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        data_ = new avd2::testing::SynthExamples(synth_examples(60));
        std::vector<Tokens> refs;
        for (const auto& ex : data_->train) refs.push_back(ex.reference);
        idf_ = new metrics::IdfTable(refs);
        base_ = new ModelParams(init_params(config_for(data_->vocab, 2)));
        train_mle(*base_, data_->train, MleConfig{4, 8, 3, AdamConfig{.lr = 2e-3}});
    }
    static void TearDownTestSuite() {
        delete data_;
        delete idf_;
        delete base_;
    }

    static avd2::testing::SynthExamples* data_;
    static metrics::IdfTable* idf_;
    static ModelParams* base_;
};

avd2::testing::SynthExamples* ScstTrain::data_ = nullptr;
metrics::IdfTable* ScstTrain::idf_ = nullptr;
ModelParams* ScstTrain::base_ = nullptr;

TEST_F(ScstTrain, ZeroEpochsLeavesParams) {
    auto p = *base_;
    scst::ScstConfig cfg;
    cfg.epochs = 0;
    const auto res = scst::scst_train(p, data_->train, *idf_, data_->vocab, cfg);
    EXPECT_TRUE(res.epochs.empty());
    EXPECT_TRUE(params_equal(p, *base_));
}

TEST_F(ScstTrain, DeterministicStats) {
    scst::ScstConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 17;
    cfg.adam.lr = 1e-3;
    auto a = *base_, b = *base_;
    const auto ra = scst::scst_train(a, data_->train, *idf_, data_->vocab, cfg);
    const auto rb = scst::scst_train(b, data_->train, *idf_, data_->vocab, cfg);
    EXPECT_EQ(ra.epochs, rb.epochs);
    EXPECT_TRUE(params_equal(a, b));
    EXPECT_FALSE(params_equal(a, *base_));
    for (const auto& st : ra.epochs) {
        EXPECT_NEAR(st.mean_reward, st.mean_sample - st.mean_baseline, 1e-9);
        EXPECT_EQ(st.sequences, static_cast<long>(data_->train.size()));
    }
}

TEST_F(ScstTrain, EmptyDatasetRejected) {
    auto p = *base_;
    try {
        scst::scst_train(p, {}, *idf_, data_->vocab, scst::ScstConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::EmptyDataset);
    }
}

TEST_F(ScstTrain, MemorizedSampleIsNotDegraded) {
    const std::vector<TrainingExample> one{data_->train.front()};
    auto p = init_params(config_for(data_->vocab, 8));
    train_mle(p, one, MleConfig{60, 1, 1, AdamConfig{.lr = 2e-3}});
    const auto greedy = decode_greedy(p, one[0].features, 24);
    ASSERT_EQ(decode(data_->vocab, greedy.content()), one[0].reference);

    scst::ScstConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 1;
    cfg.seed = 4;
    const auto res = scst::scst_train(p, one, *idf_, data_->vocab, cfg);
    ASSERT_EQ(res.epochs.size(), 5u);
    for (const auto& st : res.epochs) EXPECT_LE(st.mean_reward, 0.0);
    EXPECT_GE(res.epochs.back().mean_baseline, res.epochs.front().mean_baseline - 0.05);
}

TEST_F(ScstTrain, StepMovesSampleLogpWithRewardSign) {
    auto seq_logp = [](const ModelParams& p, const TrainingExample& ex, const DecodeOutput& s) {
        const std::vector<TokenId> prefix(s.ids.begin(), s.ids.end() - 1);
        const auto logits = forward_logits(p, ex.features, prefix);
        double total = 0.0;
        for (std::size_t t = 0; t < prefix.size(); ++t)
            total += log_softmax(logits.row(t))[static_cast<std::size_t>(s.ids[t + 1])];
        return total;
    };
    scst::ScstConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.seed = 5;
    cfg.adam.lr = 1e-4;
    int checked = 0;
    for (const auto& ex : data_->train) {
        const auto greedy = decode_greedy(*base_, ex.features, cfg.max_len);
        const auto sample = decode_sample(*base_, ex.features, cfg.max_len, scst::rollout_seed(cfg.seed, ex.id, 0));
        const auto rw = scst::compute_rewards(sample, greedy, ex.reference, *idf_, data_->vocab);
        const double r = rw.sample_score - rw.baseline_score;
        if (r == 0.0) continue;
        auto p = *base_;
        scst::scst_train(p, {ex}, *idf_, data_->vocab, cfg);
        const double delta = seq_logp(p, ex, sample) - seq_logp(*base_, ex, sample);
        EXPECT_GT(delta * r, 0.0) << ex.id;
        if (++checked == 8) break;
    }
    EXPECT_EQ(checked, 8);
}
