#include <cmath>
#include <filesystem>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "avd2/data.hpp"
#include "avd2/metrics.hpp"
#include "avd2/rng.hpp"

using namespace avd2;
using namespace avd2::metrics;

namespace {

Tokens T(std::initializer_list<const char*> words) { return Tokens(words.begin(), words.end()); }

GaussianStats stats(std::vector<double> mean, const Matrix& cov) {
    GaussianStats s;
    s.mean = std::move(mean);
    s.cov = cov;
    s.n = 2;
    return s;
}

Matrix diag(std::initializer_list<double> d) {
    Matrix m(d.size(), d.size());
    std::size_t i = 0;
    for (double v : d) m(i, i) = v, ++i;
    return m;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& v : m.data()) v = rng.normal();
    return m;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
    return e;
}

} // namespace

TEST(Bleu, Examples) {
    EXPECT_DOUBLE_EQ(bleu_corpus({T({"a", "car", "stops"})}, {T({"a", "car", "stops"})}, 1), 1.0);
    EXPECT_NEAR(bleu_corpus({T({"the", "the", "the"})}, {T({"the", "cat"})}, 1), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(bleu_corpus({Tokens{}}, {T({"a"})}, 1), 0.0);
}

TEST(Bleu, Errors) {
    EXPECT_THROW(bleu_corpus({T({"a"})}, {}, 1), Error);
    try {
        bleu_corpus({T({"a"}), T({"b"})}, {T({"a"})}, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::LengthMismatch);
    }
}

TEST(Bleu, BrevityPenalty) {
    const double got = bleu_corpus({T({"a", "b"})}, {T({"a", "b", "c", "d"})}, 1);
    EXPECT_NEAR(got, std::exp(1.0 - 2.0), 1e-12);
}

TEST(Bleu, ClippingBound) {
    for (int k = 1; k <= 8; ++k) {
        for (int ref_count = 1; ref_count <= 3; ++ref_count) {
            Tokens hyp(static_cast<std::size_t>(k), "car");
            Tokens ref(static_cast<std::size_t>(ref_count), "car");
            ref.push_back("stops");
            const double p1 = bleu_corpus({hyp}, {ref}, 1);
            const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref.size()) / k));
            EXPECT_LE(p1 / bp, static_cast<double>(ref_count) / k + 1e-12);
        }
    }
}

TEST(Bleu, IdentityAllOrders) {
    const std::vector<Tokens> s{T({"the", "car", "brakes", "hard"}), T({"a", "bus", "turns", "left", "now"})};
    for (int n = 1; n <= 4; ++n) EXPECT_NEAR(bleu_corpus(s, s, n), 1.0, 1e-12);
}

TEST(RougeL, Examples) {
    EXPECT_DOUBLE_EQ(rouge_l(T({"a", "b"}), T({"a", "b"})), 1.0);
    for (double beta : {0.5, 1.0, 1.2, 3.0})
        EXPECT_NEAR(rouge_l(T({"a", "b", "c", "d"}), T({"a", "c", "d", "e"}), beta), 0.75, 1e-12);
    EXPECT_EQ(rouge_l(T({"x"}), T({"y"})), 0.0);
    EXPECT_EQ(rouge_l({}, T({"y"})), 0.0);
}

TEST(Meteor, Examples) {
    EXPECT_NEAR(meteor_lite(T({"a", "b", "c"}), T({"a", "b", "c"})), 1.0 - 0.5 / 27.0, 1e-12);
    EXPECT_EQ(meteor_lite(T({"x"}), T({"y"})), 0.0);
    EXPECT_NEAR(meteor_lite(T({"b", "a"}), T({"a", "b"})), 0.5, 1e-12);
}

TEST(Meteor, AlignmentPrefersFewerChunks) {
    const auto al = align_exact(T({"the", "car", "the", "bus"}), T({"the", "bus"}));
    EXPECT_EQ(al.matches, 2);
    EXPECT_EQ(al.chunks, 1);
}

TEST(Idf, Examples) {
    const IdfTable idf({T({"a", "b"}), T({"a", "c"})});
    EXPECT_EQ(idf.doc_count(), 2);
    EXPECT_EQ(idf.df(T({"a"})), 2);
    EXPECT_EQ(idf.df(T({"b"})), 1);
    EXPECT_EQ(idf.df(T({"a", "b"})), 1);
    EXPECT_EQ(idf.df(T({"zzz"})), 0);
    EXPECT_EQ(idf.weight(T({"zzz"})), 0.0);

    const IdfTable single({T({"a", "b", "a"})});
    EXPECT_EQ(single.df(T({"a"})), 1);
    EXPECT_EQ(single.df(T({"a", "b"})), 1);

    EXPECT_THROW(build_idf({}), Error);
}

TEST(CiderD, Examples) {
    const IdfTable idf({T({"a", "b", "c", "d", "e"}), T({"x", "y", "z", "w", "v"})});
    EXPECT_EQ(cider_d(T({"a", "b"}), T({"x", "y"}), idf), 0.0);
    EXPECT_NEAR(cider_d(T({"a", "b", "c", "d", "e"}), T({"a", "b", "c", "d", "e"}), idf), 10.0, 1e-12);
    EXPECT_NEAR(cider_d(T({"a", "b"}), T({"a", "b"}), idf), 5.0, 1e-12);
}

TEST(CiderD, SingleDocumentIdfIsZero) {
    const IdfTable idf({T({"the", "car", "brakes"})});
    Rng rng(9);
    const Tokens words = T({"the", "car", "brakes", "bus", "left"});
    for (int trial = 0; trial < 100; ++trial) {
        Tokens h, r;
        for (std::uint64_t i = 0, n = 1 + rng.below(6); i < n; ++i) h.push_back(words[rng.below(words.size())]);
        for (std::uint64_t i = 0, n = 1 + rng.below(6); i < n; ++i) r.push_back(words[rng.below(words.size())]);
        EXPECT_EQ(cider_d(h, r, idf), 0.0);
    }
}

TEST(CiderD, RangeAndLengthPenalty) {
    const IdfTable idf({T({"a", "b", "c"}), T({"d", "e"}), T({"f"})});
    const double base = cider_d(T({"a", "b", "c"}), T({"a", "b", "c"}), idf);
    const double padded = cider_d(T({"a", "b", "c", "a", "b", "c"}), T({"a", "b", "c"}), idf);
    EXPECT_GT(base, padded);
    EXPECT_GE(padded, 0.0);
    EXPECT_LE(base, 10.0);
}

TEST(CiderCorpus, MeanAndErrors) {
    const IdfTable idf({T({"a", "b", "c", "d", "e"}), T({"x", "y", "z", "w", "v"})});
    const Tokens good = T({"a", "b", "c", "d", "e"});
    EXPECT_NEAR(cider_corpus({good, T({"q"})}, {good, good}, idf), 5.0, 1e-12);
    EXPECT_NEAR(cider_corpus({good}, {good}, idf), cider_d(good, good, idf), 0.0);
    EXPECT_THROW(cider_corpus({}, {}, idf), Error);
    EXPECT_THROW(cider_corpus({good}, {}, idf), Error);
}

TEST(MicroCorpus, MatchesFrozenOracle) {
    const std::filesystem::path dir = AVD2_TEST_DATA;
    const auto expected = data::read_json(dir / "micro_corpus_expected.json");
    std::vector<Tokens> hyps, refs;
    for (const auto& j : data::read_jsonl(dir / "micro_corpus.jsonl")) {
        hyps.push_back(normalize(j["hyp"].get<std::string>()));
        refs.push_back(normalize(j["ref"].get<std::string>()));
    }
    const IdfTable idf(refs);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto& e = expected["per_sentence"][i];
        EXPECT_NEAR(rouge_l(hyps[i], refs[i]), e["rouge_l"].get<double>(), 1e-9) << e["id"];
        EXPECT_NEAR(meteor_lite(hyps[i], refs[i]), e["meteor"].get<double>(), 1e-9) << e["id"];
        EXPECT_NEAR(cider_d(hyps[i], refs[i], idf), e["cider_d"].get<double>(), 1e-9) << e["id"];
    }
    std::vector<Caption> hc, rc;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        hc.emplace_back(join(hyps[i]), Role::Description);
        rc.emplace_back(join(refs[i]), Role::Description);
    }
    const auto rep = score_all(hc, rc, idf);
    EXPECT_NEAR(rep.b1, expected["bleu1"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.b2, expected["bleu2"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.b3, expected["bleu3"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.b4, expected["bleu4"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.rouge_l, expected["rouge_l"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.meteor, expected["meteor"].get<double>(), 1e-9);
    EXPECT_NEAR(rep.cider_d, expected["cider_d"].get<double>(), 1e-9);
    EXPECT_EQ(rep.count, 5);
}

TEST(ScoreAll, IdentityAndDisjoint) {
    const std::vector<Caption> refs{{"the car brakes hard at the light", Role::Description},
                                    {"a truck turns left across our path", Role::Description}};
    std::vector<Tokens> rt;
    for (const auto& c : refs) rt.push_back(c.tokens);
    const IdfTable idf(rt);
    const auto same = score_all(refs, refs, idf);
    EXPECT_NEAR(same.b1, 1.0, 1e-12);
    EXPECT_NEAR(same.b4, 1.0, 1e-12);
    EXPECT_NEAR(same.rouge_l, 1.0, 1e-12);

    const std::vector<Caption> other{{"zz yy xx ww", Role::Description}, {"qq pp oo nn", Role::Description}};
    const auto dis = score_all(other, refs, idf);
    EXPECT_EQ(dis.b1, 0.0);
    EXPECT_EQ(dis.b4, 0.0);
    EXPECT_EQ(dis.rouge_l, 0.0);
    EXPECT_EQ(dis.meteor, 0.0);
    EXPECT_EQ(dis.cider_d, 0.0);

    const std::vector<Caption> wrong_role{{"the car", Role::Avoidance}, {"a truck", Role::Description}};
    try {
        score_all(wrong_role, refs, idf);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::RoleMismatch);
    }
    EXPECT_THROW(score_all({refs[0]}, refs, idf), Error);
}

TEST(ScoreReport, JsonRoundTripAndMalformed) {
    ScoreReport r{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 7.0, 3};
    const auto back = ScoreReport::from_json(r.to_json());
    EXPECT_EQ(back.b3, 0.3);
    EXPECT_EQ(back.cider_d, 7.0);
    EXPECT_EQ(back.count, 3);
    auto j = r.to_json();
    j.erase("meteor");
    try {
        ScoreReport::from_json(j);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::MalformedReport);
    }
}

TEST(GaussianStats, Examples) {
    Matrix x(2, 2);
    x(1, 0) = 2.0;
    const auto s = gaussian_stats(x);
    EXPECT_EQ(s.mean, (std::vector<double>{1.0, 0.0}));
    EXPECT_DOUBLE_EQ(s.cov(0, 0), 2.0);
    EXPECT_EQ(s.cov(0, 1), 0.0);
    EXPECT_EQ(s.cov(1, 1), 0.0);

    Matrix same(5, 3);
    for (std::size_t i = 0; i < 5; ++i) same(i, 0) = 1.5, same(i, 1) = -2.0, same(i, 2) = 0.25;
    const auto st = gaussian_stats(same);
    for (double v : st.cov.data()) EXPECT_EQ(v, 0.0);

    try {
        gaussian_stats(Matrix(1, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::TooFewSamples);
    }
}

TEST(Frechet, ClosedForms) {
    EXPECT_NEAR(frechet_distance(stats({0, 0}, Matrix::identity(2)), stats({3, 4}, Matrix::identity(2))), 25.0, 1e-9);
    EXPECT_NEAR(frechet_distance(stats({0, 0}, diag({4, 1})), stats({0, 0}, diag({1, 1}))), 1.0, 1e-9);
    EXPECT_THROW(frechet_distance(stats({0, 0}, diag({1, 1})), stats({0, 0, 0}, diag({1, 1, 1}))), Error);
}

TEST(Frechet, SelfDistanceIsZero) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto s = gaussian_stats(random_matrix(rng, 50, 6));
        EXPECT_NEAR(frechet_distance(s, s), 0.0, 1e-8);
    }
}

TEST(Frechet, Symmetric) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = gaussian_stats(random_matrix(rng, 40, 5));
        auto xb = random_matrix(rng, 40, 5);
        for (auto& v : xb.data()) v = 2.0 * v + 0.5;
        const auto b = gaussian_stats(xb);
        EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-8);
        EXPECT_GE(frechet_distance(a, b), 0.0);
    }
}

TEST(Frechet, MonotoneInNoise) {
    Rng rng(3);
    const Matrix x = random_matrix(rng, 1000, 16);
    const auto sx = gaussian_stats(x);
    double prev = -1.0;
    for (double sigma : {0.0, 0.1, 0.5, 1.0}) {
        Rng noise(4);
        Matrix y = x;
        for (auto& v : y.data()) v += sigma * noise.normal();
        const double d = frechet_distance(sx, gaussian_stats(y));
        EXPECT_GE(d, prev) << sigma;
        prev = d;
    }
}

TEST(Frechet, TraceIdentityAgainstEigenOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix ga = random_matrix(rng, 3, 3), gb = random_matrix(rng, 3, 3);
        const Matrix ca = matmul(ga, ga.transposed()), cb = matmul(gb, gb.transposed());

        const Eigen::MatrixXd ea = to_eigen(ca), eb = to_eigen(cb);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sa(ea);
        const Eigen::MatrixXd root =
            sa.eigenvectors() * sa.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * sa.eigenvectors().transpose();
        const Eigen::MatrixXd prod = root * eb * root;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sp(0.5 * (prod + prod.transpose()));
        const double want = sp.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

        const Matrix inner = symmetrized(matmul(matmul(sqrt_psd(ca), cb), sqrt_psd(ca)));
        EXPECT_NEAR(trace_sqrt_psd(inner), want, 1e-6);
    }
}

TEST(Jacobi, ReconstructsMatrix) {
    Rng rng(6);
    const Matrix g = random_matrix(rng, 6, 6);
    const Matrix a = symmetrized(g + g.transposed());
    const auto eig = jacobi_eigen(a);
    Matrix rebuilt(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
            for (std::size_t k = 0; k < 6; ++k)
                rebuilt(i, j) += eig.vectors(i, k) * eig.values[k] * eig.vectors(j, k);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(rebuilt.data()[i], a.data()[i], 1e-10);
}
