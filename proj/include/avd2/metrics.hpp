#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"
#include "avd2/matrix.hpp"
#include "avd2/textproc.hpp"

namespace avd2::metrics {

// ---------------------------------------------------------------------------
// BLEU

/// Corpus BLEU-n with pooled clipped precisions, one reference per hypothesis,
/// no smoothing.
inline double bleu_corpus(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, int n) {
    if (hyps.size() != refs.size())
        throw Error(Errc::LengthMismatch, "bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                              std::to_string(refs.size()) + " references");
    if (hyps.empty()) throw Error(Errc::EmptyCorpus, "bleu: no sentences");
    if (n < 1 || n > kMaxNGram) throw Error(Errc::InvalidConfig, "bleu order must be in 1..4");

    std::array<long, kMaxNGram> matched{}, total{};
    long hyp_len = 0, ref_len = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
        hyp_len += static_cast<long>(hyps[s].size());
        ref_len += static_cast<long>(refs[s].size());
        const auto hg = ngrams(hyps[s], n);
        const auto rg = ngrams(refs[s], n);
        for (int k = 1; k <= n; ++k) {
            const auto& rk = rg.order(k);
            for (const auto& [g, c] : hg.order(k)) {
                auto it = rk.find(g);
                matched[k - 1] += std::min(c, it == rk.end() ? 0 : it->second);
                total[k - 1] += c;
            }
        }
    }
    if (hyp_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        if (matched[k] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched[k]) / static_cast<double>(total[k]));
    }
    const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
    return bp * std::exp(log_sum / n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l(const Tokens& hyp, const Tokens& ref, double beta = 1.2) {
    const double l = static_cast<double>(lcs_length(hyp, ref));
    const double p = hyp.empty() ? 0.0 : l / static_cast<double>(hyp.size());
    const double r = ref.empty() ? 0.0 : l / static_cast<double>(ref.size());
    if (p == 0.0 && r == 0.0) return 0.0;
    const double b2 = beta * beta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

// ---------------------------------------------------------------------------
// METEOR-lite

struct Alignment {
    int matches = 0;
    int chunks = 0;
};

namespace detail {

struct AlignSearch {
    const Tokens& hyp;
    const Tokens& ref;
    std::size_t words; // 64-bit words in the used-position mask
    std::unordered_map<std::string, std::pair<int, int>> memo;
    static constexpr std::size_t kMemoLimit = 2'000'000;

    std::string key(std::size_t i, long prev, const std::vector<std::uint64_t>& used) const {
        std::string k(sizeof(std::size_t) + sizeof(long) + words * 8, '\0');
        std::memcpy(k.data(), &i, sizeof(i));
        std::memcpy(k.data() + sizeof(i), &prev, sizeof(prev));
        std::memcpy(k.data() + sizeof(i) + sizeof(prev), used.data(), words * 8);
        return k;
    }

    // Best (matches, adjacent pairs) for hyp[i..], lexicographically maximal.
    std::pair<int, int> run(std::size_t i, long prev, std::vector<std::uint64_t>& used) {
        if (i == hyp.size()) return {0, 0};
        const auto k = key(i, prev, used);
        if (auto it = memo.find(k); it != memo.end()) return it->second;

        auto best = run(i + 1, -1, used);
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const std::uint64_t bit = 1ull << (j % 64);
            if (ref[j] != hyp[i] || (used[j / 64] & bit)) continue;
            used[j / 64] |= bit;
            auto sub = run(i + 1, static_cast<long>(j), used);
            used[j / 64] &= ~bit;
            std::pair<int, int> cand{sub.first + 1, sub.second + (prev >= 0 && static_cast<long>(j) == prev + 1)};
            if (cand > best) best = cand;
        }
        if (memo.size() < kMemoLimit) memo.emplace(k, best);
        return best;
    }
};

} // namespace detail

/// Exact-match alignment with the maximum number of matched unigrams and,
/// among those, the fewest chunks. Exhaustive search with memoization over
/// (hyp position, previous match, used reference positions).
inline Alignment align_exact(const Tokens& hyp, const Tokens& ref) {
    detail::AlignSearch search{hyp, ref, (ref.size() + 63) / 64 + 1, {}};
    std::vector<std::uint64_t> used(search.words, 0);
    auto [m, adj] = search.run(0, -1, used);
    return {m, m - adj};
}

inline double meteor_lite(const Tokens& hyp, const Tokens& ref) {
    constexpr double alpha = 0.9, gamma = 0.5, theta = 3.0;
    const auto al = align_exact(hyp, ref);
    if (al.matches == 0) return 0.0;
    const double m = al.matches;
    const double p = m / static_cast<double>(hyp.size());
    const double r = m / static_cast<double>(ref.size());
    const double fmean = p * r / (alpha * p + (1.0 - alpha) * r);
    const double penalty = gamma * std::pow(static_cast<double>(al.chunks) / m, theta);
    return fmean * (1.0 - penalty);
}

// ---------------------------------------------------------------------------
// CIDEr-D

/// Document frequencies of every n-gram (n = 1..4) over a reference corpus.
/// Immutable once built.
class IdfTable {
  public:
    explicit IdfTable(const std::vector<Tokens>& refs) {
        if (refs.empty()) throw Error(Errc::EmptyCorpus, "idf table needs at least one reference");
        doc_count_ = static_cast<int>(refs.size());
        for (const auto& r : refs) {
            const auto g = ngrams(r);
            for (int n = 1; n <= kMaxNGram; ++n)
                for (const auto& [gram, c] : g.order(n)) ++df_[n - 1][gram];
        }
    }

    int doc_count() const noexcept { return doc_count_; }

    int df(const NGram& gram) const {
        if (gram.empty() || gram.size() > static_cast<std::size_t>(kMaxNGram)) return 0;
        const auto& m = df_[gram.size() - 1];
        auto it = m.find(gram);
        return it == m.end() ? 0 : it->second;
    }

    /// log(doc_count / df); zero for grams absent from the corpus.
    double weight(const NGram& gram) const {
        const int d = df(gram);
        return d > 0 ? std::log(static_cast<double>(doc_count_) / d) : 0.0;
    }

    const NGramMap& order(int n) const { return df_.at(static_cast<std::size_t>(n - 1)); }

  private:
    int doc_count_ = 0;
    std::array<NGramMap, kMaxNGram> df_;
};

inline IdfTable build_idf(const std::vector<Tokens>& refs) { return IdfTable(refs); }

/// CIDEr-D against a single reference, in [0, 10]. The numerator clips
/// hypothesis counts to the reference counts; the norms use unclipped
/// TF-IDF vectors.
inline double cider_d(const Tokens& hyp, const Tokens& ref, const IdfTable& idf, double sigma = 6.0) {
    const auto hg = ngrams(hyp);
    const auto rg = ngrams(ref);
    double sim_sum = 0.0;
    for (int n = 1; n <= kMaxNGram; ++n) {
        const auto& hn = hg.order(n);
        const auto& rn = rg.order(n);
        double dot = 0.0, hh = 0.0, rr = 0.0;
        for (const auto& [g, c] : rn) {
            const double w = idf.weight(g);
            rr += (c * w) * (c * w);
        }
        for (const auto& [g, c] : hn) {
            const double w = idf.weight(g);
            hh += (c * w) * (c * w);
            if (auto it = rn.find(g); it != rn.end())
                dot += std::min(c, it->second) * w * it->second * w;
        }
        if (hh > 0.0 && rr > 0.0) sim_sum += std::max(0.0, dot / (std::sqrt(hh) * std::sqrt(rr)));
    }
    const double delta = static_cast<double>(hyp.size()) - static_cast<double>(ref.size());
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    return 10.0 * penalty * sim_sum / kMaxNGram;
}

inline double cider_corpus(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, const IdfTable& idf) {
    if (hyps.size() != refs.size()) throw Error(Errc::LengthMismatch, "cider: hypothesis/reference count differs");
    if (hyps.empty()) throw Error(Errc::EmptyCorpus, "cider: no sentences");
    double s = 0.0;
    for (std::size_t i = 0; i < hyps.size(); ++i) s += cider_d(hyps[i], refs[i], idf);
    return s / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------
// Fréchet distance

struct GaussianStats {
    std::vector<double> mean;
    Matrix cov;
    std::size_t n = 0;

    std::size_t dim() const noexcept { return mean.size(); }
};

/// Column means and unbiased covariance of an N×D feature matrix.
inline GaussianStats gaussian_stats(const Matrix& features) {
    const std::size_t n = features.rows(), d = features.cols();
    if (n < 2) throw Error(Errc::TooFewSamples, "gaussian_stats needs at least 2 rows, got " + std::to_string(n));
    GaussianStats st;
    st.n = n;
    st.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) st.mean[j] += features(i, j);
    for (double& m : st.mean) m /= static_cast<double>(n);

    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) = features(i, j) - st.mean[j];
    Matrix cov;
    matmul_tn_into(centered, centered, cov);
    cov *= 1.0 / static_cast<double>(n - 1);
    st.cov = symmetrized(cov);
    return st;
}

/// ‖μa−μb‖² + Tr(Ca + Cb − 2·(Ca^½ Cb Ca^½)^½), clamped at 0.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.dim() != b.dim() || a.cov.rows() != b.cov.rows())
        throw Error(Errc::DimensionMismatch, "frechet_distance: dimensions " + std::to_string(a.dim()) + " vs " +
                                                 std::to_string(b.dim()));
    double mean_term = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        const double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    const Matrix sa = sqrt_psd(a.cov);
    const Matrix inner = symmetrized(matmul(matmul(sa, b.cov), sa));
    const double cross = trace_sqrt_psd(inner);
    const double fd = mean_term + trace(a.cov) + trace(b.cov) - 2.0 * cross;
    return std::max(0.0, fd);
}

// ---------------------------------------------------------------------------
// Aggregate report

struct ScoreReport {
    double b1 = 0, b2 = 0, b3 = 0, b4 = 0;
    double rouge_l = 0;
    double meteor = 0;
    double cider_d = 0; ///< [0, 10]
    long count = 0;

    nlohmann::json to_json() const {
        return {{"b1", b1},           {"b2", b2},         {"b3", b3},           {"b4", b4},
                {"rouge_l", rouge_l}, {"meteor", meteor}, {"cider_d", cider_d}, {"count", count}};
    }

    static ScoreReport from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw Error(Errc::MalformedReport, "score report must be a JSON object");
        auto num = [&](const char* key) {
            if (!j.contains(key) || !j[key].is_number())
                throw Error(Errc::MalformedReport, std::string("score report is missing numeric field '") + key + "'");
            return j[key].get<double>();
        };
        ScoreReport r;
        r.b1 = num("b1");
        r.b2 = num("b2");
        r.b3 = num("b3");
        r.b4 = num("b4");
        r.rouge_l = num("rouge_l");
        r.meteor = num("meteor");
        r.cider_d = num("cider_d");
        r.count = j.contains("count") && j["count"].is_number() ? j["count"].get<long>() : 0;
        return r;
    }
};

inline ScoreReport score_all(const std::vector<Caption>& hyps, const std::vector<Caption>& refs, const IdfTable& idf) {
    if (hyps.size() != refs.size())
        throw Error(Errc::LengthMismatch, "score_all: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                              std::to_string(refs.size()) + " references");
    std::vector<Tokens> h, r;
    h.reserve(hyps.size());
    r.reserve(refs.size());
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        if (hyps[i].role != refs[i].role)
            throw Error(Errc::RoleMismatch, "score_all: role mismatch at position " + std::to_string(i));
        h.push_back(hyps[i].tokens);
        r.push_back(refs[i].tokens);
    }
    ScoreReport rep;
    rep.count = static_cast<long>(h.size());
    if (h.empty()) return rep;
    rep.b1 = bleu_corpus(h, r, 1);
    rep.b2 = bleu_corpus(h, r, 2);
    rep.b3 = bleu_corpus(h, r, 3);
    rep.b4 = bleu_corpus(h, r, 4);
    double rl = 0, mt = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        rl += rouge_l(h[i], r[i]);
        mt += meteor_lite(h[i], r[i]);
    }
    rep.rouge_l = rl / static_cast<double>(h.size());
    rep.meteor = mt / static_cast<double>(h.size());
    rep.cider_d = cider_corpus(h, r, idf);
    return rep;
}

} // namespace avd2::metrics
