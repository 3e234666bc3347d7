#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/decode.hpp"
#include "avd2/error.hpp"
#include "avd2/metrics.hpp"
#include "avd2/model.hpp"
#include "avd2/rng.hpp"
#include "avd2/train.hpp"

namespace avd2::scst {

/// Per-position rewards for one sampled sequence.
struct RewardVector {
    std::vector<double> r;
    double baseline_score = 0.0;
    double sample_score = 0.0;
};

/// Sentence CIDEr-D difference (sample − greedy baseline) broadcast to every
/// unmasked position of the sample; zero where mask = 0.
inline RewardVector compute_rewards(const DecodeOutput& sample, const DecodeOutput& greedy, const Tokens& reference,
                                    const metrics::IdfTable& idf, const Vocab& vocab) {
    RewardVector rv;
    rv.sample_score = metrics::cider_d(decode(vocab, sample.content()), reference, idf);
    rv.baseline_score = metrics::cider_d(decode(vocab, greedy.content()), reference, idf);
    const double diff = rv.sample_score - rv.baseline_score;
    rv.r.resize(sample.size());
    for (std::size_t i = 0; i < sample.size(); ++i) rv.r[i] = sample.mask[i] ? diff : 0.0;
    return rv;
}

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> dlogp; ///< ∂L/∂logp_i = −r_i·m_i / N
    int tokens = 0;            ///< N
};

/// L = −(1/N) Σ r_i · logp_i · m_i with N the number of unmasked positions.
inline LossAndGrad scst_loss(const std::vector<double>& logp, const std::vector<double>& r, const std::vector<int>& mask) {
    if (logp.size() != r.size() || logp.size() != mask.size())
        throw Error(Errc::LengthMismatch, "scst_loss: logp/reward/mask lengths differ");
    int n = 0;
    for (int m : mask) n += m != 0;
    if (n == 0) throw Error(Errc::AllMasked, "scst_loss: every position is masked");
    LossAndGrad out;
    out.tokens = n;
    out.dlogp.assign(logp.size(), 0.0);
    double s = 0.0;
    for (std::size_t i = 0; i < logp.size(); ++i) {
        if (!mask[i]) continue;
        s += r[i] * logp[i];
        out.dlogp[i] = -r[i] / n;
    }
    out.loss = -s / n;
    return out;
}

/// Map per-token log-probability gradients of `seq` onto the logits of a
/// teacher-forced forward over seq.ids[0..len-1): row t feeds logp[t+1].
inline Matrix logp_grad_to_logits(const Matrix& logits, const DecodeOutput& seq, const std::vector<double>& dlogp) {
    Matrix d(logits.rows(), logits.cols());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const double g = dlogp[t + 1];
        if (g == 0.0) continue;
        const auto lp = log_softmax(logits.row(t));
        const auto y = static_cast<std::size_t>(seq.ids[t + 1]);
        for (std::size_t j = 0; j < lp.size(); ++j) d(t, j) = -g * std::exp(lp[j]);
        d(t, y) += g;
    }
    return d;
}

struct ScstBatchStats {
    double mean_reward = 0.0;
    double mean_baseline = 0.0;
    double mean_sample = 0.0;
    double loss = 0.0;
    long sequences = 0;

    nlohmann::json to_json() const {
        return {{"mean_reward", mean_reward}, {"mean_baseline", mean_baseline}, {"mean_sample", mean_sample},
                {"loss", loss},               {"sequences", sequences}};
    }

    friend bool operator==(const ScstBatchStats&, const ScstBatchStats&) = default;
};

struct ScstConfig {
    int epochs = 10;
    int batch_size = 16;
    std::uint64_t seed = 0;
    std::size_t max_len = 24;
    double temperature = 1.0;
    AdamConfig adam{.lr = 5e-5};
};

/// Rollout seed for one sample in one epoch; independent of visiting order.
inline std::uint64_t rollout_seed(std::uint64_t seed, std::string_view sample_id, int epoch) {
    return hash_combine(hash_combine(derive_seed(seed, "scst/rollout"), sample_id), static_cast<std::uint64_t>(epoch));
}

struct ScstResult {
    std::vector<ScstBatchStats> epochs;
    AdamState optimizer;
};

/// Self-critical training: for every sample, a greedy baseline (no gradient)
/// and one seeded sampled rollout; the masked, length-normalized policy loss
/// of the rollout is averaged over the batch before each Adam step.
inline ScstResult scst_train(ModelParams& params, const std::vector<TrainingExample>& dataset,
                             const metrics::IdfTable& idf, const Vocab& vocab, const ScstConfig& cfg) {
    if (dataset.empty()) throw Error(Errc::EmptyDataset, "scst_train: no training examples");
    if (cfg.batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
    ScstResult res;
    res.optimizer = AdamState::for_params(params);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(hash_combine(derive_seed(cfg.seed, "scst/shuffle"), static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order.begin(), order.end());
        ScstBatchStats st;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            ParamGrads grads = ModelParams::zeros(params.config);
            bool any = false;
            for (std::size_t k = start; k < end; ++k) {
                const auto& ex = dataset[order[k]];
                const auto greedy = decode_greedy(params, ex.features, cfg.max_len);
                const auto sample =
                    decode_sample(params, ex.features, cfg.max_len, rollout_seed(cfg.seed, ex.id, epoch), cfg.temperature);
                const auto rw = compute_rewards(sample, greedy, ex.reference, idf, vocab);
                const auto lg = scst_loss(sample.logp, rw.r, sample.mask);
                if (!std::isfinite(lg.loss))
                    throw Error(Errc::NumericFailure, "non-finite SCST loss at epoch " + std::to_string(epoch));

                st.mean_sample += rw.sample_score;
                st.mean_baseline += rw.baseline_score;
                st.mean_reward += rw.sample_score - rw.baseline_score;
                st.loss += lg.loss;
                ++st.sequences;

                if (rw.sample_score == rw.baseline_score || sample.size() < 2) continue;
                std::vector<TokenId> prefix(sample.ids.begin(), sample.ids.end() - 1);
                Tape tape;
                const auto fwd = forward(params, ex.features, prefix, tape);
                Matrix dlogits = logp_grad_to_logits(tape.value(fwd.logits), sample, lg.dlogp);
                dlogits *= inv_batch;
                add_into(grads, backward(tape, fwd, params, dlogits));
                any = true;
            }
            if (any) adam_step(params, grads, res.optimizer, cfg.adam);
        }
        const double n = static_cast<double>(st.sequences);
        st.mean_sample /= n;
        st.mean_baseline /= n;
        st.mean_reward /= n;
        st.loss /= n;
        res.epochs.push_back(st);
    }
    return res;
}

/// Mean sentence CIDEr-D of greedy decodes against each example's reference.
inline double greedy_cider(const ModelParams& params, const std::vector<TrainingExample>& dataset,
                           const metrics::IdfTable& idf, const Vocab& vocab, std::size_t max_len) {
    if (dataset.empty()) throw Error(Errc::EmptyDataset, "greedy_cider: no examples");
    double s = 0.0;
    for (const auto& ex : dataset)
        s += metrics::cider_d(decode(vocab, decode_greedy(params, ex.features, max_len).content()), ex.reference, idf);
    return s / static_cast<double>(dataset.size());
}

} // namespace avd2::scst
