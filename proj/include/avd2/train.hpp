#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "avd2/data.hpp"
#include "avd2/error.hpp"
#include "avd2/model.hpp"
#include "avd2/rng.hpp"
#include "avd2/textproc.hpp"

namespace avd2 {

/// One (features, caption) pair prepared for the decoder.
struct TrainingExample {
    std::string id;
    Matrix features;
    std::vector<TokenId> ids; ///< [BOS, t.., EOS] truncated to max_len, unpadded
    Tokens reference;         ///< normalized reference tokens
};

inline TrainingExample make_example(std::string id, Matrix features, const Caption& caption, const Vocab& vocab,
                                    std::size_t max_len) {
    auto enc = encode(vocab, caption.tokens, max_len);
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < enc.ids.size() && enc.mask[i]; ++i) ids.push_back(enc.ids[i]);
    return {std::move(id), std::move(features), std::move(ids), caption.tokens};
}

inline std::vector<TrainingExample> make_examples(const data::CorpusDir& corpus, std::string_view split, Role role,
                                                  const Vocab& vocab, std::size_t max_len) {
    std::vector<TrainingExample> out;
    for (const auto* s : corpus.split(split))
        out.push_back(make_example(s->id, corpus.features(*s).to_matrix(), s->caption(role), vocab, max_len));
    return out;
}

struct TeacherForced {
    std::vector<TokenId> prefix;
    std::vector<TokenId> targets;
    std::vector<int> mask;
};

inline TeacherForced teacher_forced(const std::vector<TokenId>& ids) {
    TeacherForced tf;
    tf.prefix.assign(ids.begin(), ids.end() - 1);
    tf.targets.assign(ids.begin() + 1, ids.end());
    tf.mask.assign(tf.targets.size(), 1);
    return tf;
}

struct MleConfig {
    int epochs = 30;
    int batch_size = 16;
    std::uint64_t seed = 0;
    AdamConfig adam{};
};

struct MleResult {
    std::vector<double> epoch_loss; ///< mean per-token NLL of each epoch
    AdamState optimizer;
};

/// Teacher-forced cross-entropy training with seeded mini-batch shuffling.
/// Each batch averages over all of its target tokens.
inline MleResult train_mle(ModelParams& params, const std::vector<TrainingExample>& dataset, const MleConfig& cfg) {
    if (dataset.empty()) throw Error(Errc::EmptyDataset, "train_mle: no training examples");
    if (cfg.batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
    MleResult res;
    res.optimizer = AdamState::for_params(params);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(hash_combine(derive_seed(cfg.seed, "train_mle/shuffle"), static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order.begin(), order.end());
        double nll = 0.0;
        long tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            long batch_tokens = 0;
            for (std::size_t k = start; k < end; ++k) batch_tokens += static_cast<long>(dataset[order[k]].ids.size()) - 1;
            if (batch_tokens == 0) continue;

            ParamGrads grads = ModelParams::zeros(params.config);
            for (std::size_t k = start; k < end; ++k) {
                const auto& ex = dataset[order[k]];
                if (ex.ids.size() < 2) continue;
                const auto tf = teacher_forced(ex.ids);
                Tape tape;
                const auto fwd = forward(params, ex.features, tf.prefix, tape);
                auto lg = xent_loss(tape.value(fwd.logits), tf.targets, tf.mask);
                if (!std::isfinite(lg.loss))
                    throw Error(Errc::NumericFailure, "non-finite training loss at epoch " + std::to_string(epoch));
                nll += lg.loss * lg.tokens;
                tokens += lg.tokens;
                lg.dlogits *= static_cast<double>(lg.tokens) / static_cast<double>(batch_tokens);
                add_into(grads, backward(tape, fwd, params, lg.dlogits));
            }
            adam_step(params, grads, res.optimizer, cfg.adam);
        }
        res.epoch_loss.push_back(tokens > 0 ? nll / static_cast<double>(tokens) : 0.0);
    }
    return res;
}

} // namespace avd2
