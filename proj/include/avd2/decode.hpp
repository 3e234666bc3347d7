#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "avd2/error.hpp"
#include "avd2/model.hpp"
#include "avd2/rng.hpp"
#include "avd2/tape.hpp"

namespace avd2 {

/// One generated sequence: ids start with BOS; logp[i] is the log-probability
/// of emitting ids[i] (0 for the given BOS); mask is 1 up to and including EOS.
struct DecodeOutput {
    std::vector<TokenId> ids;
    std::vector<double> logp;
    std::vector<int> mask;

    std::size_t size() const noexcept { return ids.size(); }

    /// Emitted tokens without BOS/EOS/PAD.
    std::vector<TokenId> content() const {
        std::vector<TokenId> out;
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (mask[i] && !Vocab::is_special(ids[i])) out.push_back(ids[i]);
        return out;
    }

    /// Right-padded copy of length `len` (PAD, logp 0, mask 0).
    DecodeOutput padded(std::size_t len) const {
        DecodeOutput p = *this;
        if (p.ids.size() < len) {
            p.ids.resize(len, Vocab::kPad);
            p.logp.resize(len, 0.0);
            p.mask.resize(len, 0);
        }
        return p;
    }

    friend bool operator==(const DecodeOutput&, const DecodeOutput&) = default;
};

/// Lowest index among the maxima.
inline std::size_t argmax_lowest(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

/// Index drawn from `probs` by inverse CDF at `u` ∈ [0, 1).
inline std::size_t sample_categorical(std::span<const double> probs, double u) {
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        if (probs[j] <= 0.0) continue;
        last_positive = j;
        acc += probs[j];
        if (u < acc) return j;
    }
    return last_positive;
}

/// Step-by-step evaluation of the decoder with cached self-attention keys and
/// values. Produces the same logits as `forward` on the growing prefix.
class IncrementalDecoder {
  public:
    IncrementalDecoder(const ModelParams& params, const Matrix& features) : params_(params) {
        check_forward_inputs(params, features, {Vocab::kBos});
        Matrix mem = matmul(features, params[Tensor::FeatProj]);
        cross_k_ = matmul(mem, params[Tensor::CrossK]);
        cross_v_ = matmul(mem, params[Tensor::CrossV]);
        const auto d = static_cast<std::size_t>(params.config.d_model);
        self_k_ = Matrix(0, d);
        self_v_ = Matrix(0, d);
    }

    std::size_t position() const noexcept { return self_k_.rows(); }

    /// Feed `token` at the next position; returns the logits for the token
    /// after it.
    std::vector<double> step(TokenId token) {
        const auto& c = params_.config;
        const std::size_t pos = position();
        if (pos >= static_cast<std::size_t>(c.max_len))
            throw Error(Errc::BadPrefix, "incremental decode exceeded max_len");
        if (token < 0 || token >= c.vocab_size) throw Error(Errc::BadPrefix, "token id out of range");

        Tape t(false);
        auto P = [&](Tensor x) { return t.leaf(params_[x]); };
        auto x = t.add(t.gather_rows(P(Tensor::TokEmb), {static_cast<std::size_t>(token)}),
                       t.gather_rows(P(Tensor::PosEmb), {pos}));
        auto h = t.layer_norm(x, P(Tensor::Ln1Gain), P(Tensor::Ln1Bias));
        auto q = t.matmul(h, P(Tensor::SelfQ));
        append_row(self_k_, t.value(t.matmul(h, P(Tensor::SelfK))));
        append_row(self_v_, t.value(t.matmul(h, P(Tensor::SelfV))));

        auto sa = detail::attention(t, q, t.leaf(self_k_), t.leaf(self_v_), c.n_heads, c.head_dim(), false);
        auto a = t.add(x, t.matmul(sa, P(Tensor::SelfO)));
        auto ca = detail::attention(t, t.matmul(a, P(Tensor::CrossQ)), t.leaf(cross_k_), t.leaf(cross_v_), c.n_heads,
                                    c.head_dim(), false);
        auto b = t.add(a, t.matmul(ca, P(Tensor::CrossO)));
        auto h2 = t.layer_norm(b, P(Tensor::Ln2Gain), P(Tensor::Ln2Bias));
        auto ff = t.add_row(
            t.matmul(t.gelu(t.add_row(t.matmul(h2, P(Tensor::Ff1)), P(Tensor::Ff1b))), P(Tensor::Ff2)),
            P(Tensor::Ff2b));
        auto out = t.add(b, ff);
        auto logits = t.matmul_nt(out, P(Tensor::TokEmb));
        const auto row = t.value(logits).row(0);
        return {row.begin(), row.end()};
    }

  private:
    static void append_row(Matrix& m, const Matrix& row) {
        Matrix grown(m.rows() + 1, m.cols());
        std::copy(m.data().begin(), m.data().end(), grown.data().begin());
        std::copy(row.data().begin(), row.data().end(), grown.data().begin() + static_cast<std::ptrdiff_t>(m.size()));
        m = std::move(grown);
    }

    const ModelParams& params_;
    Matrix cross_k_, cross_v_;
    Matrix self_k_, self_v_;
};

inline std::size_t effective_max_len(const ModelParams& params, std::size_t max_len) {
    return std::min(max_len, static_cast<std::size_t>(params.config.max_len));
}

/// Greedy decode: argmax token at every step (lowest id on ties), stopping at
/// EOS or after `max_len` ids including BOS.
inline DecodeOutput decode_greedy(const ModelParams& params, const Matrix& features, std::size_t max_len) {
    max_len = effective_max_len(params, max_len);
    IncrementalDecoder dec(params, features);
    DecodeOutput out{{Vocab::kBos}, {0.0}, {1}};
    while (out.ids.size() < max_len) {
        const auto logits = dec.step(out.ids.back());
        const auto lp = log_softmax(logits);
        const auto next = argmax_lowest(logits);
        out.ids.push_back(static_cast<TokenId>(next));
        out.logp.push_back(lp[next]);
        out.mask.push_back(1);
        if (next == static_cast<std::size_t>(Vocab::kEos)) break;
    }
    return out;
}

/// Sampled rollout from softmax(logits / temperature). logp is recorded under
/// the temperature-1 distribution.
inline DecodeOutput decode_sample(const ModelParams& params, const Matrix& features, std::size_t max_len,
                                  std::uint64_t seed, double temperature = 1.0) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw Error(Errc::InvalidTemperature, "temperature must be positive and finite");
    max_len = effective_max_len(params, max_len);
    Rng rng(seed);
    IncrementalDecoder dec(params, features);
    DecodeOutput out{{Vocab::kBos}, {0.0}, {1}};
    std::vector<double> scaled, probs;
    while (out.ids.size() < max_len) {
        const auto logits = dec.step(out.ids.back());
        const auto lp = log_softmax(logits);
        scaled.resize(logits.size());
        for (std::size_t j = 0; j < logits.size(); ++j) scaled[j] = logits[j] / temperature;
        const auto lps = log_softmax(scaled);
        probs.resize(lps.size());
        for (std::size_t j = 0; j < lps.size(); ++j) probs[j] = std::exp(lps[j]);
        const auto next = sample_categorical(probs, rng.uniform());
        out.ids.push_back(static_cast<TokenId>(next));
        out.logp.push_back(lp[next]);
        out.mask.push_back(1);
        if (next == static_cast<std::size_t>(Vocab::kEos)) break;
    }
    return out;
}

} // namespace avd2
