#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"
#include "avd2/matrix.hpp"
#include "avd2/rng.hpp"
#include "avd2/tape.hpp"
#include "avd2/textproc.hpp"

namespace avd2 {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 2;
    int vocab_size = 0;
    int max_len = 24;
    int feature_dim = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw Error(Errc::InvalidConfig, "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                                 std::to_string(n_heads));
        if (vocab_size < 5) throw Error(Errc::InvalidConfig, "vocab_size must be >= 5");
        if (max_len < 2) throw Error(Errc::InvalidConfig, "max_len must be >= 2");
        if (feature_dim < 1) throw Error(Errc::InvalidConfig, "feature_dim must be >= 1");
    }

    int head_dim() const { return d_model / n_heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},         {"n_heads", c.n_heads},
         {"vocab_size", c.vocab_size},   {"max_len", c.max_len},
         {"feature_dim", c.feature_dim}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_len").get_to(c.max_len);
    j.at("feature_dim").get_to(c.feature_dim);
    j.at("seed").get_to(c.seed);
}

enum class Tensor : std::size_t {
    TokEmb,   ///< |V|×d, also the (transposed) output projection
    PosEmb,   ///< max_len×d
    FeatProj, ///< feature_dim×d
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    Ff1,  ///< d×4d
    Ff1b, ///< 1×4d
    Ff2,  ///< 4d×d
    Ff2b, ///< 1×d
    Ln1Gain,
    Ln1Bias,
    Ln2Gain,
    Ln2Bias,
    Count_
};

constexpr std::size_t kTensorCount = static_cast<std::size_t>(Tensor::Count_);

constexpr std::array<std::string_view, kTensorCount> kTensorNames{
    "tok_emb", "pos_emb", "feat_proj", "self_q", "self_k", "self_v",  "self_o",   "cross_q",  "cross_k", "cross_v",
    "cross_o", "ff1",     "ff1_b",     "ff2",    "ff2_b",  "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"};

/// All dense tensors of the decoder. Gradients and optimizer moments use the
/// same layout.
struct ModelParams {
    ModelConfig config;
    std::array<Matrix, kTensorCount> tensors;

    Matrix& operator[](Tensor t) { return tensors[static_cast<std::size_t>(t)]; }
    const Matrix& operator[](Tensor t) const { return tensors[static_cast<std::size_t>(t)]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& m : tensors) n += m.size();
        return n;
    }

    /// Zero tensors with the declared shapes.
    static ModelParams zeros(const ModelConfig& c) {
        c.validate();
        const std::size_t d = static_cast<std::size_t>(c.d_model), v = static_cast<std::size_t>(c.vocab_size);
        ModelParams p;
        p.config = c;
        p[Tensor::TokEmb] = Matrix(v, d);
        p[Tensor::PosEmb] = Matrix(static_cast<std::size_t>(c.max_len), d);
        p[Tensor::FeatProj] = Matrix(static_cast<std::size_t>(c.feature_dim), d);
        for (Tensor t : {Tensor::SelfQ, Tensor::SelfK, Tensor::SelfV, Tensor::SelfO, Tensor::CrossQ, Tensor::CrossK,
                         Tensor::CrossV, Tensor::CrossO})
            p[t] = Matrix(d, d);
        p[Tensor::Ff1] = Matrix(d, 4 * d);
        p[Tensor::Ff1b] = Matrix(1, 4 * d);
        p[Tensor::Ff2] = Matrix(4 * d, d);
        p[Tensor::Ff2b] = Matrix(1, d);
        for (Tensor t : {Tensor::Ln1Gain, Tensor::Ln1Bias, Tensor::Ln2Gain, Tensor::Ln2Bias}) p[t] = Matrix(1, d);
        return p;
    }

    bool all_finite() const {
        for (const auto& m : tensors)
            for (double x : m.data())
                if (!std::isfinite(x)) return false;
        return true;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using ParamGrads = ModelParams;

/// Glorot-uniform weights, unit layer-norm gains, zero biases.
inline ModelParams init_params(const ModelConfig& config) {
    ModelParams p = ModelParams::zeros(config);
    Rng rng(derive_seed(config.seed, "init_params"));
    for (std::size_t i = 0; i < kTensorCount; ++i) {
        const auto t = static_cast<Tensor>(i);
        Matrix& m = p.tensors[i];
        switch (t) {
        case Tensor::Ff1b:
        case Tensor::Ff2b:
        case Tensor::Ln1Bias:
        case Tensor::Ln2Bias: break;
        case Tensor::Ln1Gain:
        case Tensor::Ln2Gain:
            for (double& x : m.data()) x = 1.0;
            break;
        default: {
            const double s = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
            for (double& x : m.data()) x = rng.uniform(-s, s);
        }
        }
    }
    return p;
}

struct ForwardOptions {
    /// When set, logits use this |V|×d matrix instead of the token embedding;
    /// used to compare tied against untied gradients.
    const Matrix* untied_output = nullptr;
};

struct ForwardResult {
    Tape::Node logits = 0;
    std::array<Tape::Node, kTensorCount> params{};
    Tape::Node untied_output = 0;
};

inline void check_forward_inputs(const ModelParams& params, const Matrix& features, const std::vector<TokenId>& prefix) {
    const auto& c = params.config;
    if (prefix.empty() || prefix.front() != Vocab::kBos)
        throw Error(Errc::BadPrefix, "decoder prefix must start with BOS");
    if (prefix.size() > static_cast<std::size_t>(c.max_len))
        throw Error(Errc::BadPrefix, "prefix length " + std::to_string(prefix.size()) + " exceeds max_len");
    for (TokenId id : prefix)
        if (id < 0 || id >= c.vocab_size) throw Error(Errc::BadPrefix, "token id out of range: " + std::to_string(id));
    if (features.rows() < 1) throw Error(Errc::BadPrefix, "feature sequence is empty");
    if (features.cols() != static_cast<std::size_t>(c.feature_dim))
        throw Error(Errc::DimensionMismatch, "feature_dim " + std::to_string(features.cols()) + " vs model " +
                                                 std::to_string(c.feature_dim));
}

namespace detail {

inline Tape::Node attention(Tape& tape, Tape::Node q, Tape::Node k, Tape::Node v, int heads, int head_dim,
                            bool causal) {
    std::vector<Tape::Node> outs;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h * head_dim), n = static_cast<std::size_t>(head_dim);
        auto qh = tape.slice_cols(q, off, n);
        auto kh = tape.slice_cols(k, off, n);
        auto vh = tape.slice_cols(v, off, n);
        auto scores = tape.scale(tape.matmul_nt(qh, kh), scale);
        auto probs = tape.softmax_rows(scores, causal);
        outs.push_back(tape.matmul(probs, vh));
    }
    return heads == 1 ? outs.front() : tape.concat_cols(std::move(outs));
}

} // namespace detail

/// Logits for every prefix position: row t scores the token following
/// prefix[0..t]. Layout (one block):
///   x = E[ids] + P[pos]
///   a = x + SelfAttn(LN1(x))          causal
///   b = a + CrossAttn(a, F·Wf)
///   c = b + W2·gelu(W1·LN2(b) + b1) + b2
///   logits = c · Eᵀ
inline ForwardResult forward(const ModelParams& params, const Matrix& features, const std::vector<TokenId>& prefix,
                             Tape& tape, const ForwardOptions& opts = {}) {
    check_forward_inputs(params, features, prefix);
    const auto& c = params.config;
    ForwardResult r;
    for (std::size_t i = 0; i < kTensorCount; ++i) r.params[i] = tape.leaf(params.tensors[i]);
    auto P = [&](Tensor t) { return r.params[static_cast<std::size_t>(t)]; };

    std::vector<std::size_t> ids(prefix.begin(), prefix.end()), pos(prefix.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;

    auto x = tape.add(tape.gather_rows(P(Tensor::TokEmb), std::move(ids)),
                      tape.gather_rows(P(Tensor::PosEmb), std::move(pos)));

    auto h = tape.layer_norm(x, P(Tensor::Ln1Gain), P(Tensor::Ln1Bias));
    auto sa = detail::attention(tape, tape.matmul(h, P(Tensor::SelfQ)), tape.matmul(h, P(Tensor::SelfK)),
                                tape.matmul(h, P(Tensor::SelfV)), c.n_heads, c.head_dim(), true);
    auto a = tape.add(x, tape.matmul(sa, P(Tensor::SelfO)));

    auto mem = tape.matmul(tape.leaf(features), P(Tensor::FeatProj));
    auto ca = detail::attention(tape, tape.matmul(a, P(Tensor::CrossQ)), tape.matmul(mem, P(Tensor::CrossK)),
                                tape.matmul(mem, P(Tensor::CrossV)), c.n_heads, c.head_dim(), false);
    auto b = tape.add(a, tape.matmul(ca, P(Tensor::CrossO)));

    auto h2 = tape.layer_norm(b, P(Tensor::Ln2Gain), P(Tensor::Ln2Bias));
    auto ff = tape.add_row(tape.matmul(tape.gelu(tape.add_row(tape.matmul(h2, P(Tensor::Ff1)), P(Tensor::Ff1b))),
                                       P(Tensor::Ff2)),
                           P(Tensor::Ff2b));
    auto out = tape.add(b, ff);

    Tape::Node proj = P(Tensor::TokEmb);
    if (opts.untied_output) {
        r.untied_output = tape.leaf(*opts.untied_output);
        proj = r.untied_output;
    }
    r.logits = tape.matmul_nt(out, proj);
    return r;
}

/// Inference-only forward returning the logits matrix.
inline Matrix forward_logits(const ModelParams& params, const Matrix& features, const std::vector<TokenId>& prefix) {
    Tape tape(false);
    auto r = forward(params, features, prefix, tape);
    return tape.value(r.logits);
}

/// Stable log-softmax of one row.
inline std::vector<double> log_softmax(std::span<const double> row) {
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lz;
    return out;
}

struct LossAndGrad {
    double loss = 0.0;
    Matrix dlogits;
    int tokens = 0; ///< N = Σ m_i
};

/// −(1/N) Σ m_i · log softmax(logits_i)[target_i] and its gradient.
inline LossAndGrad xent_loss(const Matrix& logits, const std::vector<TokenId>& targets, const std::vector<int>& mask) {
    if (targets.size() != logits.rows() || mask.size() != logits.rows())
        throw Error(Errc::LengthMismatch, "xent_loss: logits/targets/mask lengths differ");
    int n = 0;
    for (int m : mask) n += m != 0;
    if (n == 0) throw Error(Errc::AllMasked, "xent_loss: every position is masked");
    LossAndGrad out;
    out.tokens = n;
    out.dlogits = Matrix(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask[i]) continue;
        const auto lp = log_softmax(logits.row(i));
        const auto t = static_cast<std::size_t>(targets[i]);
        out.loss -= lp[t];
        for (std::size_t j = 0; j < lp.size(); ++j) out.dlogits(i, j) = std::exp(lp[j]) / n;
        out.dlogits(i, t) -= 1.0 / n;
    }
    out.loss /= n;
    return out;
}

/// Reverse pass from an upstream logits gradient to every parameter tensor.
inline ParamGrads backward(Tape& tape, const ForwardResult& fwd, const ModelParams& params, const Matrix& dlogits) {
    tape.backward(fwd.logits, dlogits);
    ParamGrads g;
    g.config = params.config;
    for (std::size_t i = 0; i < kTensorCount; ++i) g.tensors[i] = tape.grad(fwd.params[i]);
    return g;
}

inline void add_into(ParamGrads& acc, const ParamGrads& g, double scale = 1.0) {
    for (std::size_t i = 0; i < kTensorCount; ++i) {
        auto& a = acc.tensors[i].data();
        const auto& b = g.tensors[i].data();
        for (std::size_t k = 0; k < a.size(); ++k) a[k] += scale * b[k];
    }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ModelParams m;
    ModelParams v;
    long step = 0;

    static AdamState for_params(const ModelParams& p) { return {ModelParams::zeros(p.config), ModelParams::zeros(p.config), 0}; }
};

/// Bias-corrected adaptive-moment update.
inline void adam_step(ModelParams& params, const ParamGrads& grads, AdamState& state, const AdamConfig& cfg = {}) {
    if (state.m.tensors[0].empty()) state = AdamState::for_params(params);
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < kTensorCount; ++i) {
        auto& w = params.tensors[i].data();
        const auto& g = grads.tensors[i].data();
        auto& m = state.m.tensors[i].data();
        auto& v = state.v.tensors[i].data();
        if (g.size() != w.size()) throw Error(Errc::DimensionMismatch, "adam_step: gradient shape mismatch");
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

} // namespace avd2
