#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"

namespace avd2 {

using Tokens = std::vector<std::string>;

/// Lowercase, map everything outside [a-z0-9 ] to a space, split on runs of
/// spaces. Applied identically to hypotheses and references.
inline Tokens normalize(std::string_view raw) {
    Tokens out;
    std::string cur;
    for (char ch : raw) {
        char c = (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch;
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            cur.push_back(c);
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::string join(const Tokens& tokens, std::string_view sep = " ") {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += sep;
        s += tokens[i];
    }
    return s;
}

enum class Role { Description, Avoidance };

inline std::string_view to_string(Role r) { return r == Role::Description ? "description" : "avoidance"; }

inline Role parse_role(std::string_view s) {
    if (s == "description") return Role::Description;
    if (s == "avoidance") return Role::Avoidance;
    throw Error(Errc::MissingField, "unknown caption role '" + std::string(s) + "'");
}

struct Caption {
    std::string raw;
    Tokens tokens;
    Role role = Role::Description;

    Caption() = default;
    Caption(std::string raw_text, Role r) : raw(std::move(raw_text)), tokens(normalize(raw)), role(r) {}
};

using TokenId = std::int32_t;

class Vocab {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr TokenId kUnk = 3;
    static constexpr std::size_t kReserved = 4;
    static constexpr std::array<std::string_view, kReserved> kReservedTokens{"<pad>", "<bos>", "<eos>",
                                                                            "<unk>"};

    Vocab() : Vocab(Tokens{}) {}

    /// `words` excludes the reserved symbols; they are prepended.
    explicit Vocab(const Tokens& words, int min_count = 1) : min_count_(min_count) {
        for (auto r : kReservedTokens) push(std::string(r));
        for (const auto& w : words) {
            if (index_.contains(w))
                throw Error(Errc::DuplicateId, "duplicate vocabulary token '" + w + "'");
            push(w);
        }
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    int min_count() const noexcept { return min_count_; }
    const Tokens& tokens() const noexcept { return tokens_; }

    TokenId id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kReserved) && id != kUnk; }

    nlohmann::json to_json() const { return tokens_; }

    static Vocab from_json(const nlohmann::json& j) {
        if (!j.is_array() || j.size() < kReserved)
            throw Error(Errc::MissingField, "vocabulary JSON must be an array with the reserved symbols");
        for (std::size_t i = 0; i < kReserved; ++i)
            if (j[i].get<std::string>() != kReservedTokens[i])
                throw Error(Errc::MissingField, "vocabulary reserved symbol mismatch at id " + std::to_string(i));
        Tokens words;
        for (std::size_t i = kReserved; i < j.size(); ++i) words.push_back(j[i].get<std::string>());
        return Vocab(words);
    }

  private:
    void push(std::string w) {
        index_.emplace(w, static_cast<TokenId>(tokens_.size()));
        tokens_.push_back(std::move(w));
    }

    Tokens tokens_;
    std::unordered_map<std::string, TokenId> index_;
    int min_count_ = 1;
};

/// Tokens seen at least `min_count` times, most frequent first, ties broken
/// lexicographically.
inline Vocab build_vocab(const std::vector<Caption>& corpus, int min_count) {
    if (min_count < 1) throw Error(Errc::InvalidConfig, "min_count must be >= 1");
    std::map<std::string, int> counts;
    for (const auto& c : corpus)
        for (const auto& t : c.tokens) ++counts[t];
    std::vector<std::pair<std::string, int>> kept;
    for (auto& [tok, n] : counts)
        if (n >= min_count) kept.emplace_back(tok, n);
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Tokens words;
    words.reserve(kept.size());
    for (auto& [tok, n] : kept) words.push_back(tok);
    return Vocab(words, min_count);
}

struct Encoded {
    std::vector<TokenId> ids;
    std::vector<int> mask;
};

/// [BOS, t1.., EOS, PAD..] truncated or padded to `max_len`.
inline Encoded encode(const Vocab& vocab, const Tokens& tokens, std::size_t max_len) {
    if (max_len < 2) throw Error(Errc::InvalidConfig, "encode requires max_len >= 2");
    Encoded e;
    e.ids.reserve(max_len);
    e.ids.push_back(Vocab::kBos);
    for (const auto& t : tokens) e.ids.push_back(vocab.id(t));
    e.ids.push_back(Vocab::kEos);
    e.ids.resize(max_len, Vocab::kPad);
    e.mask.resize(max_len);
    for (std::size_t i = 0; i < max_len; ++i) e.mask[i] = e.ids[i] != Vocab::kPad ? 1 : 0;
    return e;
}

/// Token strings for every id that is not PAD/BOS/EOS.
inline Tokens decode(const Vocab& vocab, const std::vector<TokenId>& ids) {
    Tokens out;
    for (TokenId id : ids)
        if (!Vocab::is_special(id)) out.push_back(vocab.token(id));
    return out;
}

using NGram = std::vector<std::string>;
using NGramMap = std::map<NGram, int>;

constexpr int kMaxNGram = 4;

/// Counts for orders 1..max_n; `order(n)` is empty for n > max_n.
struct NGramCounts {
    std::array<NGramMap, kMaxNGram> by_order;

    const NGramMap& order(int n) const { return by_order.at(static_cast<std::size_t>(n - 1)); }
    NGramMap& order(int n) { return by_order.at(static_cast<std::size_t>(n - 1)); }

    int total(int n) const {
        int s = 0;
        for (const auto& [g, c] : order(n)) s += c;
        return s;
    }
};

inline NGramCounts ngrams(const Tokens& tokens, int max_n = kMaxNGram) {
    if (max_n < 1 || max_n > kMaxNGram) throw Error(Errc::InvalidConfig, "max_n must be in 1..4");
    NGramCounts out;
    for (int n = 1; n <= max_n; ++n) {
        if (tokens.size() < static_cast<std::size_t>(n)) continue;
        auto& m = out.order(n);
        for (std::size_t i = 0; i + n <= tokens.size(); ++i)
            ++m[NGram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

} // namespace avd2
