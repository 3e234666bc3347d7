#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"
#include "avd2/metrics.hpp"

namespace avd2::report {

/// One table row. BLEU, METEOR and ROUGE-L print as percentages; CIDEr-D
/// (stored on a 0..10 scale) prints ×10, matching the usual captioning tables.
struct Row {
    std::string framework;
    std::string dataset;
    metrics::ScoreReport scores;

    /// "Framework/Dataset"; a label without '/' has dataset "-".
    static Row from_label(const std::string& label, const metrics::ScoreReport& s) {
        const auto slash = label.find('/');
        if (slash == std::string::npos) return {label, "-", s};
        return {label.substr(0, slash), label.substr(slash + 1), s};
    }

    std::array<std::string, 7> cells() const {
        auto f = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.1f", v);
            return std::string(buf);
        };
        return {f(scores.b1 * 100), f(scores.b2 * 100), f(scores.b3 * 100),    f(scores.b4 * 100),
                f(scores.cider_d * 10), f(scores.meteor * 100), f(scores.rouge_l * 100)};
    }
};

inline const std::array<std::string, 9>& columns() {
    static const std::array<std::string, 9> c{"Framework", "Dataset", "B1", "B2", "B3", "B4", "C", "M", "R"};
    return c;
}

/// Aligned text table: text columns left-aligned, metric columns
/// right-aligned, single-space separated.
inline std::string render_table(const std::vector<Row>& rows) {
    if (rows.empty()) throw Error(Errc::MalformedReport, "report needs at least one row");
    std::vector<std::array<std::string, 9>> grid;
    grid.push_back(columns());
    for (const auto& r : rows) {
        const auto c = r.cells();
        grid.push_back({r.framework, r.dataset, c[0], c[1], c[2], c[3], c[4], c[5], c[6]});
    }
    std::array<std::size_t, 9> width{};
    for (const auto& g : grid)
        for (std::size_t i = 0; i < 9; ++i) width[i] = std::max(width[i], g[i].size());

    std::string out;
    for (const auto& g : grid) {
        std::string line;
        for (std::size_t i = 0; i < 9; ++i) {
            if (i) line += ' ';
            const std::string pad(width[i] - g[i].size(), ' ');
            line += i < 2 ? g[i] + pad : pad + g[i];
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + '\n';
    }
    return out;
}

inline nlohmann::json table_json(const std::vector<Row>& rows) {
    nlohmann::json j;
    j["columns"] = columns();
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        const auto c = r.cells();
        j["rows"].push_back({{"Framework", r.framework},
                             {"Dataset", r.dataset},
                             {"B1", c[0]},
                             {"B2", c[1]},
                             {"B3", c[2]},
                             {"B4", c[3]},
                             {"C", c[4]},
                             {"M", c[5]},
                             {"R", c[6]}});
    }
    return j;
}

} // namespace avd2::report
