#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"
#include "avd2/matrix.hpp"
#include "avd2/rng.hpp"
#include "avd2/textproc.hpp"

namespace avd2::data {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// JSON Lines

inline std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    std::vector<json> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw Error(Errc::MissingField, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

inline void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    for (const auto& r : rows) out << r.dump() << '\n';
    if (!out) throw Error(Errc::Io, "write failed for " + path.string());
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(Errc::MissingField, path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Annotation restructuring

struct RawAnnotation {
    std::string id;
    std::string texts;
    std::string causes;
    std::string measures;

    /// Accepts exactly the keys id, texts, causes, measures (all strings).
    static RawAnnotation from_json(const json& j) {
        if (!j.is_object()) throw Error(Errc::MissingField, "annotation must be a JSON object");
        static constexpr std::array<std::string_view, 4> keys{"id", "texts", "causes", "measures"};
        for (const auto& [k, v] : j.items())
            if (std::find(keys.begin(), keys.end(), k) == keys.end())
                throw Error(Errc::UnknownField, "unexpected annotation key '" + k + "'");
        auto field = [&](std::string_view k) {
            const std::string key(k);
            if (!j.contains(key) || !j[key].is_string())
                throw Error(Errc::MissingField, "annotation " + (j.contains("id") ? j["id"].dump() : std::string("?")) +
                                                    " lacks string field '" + key + "'");
            return j[key].get<std::string>();
        };
        return {field("id"), field("texts"), field("causes"), field("measures")};
    }

    json to_json() const { return {{"id", id}, {"texts", texts}, {"causes", causes}, {"measures", measures}}; }
};

constexpr std::string_view kMergeDelimiter = "; ";

struct Sample {
    std::string id;
    Caption description;
    Caption avoidance;
    std::string features_path;

    const Caption& caption(Role r) const { return r == Role::Description ? description : avoidance; }

    json to_json() const { return {{"id", id}, {"description", description.raw}, {"avoidance", avoidance.raw}}; }

    static Sample from_json(const json& j) {
        for (const char* k : {"id", "description", "avoidance"})
            if (!j.contains(k) || !j[k].is_string())
                throw Error(Errc::MissingField, std::string("sample lacks string field '") + k + "'");
        Sample s;
        s.id = j["id"].get<std::string>();
        s.description = Caption(j["description"].get<std::string>(), Role::Description);
        s.avoidance = Caption(j["avoidance"].get<std::string>(), Role::Avoidance);
        if (j.contains("features_path") && j["features_path"].is_string())
            s.features_path = j["features_path"].get<std::string>();
        return s;
    }
};

struct RestructureResult {
    std::vector<Sample> samples;
    int empty_avoidance = 0; ///< validation warnings: records whose measures are empty
};

/// description = texts + "; " + causes, avoidance = measures; order kept.
inline RestructureResult restructure(const std::vector<RawAnnotation>& raw) {
    RestructureResult out;
    std::unordered_set<std::string> seen;
    for (const auto& r : raw) {
        if (r.id.empty()) throw Error(Errc::MissingField, "annotation with empty id");
        if (!seen.insert(r.id).second) throw Error(Errc::DuplicateId, "duplicate annotation id '" + r.id + "'");
        Sample s;
        s.id = r.id;
        s.description = Caption(r.texts + std::string(kMergeDelimiter) + r.causes, Role::Description);
        s.avoidance = Caption(r.measures, Role::Avoidance);
        if (r.measures.empty()) ++out.empty_avoidance;
        out.samples.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature files

struct FeatureClip {
    std::string id;
    std::uint32_t frames = 0; ///< T
    std::uint32_t dim = 0;    ///< D
    std::vector<float> values; ///< T×D row-major

    float at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }

    Matrix to_matrix() const {
        Matrix m(frames, dim);
        for (std::size_t i = 0; i < values.size(); ++i) m.data()[i] = static_cast<double>(values[i]);
        return m;
    }

    /// Temporal mean of the frames, 1×D.
    std::vector<double> pooled() const {
        std::vector<double> out(dim, 0.0);
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t d = 0; d < dim; ++d) out[d] += static_cast<double>(at(t, d));
        for (double& v : out) v /= static_cast<double>(frames);
        return out;
    }

    friend bool operator==(const FeatureClip&, const FeatureClip&) = default;
};

constexpr std::array<char, 4> kFeatureMagic{'A', 'V', 'D', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace detail

/// Serialized bytes: "AVDF" | u32 version | u32 id_len | id | u32 T | u32 D |
/// T·D float32, all little-endian.
inline std::string encode_features(const FeatureClip& clip) {
    if (clip.frames < 1 || clip.dim < 1 || clip.values.size() != std::size_t{clip.frames} * clip.dim)
        throw Error(Errc::InvalidConfig, "feature clip '" + clip.id + "' has inconsistent shape");
    for (float v : clip.values)
        if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, "feature clip '" + clip.id + "' has a non-finite value");
    std::string buf(kFeatureMagic.begin(), kFeatureMagic.end());
    detail::put_u32(buf, kFeatureVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(clip.id.size()));
    buf += clip.id;
    detail::put_u32(buf, clip.frames);
    detail::put_u32(buf, clip.dim);
    buf.reserve(buf.size() + clip.values.size() * 4);
    for (float v : clip.values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
    return buf;
}

inline FeatureClip decode_features(std::string_view bytes, const std::string& origin = "<memory>") {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    auto need = [&](std::size_t upto) {
        if (n < upto) throw Error(Errc::TruncatedFile, origin + ": file ends early");
    };
    need(4);
    if (std::memcmp(p, kFeatureMagic.data(), 4) != 0) throw Error(Errc::BadMagic, origin + ": not an AVDF file");
    need(12);
    if (const auto v = detail::get_u32(p + 4); v != kFeatureVersion)
        throw Error(Errc::BadVersion, origin + ": unsupported version " + std::to_string(v));
    const std::size_t id_len = detail::get_u32(p + 8);
    need(12 + id_len + 8);
    FeatureClip clip;
    clip.id.assign(bytes.substr(12, id_len));
    std::size_t off = 12 + id_len;
    clip.frames = detail::get_u32(p + off);
    clip.dim = detail::get_u32(p + off + 4);
    off += 8;
    if (clip.frames < 1 || clip.dim < 1) throw Error(Errc::InvalidConfig, origin + ": zero-sized feature clip");
    const std::size_t count = std::size_t{clip.frames} * clip.dim;
    need(off + count * 4);
    clip.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        clip.values[i] = std::bit_cast<float>(detail::get_u32(p + off + 4 * i));
        if (!std::isfinite(clip.values[i]))
            throw Error(Errc::NonFiniteValue, origin + ": non-finite value at index " + std::to_string(i));
    }
    return clip;
}

inline void write_features(const FeatureClip& clip, const fs::path& path) {
    const auto bytes = encode_features(clip);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::Io, "write failed for " + path.string());
}

inline FeatureClip read_features(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_features(ss.str(), path.string());
}

/// id → path relative to the index file's directory.
using FeatureIndex = std::map<std::string, std::string>;

inline FeatureIndex read_index(const fs::path& path) {
    const json j = read_json(path);
    if (!j.is_object()) throw Error(Errc::MissingField, path.string() + ": feature index must be a JSON object");
    FeatureIndex idx;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string()) throw Error(Errc::MissingField, path.string() + ": path for '" + k + "' is not a string");
        idx[k] = v.get<std::string>();
    }
    return idx;
}

inline void write_index(const fs::path& path, const FeatureIndex& idx) { write_json(path, json(idx)); }

/// Every clip named by an index file, paths resolved against its directory.
inline std::vector<FeatureClip> load_indexed(const fs::path& index_path) {
    const auto idx = read_index(index_path);
    std::vector<FeatureClip> clips;
    for (const auto& [id, rel] : idx) clips.push_back(read_features(index_path.parent_path() / rel));
    return clips;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationReport {
    int missing_features = 0;
    int corrupt_features = 0;
    int nonfinite_features = 0;
    int empty_captions = 0;

    bool ok() const { return missing_features == 0 && corrupt_features == 0 && nonfinite_features == 0; }

    json to_json() const {
        return {{"missing_features", missing_features},
                {"corrupt_features", corrupt_features},
                {"nonfinite_features", nonfinite_features},
                {"empty_captions", empty_captions},
                {"ok", ok()}};
    }
};

inline ValidationReport validate_dataset(const std::vector<Sample>& samples, const FeatureIndex& index,
                                         const fs::path& base_dir) {
    ValidationReport rep;
    for (const auto& s : samples) {
        if (s.description.tokens.empty()) ++rep.empty_captions;
        if (s.avoidance.tokens.empty()) ++rep.empty_captions;
        auto it = index.find(s.id);
        if (it == index.end() || !fs::exists(base_dir / it->second)) {
            ++rep.missing_features;
            continue;
        }
        try {
            (void)read_features(base_dir / it->second);
        } catch (const Error& e) {
            if (e.code() == Errc::NonFiniteValue) ++rep.nonfinite_features;
            else ++rep.corrupt_features;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Synthetic accident corpus

struct SynthConfig {
    int n_clips = 500;
    int frames = 8;       ///< T
    int dim = 16;         ///< D, at least the number of signal channels
    double noise_std = 0.1;
    std::uint64_t seed = 7;

    void validate() const;
};

namespace synth {

inline const std::vector<std::string>& actors() {
    static const std::vector<std::string> v{"car", "truck", "cyclist", "bus", "motorcycle"};
    return v;
}

inline const std::vector<std::string>& actions() {
    static const std::vector<std::string> v{"brakes suddenly", "turns left across our path", "merges into our lane",
                                            "stops at the crossing", "overtakes the ego car"};
    return v;
}

struct CauseTemplate {
    std::string cause;
    std::string measure;
};

inline const std::vector<CauseTemplate>& causes() {
    static const std::vector<CauseTemplate> v{
        {"the driver is speeding", "slow down and keep distance"},
        {"the driver gives no signal", "watch for signals and yield"},
        {"the driver ignores the right of way", "yield at the crossing"},
        {"the road is wet", "slow down on the wet road"},
        {"the view is blocked by parked cars", "watch for hidden hazards"},
        {"the driver is distracted", "stay alert and sound the horn"},
    };
    return v;
}

/// Words the captions are rendered from that are not factor values.
inline const std::vector<std::string>& glue_words() {
    static const std::vector<std::string> v{"the"};
    return v;
}

inline std::size_t signal_channels() { return actors().size() + actions().size() + causes().size(); }

/// Every word a rendered caption may contain.
inline std::set<std::string> word_set() {
    std::set<std::string> w;
    auto add = [&](const std::string& phrase) {
        for (auto& t : normalize(phrase)) w.insert(t);
    };
    for (const auto& a : actors()) add(a);
    for (const auto& a : actions()) add(a);
    for (const auto& c : causes()) {
        add(c.cause);
        add(c.measure);
    }
    for (const auto& g : glue_words()) w.insert(g);
    return w;
}

struct Template {
    std::size_t actor = 0, action = 0, cause = 0;

    friend bool operator==(const Template&, const Template&) = default;

    std::string texts() const { return "The " + actors()[actor] + " " + actions()[action]; }
    std::string causes_text() const {
        std::string c = synth::causes()[cause].cause;
        c[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(c[0])));
        return c;
    }
    std::string measures() const { return synth::causes()[cause].measure; }

    /// One-hot signal: actor block, action block, cause block, zero padding.
    std::vector<double> signal(std::size_t dim) const {
        std::vector<double> s(dim, 0.0);
        s[actor] = 1.0;
        s[actors().size() + action] = 1.0;
        s[actors().size() + actions().size() + cause] = 1.0;
        return s;
    }
};

/// Nearest one-hot decoding of a (possibly noisy) signal vector.
inline Template decode_signal(std::span<const double> v) {
    auto block_argmax = [&](std::size_t off, std::size_t n) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (v[off + i] > v[off + best]) best = i;
        return best;
    };
    Template t;
    t.actor = block_argmax(0, actors().size());
    t.action = block_argmax(actors().size(), actions().size());
    t.cause = block_argmax(actors().size() + actions().size(), causes().size());
    return t;
}

} // namespace synth

inline void SynthConfig::validate() const {
    if (n_clips < 1) throw Error(Errc::InvalidConfig, "n_clips must be >= 1");
    if (!(noise_std >= 0.0)) throw Error(Errc::InvalidConfig, "noise_std must be >= 0");
    if (frames < 1) throw Error(Errc::InvalidConfig, "frames must be >= 1");
    if (dim < static_cast<int>(synth::signal_channels()))
        throw Error(Errc::InvalidConfig, "dim must be >= " + std::to_string(synth::signal_channels()));
}

struct Splits {
    std::vector<std::string> train, val, test;

    const std::vector<std::string>& get(std::string_view name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw Error(Errc::InvalidConfig, "unknown split '" + std::string(name) + "'");
    }

    json to_json() const { return {{"train", train}, {"val", val}, {"test", test}}; }

    static Splits from_json(const json& j) {
        Splits s;
        for (const char* k : {"train", "val", "test"})
            if (!j.contains(k) || !j[k].is_array()) throw Error(Errc::MissingField, std::string("splits lack '") + k + "'");
        j["train"].get_to(s.train);
        j["val"].get_to(s.val);
        j["test"].get_to(s.test);
        return s;
    }
};

struct SynthCorpus {
    std::vector<RawAnnotation> annotations;
    std::vector<Sample> samples;
    std::vector<FeatureClip> clips;
    std::vector<synth::Template> templates;
    Splits splits;
};

inline std::string clip_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%04d", i);
    return buf;
}

/// Deterministic corpus: each clip draws (actor, action, cause), its frames
/// carry the one-hot template signal plus Gaussian noise, and its captions are
/// rendered from the same factors.
inline SynthCorpus synth_corpus(const SynthConfig& cfg) {
    cfg.validate();
    SynthCorpus c;
    Rng factors(derive_seed(cfg.seed, "synth/factors"));
    for (int i = 0; i < cfg.n_clips; ++i) {
        synth::Template t;
        t.actor = factors.below(synth::actors().size());
        t.action = factors.below(synth::actions().size());
        t.cause = factors.below(synth::causes().size());
        const auto id = clip_id(i);

        RawAnnotation raw{id, t.texts(), t.causes_text(), t.measures()};
        c.annotations.push_back(raw);

        FeatureClip clip;
        clip.id = id;
        clip.frames = static_cast<std::uint32_t>(cfg.frames);
        clip.dim = static_cast<std::uint32_t>(cfg.dim);
        clip.values.resize(std::size_t{clip.frames} * clip.dim);
        const auto sig = t.signal(clip.dim);
        Rng noise(hash_combine(derive_seed(cfg.seed, "synth/noise"), static_cast<std::uint64_t>(i)));
        for (std::size_t f = 0; f < clip.frames; ++f)
            for (std::size_t d = 0; d < clip.dim; ++d)
                clip.values[f * clip.dim + d] = static_cast<float>(sig[d] + cfg.noise_std * noise.normal());
        c.clips.push_back(std::move(clip));
        c.templates.push_back(t);
    }
    c.samples = restructure(c.annotations).samples;
    for (auto& s : c.samples) s.features_path = "features/" + s.id + ".avdf";

    std::vector<std::string> order;
    for (const auto& s : c.samples) order.push_back(s.id);
    Rng split_rng(derive_seed(cfg.seed, "synth/split"));
    split_rng.shuffle(order.begin(), order.end());
    const auto n = order.size();
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
    for (std::size_t i = 0; i < n; ++i)
        (i < n_train ? c.splits.train : i < n_train + n_val ? c.splits.val : c.splits.test).push_back(order[i]);
    return c;
}

/// Layout: annotations.jsonl, samples.jsonl, splits.json,
/// features/<id>.avdf, features/index.json.
inline void write_corpus(const SynthCorpus& c, const fs::path& dir) {
    fs::create_directories(dir / "features");
    std::vector<json> raw, samples;
    for (const auto& a : c.annotations) raw.push_back(a.to_json());
    for (const auto& s : c.samples) samples.push_back(s.to_json());
    write_jsonl(dir / "annotations.jsonl", raw);
    write_jsonl(dir / "samples.jsonl", samples);
    write_json(dir / "splits.json", c.splits.to_json());
    FeatureIndex idx;
    for (const auto& clip : c.clips) {
        write_features(clip, dir / "features" / (clip.id + ".avdf"));
        idx[clip.id] = clip.id + ".avdf";
    }
    write_index(dir / "features" / "index.json", idx);
}

/// A corpus directory as laid out by `write_corpus`.
struct CorpusDir {
    fs::path root;
    std::vector<Sample> samples;
    FeatureIndex index;
    Splits splits;

    static CorpusDir load(const fs::path& root) {
        CorpusDir d;
        d.root = root;
        for (const auto& j : read_jsonl(root / "samples.jsonl")) d.samples.push_back(Sample::from_json(j));
        d.index = read_index(root / "features" / "index.json");
        d.splits = Splits::from_json(read_json(root / "splits.json"));
        for (auto& s : d.samples)
            if (auto it = d.index.find(s.id); it != d.index.end()) s.features_path = "features/" + it->second;
        return d;
    }

    fs::path features_dir() const { return root / "features"; }

    std::vector<const Sample*> split(std::string_view name) const {
        std::map<std::string, const Sample*> by_id;
        for (const auto& s : samples) by_id[s.id] = &s;
        std::vector<const Sample*> out;
        for (const auto& id : splits.get(name)) {
            auto it = by_id.find(id);
            if (it == by_id.end()) throw Error(Errc::MissingField, "split names unknown sample '" + id + "'");
            out.push_back(it->second);
        }
        return out;
    }

    FeatureClip features(const Sample& s) const {
        auto it = index.find(s.id);
        if (it == index.end()) throw Error(Errc::Io, "no feature file indexed for '" + s.id + "'");
        return read_features(features_dir() / it->second);
    }
};

} // namespace avd2::data
