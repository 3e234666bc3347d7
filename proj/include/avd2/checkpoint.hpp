#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "avd2/error.hpp"
#include "avd2/model.hpp"
#include "avd2/textproc.hpp"

namespace avd2 {

struct Checkpoint {
    ModelParams params;
    Vocab vocab;
    nlohmann::json meta = nlohmann::json::object(); ///< free-form (role, training summary)
};

// Layout: one line of compact JSON
//   {"format":"avd2-checkpoint","config":{...},"tensors":[{"name","shape","offset"}],"vocab":[...],"meta":{...}}
// then '\n', then every tensor as little-endian float64, row-major. Offsets
// count bytes from the first payload byte.

inline std::string encode_checkpoint(const Checkpoint& ck) {
    nlohmann::json header;
    header["format"] = "avd2-checkpoint";
    header["config"] = ck.params.config;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < kTensorCount; ++i) {
        const auto& m = ck.params.tensors[i];
        header["tensors"].push_back({{"name", kTensorNames[i]}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
        offset += m.size() * 8;
    }
    header["vocab"] = ck.vocab.to_json();
    header["meta"] = ck.meta;

    std::string out = header.dump();
    out.push_back('\n');
    out.reserve(out.size() + offset);
    for (const auto& m : ck.params.tensors)
        for (double v : m.data()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
        }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw Error(Errc::MalformedCheckpoint, origin + ": missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::MalformedCheckpoint, origin + ": " + e.what());
    }
    if (header.value("format", "") != "avd2-checkpoint")
        throw Error(Errc::MalformedCheckpoint, origin + ": not an avd2 checkpoint");

    Checkpoint ck;
    try {
        ck.params = ModelParams::zeros(header.at("config").get<ModelConfig>());
        if (header.contains("vocab")) ck.vocab = Vocab::from_json(header["vocab"]);
        if (header.contains("meta")) ck.meta = header["meta"];
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::MalformedCheckpoint, origin + ": " + e.what());
    }
    const auto& manifest = header.at("tensors");
    if (!manifest.is_array() || manifest.size() != kTensorCount)
        throw Error(Errc::MalformedCheckpoint, origin + ": tensor manifest has the wrong length");

    const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
    const std::size_t payload_size = bytes.size() - nl - 1;
    std::size_t expected = 0;
    for (std::size_t i = 0; i < kTensorCount; ++i) {
        const auto& e = manifest[i];
        auto& m = ck.params.tensors[i];
        if (e.at("name").get<std::string>() != kTensorNames[i] || e.at("shape").at(0).get<std::size_t>() != m.rows() ||
            e.at("shape").at(1).get<std::size_t>() != m.cols())
            throw Error(Errc::MalformedCheckpoint, origin + ": manifest entry " + std::to_string(i) + " mismatches config");
        const auto off = e.at("offset").get<std::uint64_t>();
        if (off + m.size() * 8 > payload_size) throw Error(Errc::TruncatedFile, origin + ": tensor payload ends early");
        for (std::size_t k = 0; k < m.size(); ++k) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload[off + 8 * k + b]) << (8 * b);
            m.data()[k] = std::bit_cast<double>(bits);
        }
        expected += m.size() * 8;
    }
    if (payload_size != expected) throw Error(Errc::MalformedCheckpoint, origin + ": trailing bytes after tensor payload");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ck);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::Io, "write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str(), path.string());
}

} // namespace avd2
