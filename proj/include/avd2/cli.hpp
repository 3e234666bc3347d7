#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "avd2/checkpoint.hpp"
#include "avd2/data.hpp"
#include "avd2/decode.hpp"
#include "avd2/error.hpp"
#include "avd2/metrics.hpp"
#include "avd2/model.hpp"
#include "avd2/report.hpp"
#include "avd2/scst.hpp"
#include "avd2/train.hpp"

namespace avd2::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum Status : int { kOk = 0, kIoError = 1, kValidationError = 2, kNumericError = 3 };

inline int status_for(Errc e) {
    switch (e) {
    case Errc::Io: return kIoError;
    case Errc::NumericFailure: return kNumericError;
    default: return kValidationError;
    }
}

/// Primary results go to `out`; progress, echoed configuration and timestamps
/// go to `log`.
struct Streams {
    std::ostream& out;
    std::ostream& log;

    std::ostream& stamp() const {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        return log << '[' << std::put_time(&tm, "%H:%M:%S") << "] ";
    }
};

// ---------------------------------------------------------------------------
// Options

struct IngestOptions {
    std::string in, out;
};

struct SynthOptions {
    std::string out = "corpus";
    data::SynthConfig synth{};
};

struct ModelOptions {
    int d_model = 64;
    int heads = 2;
    int max_len = 24;
    int min_count = 1;
    std::string role = "description";
};

struct TrainMleOptions {
    std::string data = "corpus";
    std::string out = "mle.ckpt";
    std::string log_path;
    std::uint64_t seed = 1;
    int epochs = 30;
    int batch = 16;
    double lr = 2e-3;
    ModelOptions model{};
};

struct TrainScstOptions {
    std::string data = "corpus";
    std::string init = "mle.ckpt";
    std::string out = "scst.ckpt";
    std::string log_path;
    std::uint64_t seed = 1;
    int epochs = 10;
    int batch = 16;
    int max_len = 24;
    double lr = 5e-5;
    double temperature = 1.0;
};

struct DecodeOptions {
    std::string data = "corpus";
    std::string ckpt = "scst.ckpt";
    std::string out = "hyps.jsonl";
    std::string split = "test";
    std::uint64_t seed = 1;
    int max_len = 24;
    bool sample = false;
    double temperature = 1.0;
};

struct ScoreOptions {
    std::string hyps, refs;
    std::string out;
};

struct FidOptions {
    std::string a, b;
    std::string out;
};

struct ReportOptions {
    std::vector<std::string> reports;
    std::vector<std::string> labels;
    std::string out;
};

struct ValidateOptions {
    std::string data = "corpus";
};

// ---------------------------------------------------------------------------
// Commands

inline int cmd_ingest(const IngestOptions& o, const Streams& io) {
    std::vector<data::RawAnnotation> raw;
    for (const auto& j : data::read_jsonl(o.in)) raw.push_back(data::RawAnnotation::from_json(j));
    const auto res = data::restructure(raw);
    std::vector<json> rows;
    for (const auto& s : res.samples) rows.push_back(s.to_json());
    data::write_jsonl(o.out, rows);
    io.stamp() << "ingested " << rows.size() << " annotations; " << res.empty_avoidance
               << " with empty avoidance\n";
    io.out << "wrote " << rows.size() << " samples to " << o.out << '\n';
    return kOk;
}

inline int cmd_synth(const SynthOptions& o, const Streams& io) {
    const auto corpus = data::synth_corpus(o.synth);
    data::write_corpus(corpus, o.out);
    io.out << "wrote " << corpus.samples.size() << " clips to " << o.out << " (train " << corpus.splits.train.size()
           << ", val " << corpus.splits.val.size() << ", test " << corpus.splits.test.size() << ")\n";
    return kOk;
}

inline bool check_corpus(const data::CorpusDir& corpus, const Streams& io) {
    const auto rep = data::validate_dataset(corpus.samples, corpus.index, corpus.features_dir());
    if (!rep.ok()) io.log << "dataset validation failed: " << rep.to_json().dump() << '\n';
    return rep.ok();
}

inline int cmd_train_mle(const TrainMleOptions& o, const Streams& io) {
    const auto corpus = data::CorpusDir::load(o.data);
    if (!check_corpus(corpus, io)) return kValidationError;
    const Role role = parse_role(o.model.role);

    std::vector<Caption> captions;
    for (const auto* s : corpus.split("train")) captions.push_back(s->caption(role));
    const Vocab vocab = build_vocab(captions, o.model.min_count);
    const auto train = make_examples(corpus, "train", role, vocab, static_cast<std::size_t>(o.model.max_len));
    if (train.empty()) throw Error(Errc::EmptyDataset, "training split is empty");

    ModelConfig mc;
    mc.d_model = o.model.d_model;
    mc.n_heads = o.model.heads;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.max_len = o.model.max_len;
    mc.feature_dim = static_cast<int>(train.front().features.cols());
    mc.seed = derive_seed(o.seed, "model");
    ModelParams params = init_params(mc);
    io.stamp() << "train-mle: " << train.size() << " examples, vocab " << vocab.size() << ", "
               << params.parameter_count() << " parameters\n";

    MleConfig cfg{o.epochs, o.batch, derive_seed(o.seed, "mle"), AdamConfig{.lr = o.lr}};
    const auto res = train_mle(params, train, cfg);
    std::vector<json> log_rows;
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
        io.stamp() << "epoch " << e + 1 << " loss " << res.epoch_loss[e] << '\n';
        log_rows.push_back({{"epoch", e + 1}, {"loss", res.epoch_loss[e]}});
    }
    if (!o.log_path.empty()) data::write_jsonl(o.log_path, log_rows);

    Checkpoint ck{params, vocab, {{"role", std::string(to_string(role))}, {"stage", "mle"}, {"epoch_loss", res.epoch_loss}}};
    save_checkpoint(ck, o.out);
    io.out << "saved " << o.out << '\n';
    return kOk;
}

inline Role checkpoint_role(const Checkpoint& ck) {
    return ck.meta.contains("role") ? parse_role(ck.meta["role"].get<std::string>()) : Role::Description;
}

inline int cmd_train_scst(const TrainScstOptions& o, const Streams& io) {
    auto ck = load_checkpoint(o.init);
    const auto corpus = data::CorpusDir::load(o.data);
    if (!check_corpus(corpus, io)) return kValidationError;
    const Role role = checkpoint_role(ck);
    const auto train = make_examples(corpus, "train", role, ck.vocab, static_cast<std::size_t>(ck.params.config.max_len));
    std::vector<Tokens> refs;
    for (const auto& ex : train) refs.push_back(ex.reference);
    const metrics::IdfTable idf(refs);

    scst::ScstConfig cfg;
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch;
    cfg.seed = derive_seed(o.seed, "scst");
    cfg.max_len = static_cast<std::size_t>(o.max_len);
    cfg.temperature = o.temperature;
    cfg.adam.lr = o.lr;
    const auto res = scst::scst_train(ck.params, train, idf, ck.vocab, cfg);

    std::vector<json> rows;
    for (std::size_t e = 0; e < res.epochs.size(); ++e) {
        io.stamp() << "epoch " << e + 1 << ' ' << res.epochs[e].to_json().dump() << '\n';
        rows.push_back(res.epochs[e].to_json());
    }
    data::write_jsonl(o.log_path.empty() ? o.out + ".log.jsonl" : o.log_path, rows);
    ck.meta["stage"] = "scst";
    save_checkpoint(ck, o.out);
    io.out << "saved " << o.out << '\n';
    return kOk;
}

inline int cmd_decode(const DecodeOptions& o, const Streams& io) {
    const auto ck = load_checkpoint(o.ckpt);
    const auto corpus = data::CorpusDir::load(o.data);
    const Role role = checkpoint_role(ck);
    const std::uint64_t base = derive_seed(o.seed, "decode");
    std::vector<json> rows;
    for (const auto* s : corpus.split(o.split)) {
        const Matrix feats = corpus.features(*s).to_matrix();
        const auto dec = o.sample ? decode_sample(ck.params, feats, static_cast<std::size_t>(o.max_len),
                                                  hash_combine(base, s->id), o.temperature)
                                  : decode_greedy(ck.params, feats, static_cast<std::size_t>(o.max_len));
        rows.push_back({{"id", s->id}, {"role", std::string(to_string(role))}, {"text", join(decode(ck.vocab, dec.content()))}});
    }
    data::write_jsonl(o.out, rows);
    io.out << "wrote " << rows.size() << " hypotheses to " << o.out << '\n';
    return kOk;
}

/// Reference text for (id, role) from a JSONL file in either the
/// {"id","role","text"} or the {"id","description","avoidance"} layout.
inline std::map<std::pair<std::string, Role>, std::string> load_references(const fs::path& path) {
    std::map<std::pair<std::string, Role>, std::string> refs;
    for (const auto& j : data::read_jsonl(path)) {
        if (!j.contains("id") || !j["id"].is_string()) throw Error(Errc::MissingField, "reference lacks 'id'");
        const auto id = j["id"].get<std::string>();
        if (j.contains("text")) {
            refs[{id, parse_role(j.value("role", "description"))}] = j["text"].get<std::string>();
        } else {
            const auto s = data::Sample::from_json(j);
            refs[{id, Role::Description}] = s.description.raw;
            refs[{id, Role::Avoidance}] = s.avoidance.raw;
        }
    }
    return refs;
}

inline int cmd_score(const ScoreOptions& o, const Streams& io) {
    const auto refs = load_references(o.refs);
    std::vector<Caption> hyps, matched;
    for (const auto& j : data::read_jsonl(o.hyps)) {
        for (const char* k : {"id", "text"})
            if (!j.contains(k) || !j[k].is_string())
                throw Error(Errc::MissingField, std::string("hypothesis lacks string field '") + k + "'");
        const Role role = parse_role(j.value("role", "description"));
        const auto id = j["id"].get<std::string>();
        auto it = refs.find({id, role});
        if (it == refs.end()) throw Error(Errc::LengthMismatch, "no reference for hypothesis '" + id + "'");
        hyps.emplace_back(j["text"].get<std::string>(), role);
        matched.emplace_back(it->second, role);
    }
    if (hyps.empty()) throw Error(Errc::EmptyCorpus, "no hypotheses to score");
    std::vector<Tokens> ref_tokens;
    for (const auto& c : matched) ref_tokens.push_back(c.tokens);
    const metrics::IdfTable idf(ref_tokens);
    const auto rep = metrics::score_all(hyps, matched, idf);
    if (!o.out.empty()) data::write_json(o.out, rep.to_json());
    char buf[256];
    std::snprintf(buf, sizeof buf, "B1 %.4f\nB2 %.4f\nB3 %.4f\nB4 %.4f\nC %.4f\nM %.4f\nR %.4f\n", rep.b1, rep.b2,
                  rep.b3, rep.b4, rep.cider_d, rep.meteor, rep.rouge_l);
    io.out << buf;
    return kOk;
}

struct FrechetPair {
    double fid = 0.0;
    double vid = 0.0;
};

/// FID over every frame vector; VID over per-clip temporal means.
inline FrechetPair frechet_pair(const std::vector<data::FeatureClip>& a, const std::vector<data::FeatureClip>& b) {
    auto frames = [](const std::vector<data::FeatureClip>& clips) {
        if (clips.empty()) throw Error(Errc::TooFewSamples, "empty feature set");
        std::size_t rows = 0;
        const std::size_t dim = clips.front().dim;
        for (const auto& c : clips) {
            if (c.dim != dim) throw Error(Errc::DimensionMismatch, "feature dims differ within a set");
            rows += c.frames;
        }
        Matrix m(rows, dim);
        std::size_t r = 0;
        for (const auto& c : clips)
            for (std::size_t t = 0; t < c.frames; ++t, ++r)
                for (std::size_t d = 0; d < dim; ++d) m(r, d) = static_cast<double>(c.at(t, d));
        return m;
    };
    auto pooled = [](const std::vector<data::FeatureClip>& clips) {
        Matrix m(clips.size(), clips.empty() ? 0 : clips.front().dim);
        for (std::size_t i = 0; i < clips.size(); ++i) {
            const auto p = clips[i].pooled();
            std::copy(p.begin(), p.end(), m.row(i).begin());
        }
        return m;
    };
    FrechetPair r;
    r.fid = metrics::frechet_distance(metrics::gaussian_stats(frames(a)), metrics::gaussian_stats(frames(b)));
    r.vid = metrics::frechet_distance(metrics::gaussian_stats(pooled(a)), metrics::gaussian_stats(pooled(b)));
    return r;
}

inline int cmd_fid(const FidOptions& o, const Streams& io) {
    const auto r = frechet_pair(data::load_indexed(o.a), data::load_indexed(o.b));
    if (!std::isfinite(r.fid) || !std::isfinite(r.vid)) throw Error(Errc::NumericFailure, "non-finite Fréchet distance");
    char buf[128];
    std::snprintf(buf, sizeof buf, "FID %.6f\nVID %.6f\n", r.fid, r.vid);
    io.out << buf;
    if (!o.out.empty()) data::write_json(o.out, {{"fid", r.fid}, {"vid", r.vid}});
    return kOk;
}

inline int cmd_report(const ReportOptions& o, const Streams& io) {
    if (o.reports.empty()) throw Error(Errc::MalformedReport, "no reports given");
    if (!o.labels.empty() && o.labels.size() != o.reports.size())
        throw Error(Errc::MalformedReport, "need one label per report");
    std::vector<report::Row> rows;
    for (std::size_t i = 0; i < o.reports.size(); ++i) {
        const auto label = o.labels.empty() ? fs::path(o.reports[i]).stem().string() : o.labels[i];
        rows.push_back(report::Row::from_label(label, metrics::ScoreReport::from_json(data::read_json(o.reports[i]))));
    }
    io.out << report::render_table(rows);
    const auto j = report::table_json(rows);
    if (o.out.empty()) io.out << j.dump() << '\n';
    else data::write_json(o.out, j);
    return kOk;
}

inline int cmd_validate(const ValidateOptions& o, const Streams& io) {
    const auto corpus = data::CorpusDir::load(o.data);
    const auto rep = data::validate_dataset(corpus.samples, corpus.index, corpus.features_dir());
    io.out << rep.to_json().dump() << '\n';
    return rep.ok() ? kOk : kValidationError;
}

// ---------------------------------------------------------------------------
// Argument handling

namespace detail {

/// Expand `--config FILE` (a JSON object of option names to values) into
/// flags placed before the user's own, so explicit flags win.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
    if (args.empty()) return args;
    std::string path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;
    const json cfg = data::read_json(path);
    if (!cfg.is_object()) throw Error(Errc::MissingField, "config file must hold a JSON object");
    std::vector<std::string> extra;
    for (const auto& [key, value] : cfg.items()) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (value.is_boolean()) {
            if (value.get<bool>()) extra.push_back(flag);
        } else if (value.is_array()) {
            extra.push_back(flag);
            for (const auto& v : value) extra.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        } else {
            extra.push_back(flag);
            extra.push_back(value.is_string() ? value.get<std::string>() : value.dump());
        }
    }
    args.insert(args.begin() + 1, extra.begin(), extra.end());
    return args;
}

} // namespace detail

/// Entry point; `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
    Streams io{out, log};
    CLI::App app{"Accident video description: SCST caption training and caption/feature metrics", "avd2"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON file of option defaults; flags override it");
    };

    IngestOptions ingest;
    auto* s_ingest = app.add_subcommand("ingest", "restructure raw texts/causes/measures annotations");
    s_ingest->add_option("--in", ingest.in, "raw annotation JSONL")->required();
    s_ingest->add_option("--out", ingest.out, "restructured JSONL")->required();
    add_config(s_ingest);

    SynthOptions synth;
    auto* s_synth = app.add_subcommand("synth", "generate the synthetic accident-caption corpus");
    s_synth->add_option("--out", synth.out, "output directory")->capture_default_str();
    s_synth->add_option("--seed", synth.synth.seed, "corpus seed")->capture_default_str();
    s_synth->add_option("--n-clips", synth.synth.n_clips, "number of clips")->capture_default_str();
    s_synth->add_option("--frames", synth.synth.frames, "frames per clip")->capture_default_str();
    s_synth->add_option("--dim", synth.synth.dim, "feature dimension")->capture_default_str();
    s_synth->add_option("--noise-std", synth.synth.noise_std, "feature noise")->capture_default_str();
    add_config(s_synth);

    TrainMleOptions mle;
    auto* s_mle = app.add_subcommand("train-mle", "teacher-forced cross-entropy training");
    s_mle->add_option("--data", mle.data, "corpus directory")->capture_default_str();
    s_mle->add_option("--out", mle.out, "checkpoint path")->capture_default_str();
    s_mle->add_option("--log", mle.log_path, "per-epoch loss JSONL");
    s_mle->add_option("--seed", mle.seed, "seed")->capture_default_str();
    s_mle->add_option("--epochs", mle.epochs, "epochs")->capture_default_str();
    s_mle->add_option("--batch", mle.batch, "batch size")->capture_default_str();
    s_mle->add_option("--lr", mle.lr, "Adam learning rate")->capture_default_str();
    s_mle->add_option("--max-len", mle.model.max_len, "maximum sequence length incl. BOS/EOS")->capture_default_str();
    s_mle->add_option("--d-model", mle.model.d_model, "model width")->capture_default_str();
    s_mle->add_option("--heads", mle.model.heads, "attention heads")->capture_default_str();
    s_mle->add_option("--min-count", mle.model.min_count, "vocabulary frequency threshold")->capture_default_str();
    s_mle->add_option("--role", mle.model.role, "caption task")
        ->check(CLI::IsMember({"description", "avoidance"}))
        ->capture_default_str();
    add_config(s_mle);

    TrainScstOptions sc;
    auto* s_scst = app.add_subcommand("train-scst", "self-critical sequence training from an MLE checkpoint");
    s_scst->add_option("--data", sc.data, "corpus directory")->capture_default_str();
    s_scst->add_option("--init", sc.init, "starting checkpoint")->capture_default_str();
    s_scst->add_option("--out", sc.out, "checkpoint path")->capture_default_str();
    s_scst->add_option("--log", sc.log_path, "per-epoch stats JSONL (default <out>.log.jsonl)");
    s_scst->add_option("--seed", sc.seed, "seed")->capture_default_str();
    s_scst->add_option("--epochs", sc.epochs, "epochs")->capture_default_str();
    s_scst->add_option("--batch", sc.batch, "batch size")->capture_default_str();
    s_scst->add_option("--max-len", sc.max_len, "maximum decode length")->capture_default_str();
    s_scst->add_option("--lr", sc.lr, "Adam learning rate")->capture_default_str();
    s_scst->add_option("--temperature", sc.temperature, "rollout temperature")->capture_default_str();
    add_config(s_scst);

    DecodeOptions dec;
    auto* s_dec = app.add_subcommand("decode", "write hypotheses for a split");
    s_dec->add_option("--data", dec.data, "corpus directory")->capture_default_str();
    s_dec->add_option("--ckpt", dec.ckpt, "checkpoint")->capture_default_str();
    s_dec->add_option("--out", dec.out, "hypotheses JSONL")->capture_default_str();
    s_dec->add_option("--split", dec.split, "split")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    s_dec->add_option("--seed", dec.seed, "seed for --sample")->capture_default_str();
    s_dec->add_option("--max-len", dec.max_len, "maximum decode length")->capture_default_str();
    s_dec->add_flag("--sample", dec.sample, "sample instead of greedy");
    s_dec->add_option("--temperature", dec.temperature, "sampling temperature")->capture_default_str();
    add_config(s_dec);

    ScoreOptions score;
    auto* s_score = app.add_subcommand("score", "BLEU/ROUGE-L/METEOR-lite/CIDEr-D for a hypothesis file");
    s_score->add_option("--hyps", score.hyps, "hypotheses JSONL")->required();
    s_score->add_option("--refs", score.refs, "references JSONL")->required();
    s_score->add_option("--out", score.out, "score report JSON");
    add_config(s_score);

    FidOptions fid;
    auto* s_fid = app.add_subcommand("fid", "Fréchet distances between two feature sets");
    s_fid->add_option("--a", fid.a, "first feature index.json")->required();
    s_fid->add_option("--b", fid.b, "second feature index.json")->required();
    s_fid->add_option("--out", fid.out, "JSON output");
    add_config(s_fid);

    ReportOptions rep;
    auto* s_rep = app.add_subcommand("report", "render score reports as a table");
    s_rep->add_option("--reports", rep.reports, "score report JSON files")
        ->required()
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    s_rep->add_option("--labels", rep.labels, "Framework/Dataset label per report")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    s_rep->add_option("--out", rep.out, "table JSON output (default: stdout)");
    add_config(s_rep);

    ValidateOptions val;
    auto* s_val = app.add_subcommand("validate", "check a corpus directory");
    s_val->add_option("--data", val.data, "corpus directory")->capture_default_str();
    add_config(s_val);

    try {
        auto expanded = detail::expand_config(std::move(args));
        std::reverse(expanded.begin(), expanded.end());
        app.parse(expanded);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        log << e.what() << '\n';
        return kValidationError;
    } catch (const Error& e) {
        log << e.what() << '\n';
        return status_for(e.code());
    }

    auto* sub = app.get_subcommands().front();
    log << "# effective configuration (" << sub->get_name() << ")\n" << sub->config_to_str(true, false);
    try {
        if (sub == s_ingest) return cmd_ingest(ingest, io);
        if (sub == s_synth) return cmd_synth(synth, io);
        if (sub == s_mle) return cmd_train_mle(mle, io);
        if (sub == s_scst) return cmd_train_scst(sc, io);
        if (sub == s_dec) return cmd_decode(dec, io);
        if (sub == s_score) return cmd_score(score, io);
        if (sub == s_fid) return cmd_fid(fid, io);
        if (sub == s_rep) return cmd_report(rep, io);
        if (sub == s_val) return cmd_validate(val, io);
    } catch (const Error& e) {
        log << "error: " << e.what() << '\n';
        return status_for(e.code());
    } catch (const nlohmann::json::exception& e) {
        log << "error: malformed JSON input: " << e.what() << '\n';
        return kValidationError;
    } catch (const fs::filesystem_error& e) {
        log << "error: " << e.what() << '\n';
        return kIoError;
    }
    return kValidationError;
}

} // namespace avd2::cli
