// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "udarts/bilevel.hpp"
#include "udarts/harness.hpp"
#include "udarts/linoracle.hpp"
#include "udarts/spectral.hpp"

namespace udarts {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Small utilities

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Shortest text that reads back to the same double; "inf"/"-inf"/"nan"
/// for the non-finite values.
inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

/// Stream seed for a named purpose within a run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    return fnv1a64(purpose.data(), purpose.size(), fnv1a64(&seed, sizeof seed));
}

inline std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline std::mt19937_64 rng_from_state(const std::string& s) {
    std::mt19937_64 rng;
    std::istringstream is(s);
    is >> rng;
    if (!is) throw ParseError("malformed RNG state");
    return rng;
}

/// CSV file with a versioned comment line and a fixed column header.
class CsvWriter {
public:
    CsvWriter(const fs::path& path, std::string_view schema, std::vector<std::string> columns)
        : out_(path), width_(columns.size()) {
        if (!out_) throw StateError("cannot write '" + path.string() + "'");
        out_ << "# " << schema << '\n';
        for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
        out_ << '\n';
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != width_) throw StateError("csv row width mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }

private:
    std::ofstream out_;
    std::size_t width_;
};

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw StateError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct SearchConfig {
    std::size_t epochs = 25;
    std::size_t batch_size = 16;
    std::size_t probe_size = 256;
    std::size_t spectral_every = 0;    // 0: final epoch only
    std::size_t checkpoint_every = 0;  // 0: final epoch only
    PowerSettings power;
};

struct TrainFinalConfig {
    std::size_t epochs = 25;
    std::size_t batch_size = 16;
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 0.0243;
};

struct EvaluateConfig {
    std::size_t T = 20;
    double snr_db = kCleanSnr;
    double param_sigma = 0.0;
};

struct NoiseSweepConfig {
    std::vector<double> snr_db{kCleanSnr, 30.0, 20.0, 10.0, 0.0};
    std::vector<double> param_sigma{0.0, 0.01, 0.05, 0.1};
    double headline_sigma = 0.05;
    std::size_t repetitions = 5;
};

struct LemmaConfig {
    std::uint64_t seed = 0;
    std::size_t lemma1_instances = 100;
    std::size_t lemma3_instances = 200;
    std::size_t jensen_points = 10000;
    double grid_step = 1e-4;
};

struct ExperimentConfig {
    Mode mode = Mode::Mudarts;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::string output_dir = "runs";
    DatasetSpec dataset;
    NetworkSpec network = NetworkSpec::desk();
    bool auto_reductions = true;
    BilevelConfig bilevel;
    bool auto_xi = true;  // xi follows w_lr
    std::size_t T = 20;
    DropoutConfig dropout;
    SearchConfig search;
    TrainFinalConfig train_final;
    EvaluateConfig evaluate;
    NoiseSweepConfig noise_sweep;
    LemmaConfig lemmas;

    void validate() const;
    json to_json() const;
    static ExperimentConfig from_json(const json& j);

    /// Hash over everything that shapes a trained state (not seeds, output
    /// location or evaluation settings).
    std::string hash() const {
        json j = to_json();
        json h{{"mode", j["mode"]}, {"dataset", j["dataset"]},     {"network", j["network"]},
               {"bilevel", j["bilevel"]}, {"uncertainty", j["uncertainty"]}, {"search", j["search"]}};
        return hex64(fnv1a64(h.dump()));
    }
};

namespace detail {

inline json snr_to_json(double v) { return std::isinf(v) && v > 0 ? json("inf") : json(v); }

inline double snr_from_json(const json& j, const std::string& field) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "clean") return kCleanSnr;
        throw ConfigError(field + ": expected a number or \"inf\"");
    }
    if (!j.is_number()) throw ConfigError(field + ": expected a number or \"inf\"");
    return j.get<double>();
}

/// Reads one JSON object, tracking which keys were consumed so unknown keys
/// can be reported by name.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError((path_.empty() ? std::string("config") : path_) + ": expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (const json* v = find(key)) {
            try {
                if constexpr (std::is_same_v<T, bool>) {
                    if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
                } else if constexpr (std::is_unsigned_v<T>) {
                    if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
                        throw ConfigError(field(key) + ": expected a non-negative integer");
                } else if constexpr (std::is_floating_point_v<T>) {
                    if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
                } else if constexpr (std::is_same_v<T, std::string>) {
                    if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
                }
                out = v->get<T>();
            } catch (const json::exception& e) {
                throw ConfigError(field(key) + ": " + e.what());
            }
        }
    }

    ObjectReader child(const std::string& key) {
        static const json empty = json::object();
        const json* v = find(key);
        return ObjectReader(v ? *v : empty, field(key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seeds: must list at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw ConfigError("seeds: duplicate entries");
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
    if (dataset.classes < 2) throw ConfigError("dataset.classes: must be at least 2");
    if (!(dataset.split_fraction > 0.0 && dataset.split_fraction < 1.0))
        throw ConfigError("dataset.split_fraction: must lie in (0, 1)");
    if (dataset.source == SourceKind::Idx && (dataset.images_path.empty() || dataset.labels_path.empty()))
        throw ConfigError("dataset.images_path/labels_path: required for source idx");
    if (dataset.source == SourceKind::Csv && dataset.csv_path.empty())
        throw ConfigError("dataset.csv_path: required for source csv");
    try {
        NetworkSpec probe = network;
        probe.classes = std::max<std::size_t>(probe.classes, 2);
        probe.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("network: ") + e.what());
    }
    bilevel.validate();
    if (!auto_xi && bilevel.xi != bilevel.w_lr) {
        // allowed, recorded as an explicit override
    }
    if (flags_of(mode).dropout && T < 2) throw ConfigError("uncertainty.T: must be at least 2 for dropout modes");
    if (!(dropout.temperature > 0.0)) throw ConfigError("uncertainty.temperature: must be > 0");
    if (!(dropout.init_p > 0.0 && dropout.init_p < 1.0)) throw ConfigError("uncertainty.init_p: must lie in (0, 1)");
    if (!(dropout.length_scale >= 0.0)) throw ConfigError("uncertainty.length_scale: must be >= 0");
    if (!(dropout.tau_inverse >= 0.0)) throw ConfigError("uncertainty.tau_inverse: must be >= 0");
    if (search.epochs == 0) throw ConfigError("search.epochs: must be at least 1");
    if (search.batch_size < 2) throw ConfigError("search.batch_size: must be at least 2");
    if (search.probe_size < 2) throw ConfigError("search.probe_size: must be at least 2");
    if (search.power.iters < 1) throw ConfigError("search.power_iters: must be at least 1");
    if (!(search.power.tol > 0.0)) throw ConfigError("search.power_tol: must be > 0");
    if (!(search.power.eps > 0.0)) throw ConfigError("search.hvp_eps: must be > 0");
    if (train_final.batch_size < 2) throw ConfigError("train_final.batch_size: must be at least 2");
    if (!(train_final.lr >= 0.0)) throw ConfigError("train_final.lr: must be >= 0");
    if (!(train_final.momentum >= 0.0 && train_final.momentum < 1.0))
        throw ConfigError("train_final.momentum: must lie in [0, 1)");
    if (!(train_final.weight_decay >= 0.0)) throw ConfigError("train_final.weight_decay: must be >= 0");
    if (evaluate.T < 1) throw ConfigError("evaluate.T: must be at least 1");
    if (!(evaluate.param_sigma >= 0.0)) throw ConfigError("evaluate.param_sigma: must be >= 0");
    if (noise_sweep.snr_db.empty() || noise_sweep.param_sigma.empty())
        throw ConfigError("noise_sweep: snr_db and param_sigma must be non-empty");
    for (double s : noise_sweep.param_sigma)
        if (!(s >= 0.0)) throw ConfigError("noise_sweep.param_sigma: entries must be >= 0");
    if (noise_sweep.repetitions < 2) throw ConfigError("noise_sweep.repetitions: must be at least 2");
    if (!(lemmas.grid_step > 0.0 && lemmas.grid_step <= 0.1)) throw ConfigError("lemmas.grid_step: must lie in (0, 0.1]");
}

inline json ExperimentConfig::to_json() const {
    json red = auto_reductions ? json("auto") : json(network.reduction_positions);
    json snrs = json::array();
    for (double s : noise_sweep.snr_db) snrs.push_back(detail::snr_to_json(s));
    return {
        {"mode", std::string(mode_name(mode))},
        {"seeds", seeds},
        {"output_dir", output_dir},
        {"dataset",
         {{"source", std::string(source_name(dataset.source))},
          {"n", dataset.n},
          {"noise", dataset.noise},
          {"seed", dataset.seed},
          {"classes", dataset.classes},
          {"split_fraction", dataset.split_fraction},
          {"images_path", dataset.images_path},
          {"labels_path", dataset.labels_path},
          {"csv_path", dataset.csv_path}}},
        {"network",
         {{"n_cells", network.n_cells},
          {"n_nodes", network.n_nodes},
          {"channels", network.channels},
          {"stem_multiplier", network.stem_multiplier},
          {"reduction_positions", red},
          {"dropout_in_ops", network.dropout_in_ops},
          {"dropout_before_classifier", network.dropout_before_classifier}}},
        {"bilevel",
         {{"xi", auto_xi ? json("auto") : json(bilevel.xi)},
          {"w_lr", bilevel.w_lr},
          {"w_momentum", bilevel.w_momentum},
          {"w_weight_decay", bilevel.w_weight_decay},
          {"alpha_lr", bilevel.alpha_lr},
          {"order", bilevel.order == Order::First ? "first" : "second"},
          {"fd_scale", bilevel.fd_scale}}},
        {"uncertainty",
         {{"T", T},
          {"temperature", dropout.temperature},
          {"tau_inverse", dropout.tau_inverse},
          {"length_scale", dropout.length_scale},
          {"init_p", dropout.init_p}}},
        {"search",
         {{"epochs", search.epochs},
          {"batch_size", search.batch_size},
          {"probe_size", search.probe_size},
          {"spectral_every", search.spectral_every},
          {"checkpoint_every", search.checkpoint_every},
          {"power_iters", search.power.iters},
          {"power_tol", search.power.tol},
          {"hvp_eps", search.power.eps}}},
        {"train_final",
         {{"epochs", train_final.epochs},
          {"batch_size", train_final.batch_size},
          {"lr", train_final.lr},
          {"momentum", train_final.momentum},
          {"weight_decay", train_final.weight_decay}}},
        {"evaluate",
         {{"T", evaluate.T}, {"snr_db", detail::snr_to_json(evaluate.snr_db)}, {"param_sigma", evaluate.param_sigma}}},
        {"noise_sweep",
         {{"snr_db", snrs},
          {"param_sigma", noise_sweep.param_sigma},
          {"headline_sigma", noise_sweep.headline_sigma},
          {"repetitions", noise_sweep.repetitions}}},
        {"lemmas",
         {{"seed", lemmas.seed},
          {"lemma1_instances", lemmas.lemma1_instances},
          {"lemma3_instances", lemmas.lemma3_instances},
          {"jensen_points", lemmas.jensen_points},
          {"grid_step", lemmas.grid_step}}},
    };
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    detail::ObjectReader r(j, "");
    std::string mode = std::string(mode_name(c.mode));
    r.get("mode", mode);
    c.mode = mode_from_name(mode);
    r.get("seeds", c.seeds);
    r.get("output_dir", c.output_dir);
    {
        auto d = r.child("dataset");
        std::string src = std::string(source_name(c.dataset.source));
        d.get("source", src);
        c.dataset.source = source_from_name(src);
        d.get("n", c.dataset.n);
        d.get("noise", c.dataset.noise);
        d.get("seed", c.dataset.seed);
        d.get("classes", c.dataset.classes);
        d.get("split_fraction", c.dataset.split_fraction);
        d.get("images_path", c.dataset.images_path);
        d.get("labels_path", c.dataset.labels_path);
        d.get("csv_path", c.dataset.csv_path);
        d.finish();
    }
    {
        auto n = r.child("network");
        n.get("n_cells", c.network.n_cells);
        n.get("n_nodes", c.network.n_nodes);
        n.get("channels", c.network.channels);
        n.get("stem_multiplier", c.network.stem_multiplier);
        if (const json* v = n.find("reduction_positions")) {
            if (v->is_string() && v->get<std::string>() == "auto") {
                c.auto_reductions = true;
            } else if (v->is_array()) {
                c.auto_reductions = false;
                try {
                    c.network.reduction_positions = v->get<std::vector<std::size_t>>();
                } catch (const json::exception&) {
                    throw ConfigError("network.reduction_positions: expected \"auto\" or a list of cell indices");
                }
            } else {
                throw ConfigError("network.reduction_positions: expected \"auto\" or a list of cell indices");
            }
        }
        n.get("dropout_in_ops", c.network.dropout_in_ops);
        n.get("dropout_before_classifier", c.network.dropout_before_classifier);
        n.finish();
        if (c.auto_reductions) c.network.reduction_positions = NetworkSpec::default_reductions(c.network.n_cells);
    }
    {
        auto b = r.child("bilevel");
        b.get("w_lr", c.bilevel.w_lr);
        if (const json* v = b.find("xi")) {
            if (v->is_string() && v->get<std::string>() == "auto") {
                c.auto_xi = true;
            } else if (v->is_number()) {
                c.auto_xi = false;
                c.bilevel.xi = v->get<double>();
            } else {
                throw ConfigError("bilevel.xi: expected a number or \"auto\"");
            }
        }
        if (c.auto_xi) c.bilevel.xi = c.bilevel.w_lr;
        b.get("w_momentum", c.bilevel.w_momentum);
        b.get("w_weight_decay", c.bilevel.w_weight_decay);
        b.get("alpha_lr", c.bilevel.alpha_lr);
        std::string order = c.bilevel.order == Order::First ? "first" : "second";
        b.get("order", order);
        if (order == "first") c.bilevel.order = Order::First;
        else if (order == "second") c.bilevel.order = Order::Second;
        else throw ConfigError("bilevel.order: expected \"first\" or \"second\"");
        b.get("fd_scale", c.bilevel.fd_scale);
        b.finish();
    }
    {
        auto u = r.child("uncertainty");
        u.get("T", c.T);
        u.get("temperature", c.dropout.temperature);
        u.get("tau_inverse", c.dropout.tau_inverse);
        u.get("length_scale", c.dropout.length_scale);
        u.get("init_p", c.dropout.init_p);
        u.finish();
    }
    {
        auto s = r.child("search");
        s.get("epochs", c.search.epochs);
        s.get("batch_size", c.search.batch_size);
        s.get("probe_size", c.search.probe_size);
        s.get("spectral_every", c.search.spectral_every);
        s.get("checkpoint_every", c.search.checkpoint_every);
        s.get("power_iters", c.search.power.iters);
        s.get("power_tol", c.search.power.tol);
        s.get("hvp_eps", c.search.power.eps);
        s.finish();
    }
    {
        auto t = r.child("train_final");
        t.get("epochs", c.train_final.epochs);
        t.get("batch_size", c.train_final.batch_size);
        t.get("lr", c.train_final.lr);
        t.get("momentum", c.train_final.momentum);
        t.get("weight_decay", c.train_final.weight_decay);
        t.finish();
    }
    {
        auto e = r.child("evaluate");
        e.get("T", c.evaluate.T);
        if (const json* v = e.find("snr_db")) c.evaluate.snr_db = detail::snr_from_json(*v, e.field("snr_db"));
        e.get("param_sigma", c.evaluate.param_sigma);
        e.finish();
    }
    {
        auto ns = r.child("noise_sweep");
        if (const json* v = ns.find("snr_db")) {
            if (!v->is_array()) throw ConfigError("noise_sweep.snr_db: expected a list");
            c.noise_sweep.snr_db.clear();
            for (const auto& x : *v) c.noise_sweep.snr_db.push_back(detail::snr_from_json(x, "noise_sweep.snr_db"));
        }
        ns.get("param_sigma", c.noise_sweep.param_sigma);
        ns.get("headline_sigma", c.noise_sweep.headline_sigma);
        ns.get("repetitions", c.noise_sweep.repetitions);
        ns.finish();
    }
    {
        auto l = r.child("lemmas");
        l.get("seed", c.lemmas.seed);
        l.get("lemma1_instances", c.lemmas.lemma1_instances);
        l.get("lemma3_instances", c.lemmas.lemma3_instances);
        l.get("jensen_points", c.lemmas.jensen_points);
        l.get("grid_step", c.lemmas.grid_step);
        l.finish();
    }
    r.finish();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) { return ExperimentConfig::from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    std::string kind = "search";  // search | final
    Mode mode = Mode::Mudarts;
    std::size_t epoch = 0;
    std::string config_hash;
    std::string rng;  // serialized engine state
    ParamSet params;
    Buffers buffers;
    ParamSet momentum;
    std::optional<DiscreteArchitecture> architecture;
};

inline constexpr std::string_view kCheckpointFormat = "udarts-checkpoint/1";

namespace detail {

inline void append_le(std::string& out, const Tensor& t) {
    for (double v : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
    }
}

inline Tensor read_le(const std::string& blob, std::size_t offset, const Shape& shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k)
            bits |= std::uint64_t{static_cast<unsigned char>(blob[offset + 8 * i + k])} << (8 * k);
        t[i] = std::bit_cast<double>(bits);
    }
    return t;
}

}  // namespace detail

/// Writes `dir/manifest.json` and `dir/arrays.bin` (little-endian float64,
/// one FNV-1a hash per array).
inline void save_checkpoint(const Checkpoint& ck, const fs::path& dir) {
    fs::create_directories(dir);
    std::string blob;
    json arrays = json::array();
    auto add = [&](const std::string& group, const std::string& name, const Tensor& t) {
        const std::size_t off = blob.size();
        detail::append_le(blob, t);
        arrays.push_back({{"group", group},
                          {"name", name},
                          {"shape", t.shape()},
                          {"offset", off},
                          {"bytes", blob.size() - off},
                          {"fnv1a64", hex64(fnv1a64(blob.data() + off, blob.size() - off))}});
    };
    for (const auto& [n, t] : ck.params) add("param", n, t);
    for (const auto& [n, s] : ck.buffers) {
        add("buffer_mean", n, s.mean);
        add("buffer_var", n, s.var);
    }
    for (const auto& [n, t] : ck.momentum) add("momentum", n, t);
    json m{{"format", kCheckpointFormat}, {"kind", ck.kind},   {"mode", std::string(mode_name(ck.mode))},
           {"epoch", ck.epoch},          {"config_hash", ck.config_hash}, {"rng_state", ck.rng},
           {"arrays", arrays},            {"blob", "arrays.bin"}, {"blob_bytes", blob.size()}};
    if (ck.architecture) m["architecture"] = to_json(*ck.architecture);
    {
        std::ofstream out(dir / "arrays.bin", std::ios::binary);
        if (!out) throw StateError("cannot write checkpoint blob in '" + dir.string() + "'");
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    write_json(dir / "manifest.json", m);
}

/// Loads a checkpoint, verifying every array hash. With `expected_hash` set,
/// refuses a checkpoint written under a different configuration.
inline Checkpoint load_checkpoint(const fs::path& dir, const std::optional<std::string>& expected_hash = std::nullopt) {
    if (!fs::exists(dir / "manifest.json")) throw StateError("missing checkpoint: no manifest in '" + dir.string() + "'");
    const json m = read_json(dir / "manifest.json");
    try {
        if (m.at("format").get<std::string>() != kCheckpointFormat)
            throw ParseError(dir.string() + ": unsupported checkpoint format");
        Checkpoint ck;
        ck.kind = m.at("kind").get<std::string>();
        ck.mode = mode_from_name(m.at("mode").get<std::string>());
        ck.epoch = m.at("epoch").get<std::size_t>();
        ck.config_hash = m.at("config_hash").get<std::string>();
        ck.rng = m.at("rng_state").get<std::string>();
        if (expected_hash && *expected_hash != ck.config_hash)
            throw ConfigError("refusing checkpoint '" + dir.string() + "': written under config hash " + ck.config_hash +
                              ", supplied config hashes to " + *expected_hash);
        if (m.contains("architecture")) ck.architecture = discrete_from_json(m.at("architecture"));
        std::ifstream in(dir / m.at("blob").get<std::string>(), std::ios::binary);
        if (!in) throw StateError("missing checkpoint blob in '" + dir.string() + "'");
        const std::string blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        if (blob.size() != m.at("blob_bytes").get<std::size_t>())
            throw ParseError(dir.string() + ": blob has " + std::to_string(blob.size()) + " bytes, manifest says " +
                             std::to_string(m.at("blob_bytes").get<std::size_t>()));
        for (const auto& a : m.at("arrays")) {
            const auto name = a.at("name").get<std::string>();
            const auto group = a.at("group").get<std::string>();
            const auto shape = a.at("shape").get<Shape>();
            const auto off = a.at("offset").get<std::size_t>();
            const auto bytes = a.at("bytes").get<std::size_t>();
            if (bytes != 8 * shape_numel(shape) || off + bytes > blob.size())
                throw ParseError(dir.string() + ": array '" + name + "' extent disagrees with its shape");
            if (hex64(fnv1a64(blob.data() + off, bytes)) != a.at("fnv1a64").get<std::string>())
                throw ParseError(dir.string() + ": hash mismatch for array '" + name + "' (" + group + ")");
            Tensor t = detail::read_le(blob, off, shape);
            if (group == "param") ck.params.emplace(name, std::move(t));
            else if (group == "buffer_mean") ck.buffers[name].mean = std::move(t);
            else if (group == "buffer_var") ck.buffers[name].var = std::move(t);
            else if (group == "momentum") ck.momentum.emplace(name, std::move(t));
            else throw ParseError(dir.string() + ": unknown array group '" + group + "'");
        }
        return ck;
    } catch (const json::exception& e) {
        throw ParseError(dir.string() + ": malformed manifest: " + e.what());
    }
}

/// Every entry of `expected` must exist in `actual` with the same shape.
inline void check_shapes(const ParamSet& actual, const ParamSet& expected, const std::string& what) {
    for (const auto& [name, t] : expected) {
        auto it = actual.find(name);
        if (it == actual.end()) throw ShapeError(what + ": missing array '" + name + "'");
        if (it->second.shape() != t.shape())
            throw ShapeError(what + ": array '" + name + "' has shape " + shape_str(it->second.shape()) +
                             ", config expects " + shape_str(t.shape()));
    }
    if (actual.size() != expected.size()) throw ShapeError(what + ": unexpected extra arrays");
}

// ---------------------------------------------------------------------------
// Run data

struct RunData {
    Dataset train;
    Dataset valid;
    Batch probe_train;
    Batch probe_valid;
};

inline Batch head(const Dataset& ds, std::size_t k) {
    std::vector<std::size_t> idx(std::min(k, ds.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return gather(ds.x, ds.y, idx);
}

inline RunData prepare_data(const ExperimentConfig& cfg) {
    Dataset all = load_dataset(cfg.dataset);
    if (all.classes > cfg.dataset.classes && cfg.dataset.source != SourceKind::TwoMoons)
        throw ConfigError("dataset.classes: data has " + std::to_string(all.classes) + " classes, config says " +
                          std::to_string(cfg.dataset.classes));
    auto [tr, va] = split(all, cfg.dataset.split_fraction, cfg.dataset.seed);
    RunData d{std::move(tr), std::move(va), {}, {}};
    d.probe_train = head(d.train, cfg.search.probe_size);
    d.probe_valid = head(d.valid, cfg.search.probe_size);
    return d;
}

inline NetworkSpec network_for(const ExperimentConfig& cfg, const Tensor& x) {
    NetworkSpec s = cfg.network;
    s.input_channels = x.dim(1);
    s.input_height = x.dim(2);
    s.input_width = x.dim(3);
    s.classes = cfg.dataset.classes;
    return spec_for_mode(s, cfg.mode);
}

inline LossSettings loss_settings(const ExperimentConfig& cfg, double dataset_size) {
    LossSettings s;
    s.mode = cfg.mode;
    s.T = cfg.T;
    s.dropout = cfg.dropout;
    s.dataset_size = dataset_size;
    return s;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

struct ProbeStats {
    double ce_valid = 0.0;
    double pred_var = 0.0;     // the term entering the outer objective
    double total_valid = 0.0;
    double mc_variance = 0.0;  // predictive variance of T dropout samples, any dropout mode
    double accuracy = 0.0;
};

inline double accuracy_of(const Tensor& probs, const std::vector<int>& y) {
    const std::size_t c = probs.dim(1);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const auto row = probs.data().subspan(i * c, c);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        hit += best == y[i];
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

/// Outer-objective parts on a fixed batch with frozen MC randomness, plus
/// the MC predictive variance and accuracy of the sample mean. Batch norm
/// uses the batch's own statistics, as during search.
inline ProbeStats probe_stats(const Network& net, const ParamSet& params, const Batch& probe, const LossSettings& loss,
                              std::uint64_t seed) {
    ProbeStats ps;
    const Evaluation ev = valid_loss(net, params, probe, loss, seed);
    ps.ce_valid = ev.report.ce_valid;
    ps.pred_var = ev.report.pred_var;
    ps.total_valid = ev.report.total_valid;
    BoundNetwork bound{&net, &params, nullptr, BnMode::Train, true, loss.dropout.temperature};
    std::mt19937_64 rng(seed);
    if (net.spec().has_dropout()) {
        const McPrediction mc = mc_predict(bound, probe.x, loss.T, rng);
        ps.mc_variance = predictive_variance(mc, loss.dropout.tau_inverse);
        ps.accuracy = accuracy_of(mc.mean(), probe.y);
    } else {
        ps.accuracy = accuracy_of(bound.predict_probs(probe.x, rng), probe.y);
    }
    return ps;
}

struct EvalStats {
    double accuracy = 0.0;
    double pred_var = 0.0;
    double nll = 0.0;
};

/// Inference with running batch-norm statistics and T dropout samples.
inline EvalStats evaluate_model(const Network& net, const ParamSet& params, const Buffers& buffers, const Batch& data,
                                std::size_t T, double temperature, double tau_inverse, std::mt19937_64& rng) {
    BoundNetwork bound{&net, &params, &buffers, BnMode::Eval, true, temperature};
    EvalStats s;
    Tensor mean;
    if (net.spec().has_dropout() && T >= 2) {
        const McPrediction mc = mc_predict(bound, data.x, T, rng);
        s.pred_var = predictive_variance(mc, tau_inverse);
        mean = mc.mean();
    } else {
        mean = bound.predict_probs(data.x, rng);
    }
    s.accuracy = accuracy_of(mean, data.y);
    const std::size_t c = mean.dim(1);
    for (std::size_t i = 0; i < data.size(); ++i) s.nll -= std::log(std::max(mean[i * c + data.y[i]], 1e-300));
    s.nll /= static_cast<double>(data.size());
    return s;
}

// ---------------------------------------------------------------------------
// Search

struct EpochRow {
    EpochRecord record;
    ProbeStats probe;
};

struct SearchOutcome {
    std::vector<EpochRow> rows;  // rows[0] is the untrained state
    std::vector<SpectralReport> spectra;
    SearchState state;
    DiscreteArchitecture architecture;
};

inline fs::path run_dir(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out_root) {
    return out_root / std::string(mode_name(cfg.mode)) / ("seed_" + std::to_string(seed));
}

inline const std::vector<std::string>& loss_columns() {
    static const std::vector<std::string> c{
        "epoch",          "batches",        "ce_train",          "l_mc",           "ce_valid",
        "pred_var",       "total_train",    "total_valid",       "probe_ce_valid", "probe_pred_var",
        "probe_total_valid", "probe_mc_variance", "probe_accuracy", "clamped_logits", "skipped_second_order"};
    return c;
}

inline std::vector<std::string> loss_cells(const EpochRow& r) {
    const auto& m = r.record.mean;
    const bool none = r.record.batches == 0;
    auto cell = [&](double v) { return none ? std::string() : num(v); };
    return {std::to_string(r.record.epoch), std::to_string(r.record.batches), cell(m.ce_train), cell(m.l_mc),
            cell(m.ce_valid), cell(m.pred_var), cell(m.total_train), cell(m.total_valid), num(r.probe.ce_valid),
            num(r.probe.pred_var), num(r.probe.total_valid), num(r.probe.mc_variance), num(r.probe.accuracy),
            std::to_string(r.record.clamped), std::to_string(r.record.skipped_second)};
}

inline const std::vector<std::string>& spectral_columns() {
    static const std::vector<std::string> c{"epoch",
                                            "lambda_max_alpha", "residual_alpha", "iterations_alpha", "converged_alpha",
                                            "lambda_max_w",     "residual_w",     "iterations_w",     "converged_w",
                                            "lambda_max_w_valid", "residual_w_valid", "iterations_w_valid",
                                            "converged_w_valid"};
    return c;
}

inline std::vector<std::string> spectral_cells(const SpectralReport& r) {
    std::vector<std::string> out{std::to_string(r.epoch)};
    for (const PowerResult* p : {&r.alpha, &r.w, &r.w_valid}) {
        out.push_back(num(p->lambda));
        out.push_back(num(p->residual));
        out.push_back(std::to_string(p->iterations));
        out.push_back(p->degenerate ? "degenerate" : (p->converged ? "1" : "0"));
    }
    return out;
}

inline Checkpoint checkpoint_of(const ExperimentConfig& cfg, const SearchState& st) {
    Checkpoint ck;
    ck.kind = "search";
    ck.mode = cfg.mode;
    ck.epoch = st.epoch;
    ck.config_hash = cfg.hash();
    ck.rng = rng_state(st.rng);
    ck.params = st.params;
    ck.buffers = st.buffers;
    ck.momentum = st.optimizer.buffers;
    return ck;
}

/// Initial search state for `seed`: parameters drawn from the seeded engine,
/// which then continues to drive batch order and MC sampling.
inline SearchState initial_state(const Network& net, const ExperimentConfig& cfg, std::uint64_t seed) {
    SearchState st;
    st.rng.seed(seed);
    st.params = net.init_params(st.rng, cfg.dropout);
    st.buffers = net.init_buffers();
    return st;
}

inline SearchSettings search_settings(const ExperimentConfig& cfg, double dataset_size) {
    SearchSettings s;
    s.bilevel = cfg.bilevel;
    s.loss = loss_settings(cfg, dataset_size);
    s.batch_size = cfg.search.batch_size;
    return s;
}

/// Full search for one seed. With a non-empty `dir`, writes losses.csv,
/// spectra.csv, architecture.json, the final checkpoint and any periodic
/// checkpoints there.
inline SearchOutcome run_search(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir = {}) {
    const RunData data = prepare_data(cfg);
    const Network net(network_for(cfg, data.train.x), OpCatalog::darts());
    const SearchSettings settings = search_settings(cfg, static_cast<double>(data.train.size()));
    const Batch train = data.train.batch(), valid = data.valid.batch();
    const std::uint64_t probe_seed = derive_seed(seed, "probe");
    SpectralProbe sp{&data.probe_train, &data.probe_valid, probe_seed, cfg.search.power};
    sp.power.seed = derive_seed(seed, "power");

    SearchOutcome out;
    out.state = initial_state(net, cfg, seed);
    SearchState& st = out.state;

    std::optional<CsvWriter> losses, spectra;
    if (!dir.empty()) {
        fs::create_directories(dir);
        write_json(dir / "config.resolved.json", cfg.to_json());
        losses.emplace(dir / "losses.csv", "udarts losses v1", loss_columns());
        spectra.emplace(dir / "spectra.csv", "udarts spectra v1", spectral_columns());
    }
    auto emit = [&](EpochRow row) {
        if (losses) losses->row(loss_cells(row));
        out.rows.push_back(std::move(row));
    };
    auto maybe_spectrum = [&](std::size_t epoch) {
        const bool final = epoch == cfg.search.epochs;
        if (!final && (cfg.search.spectral_every == 0 || epoch % cfg.search.spectral_every != 0)) return;
        SpectralReport rep = spectral_snapshot(net, st.params, settings.loss, sp, epoch);
        if (spectra) spectra->row(spectral_cells(rep));
        out.spectra.push_back(std::move(rep));
    };

    EpochRow first;
    first.probe = probe_stats(net, st.params, data.probe_valid, settings.loss, probe_seed);
    emit(first);
    maybe_spectrum(0);
    for (std::size_t e = 1; e <= cfg.search.epochs; ++e) {
        EpochRow row;
        row.record = search_epoch(st, net, train, valid, settings);
        row.probe = probe_stats(net, st.params, data.probe_valid, settings.loss, probe_seed);
        emit(std::move(row));
        maybe_spectrum(e);
        if (!dir.empty() && cfg.search.checkpoint_every && e % cfg.search.checkpoint_every == 0 && e != cfg.search.epochs) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04zu", e);
            save_checkpoint(checkpoint_of(cfg, st), dir / "checkpoints" / name);
        }
    }
    out.architecture = discretize(st.params, net.catalog(), net.spec().n_nodes, 2);
    if (!dir.empty()) {
        write_json(dir / "architecture.json", to_json(out.architecture));
        save_checkpoint(checkpoint_of(cfg, st), dir / "checkpoint");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Final training of the discretised architecture

struct FinalOutcome {
    ParamSet params;
    Buffers buffers;
    std::vector<std::pair<LossReport, double>> epochs;  // train losses, test accuracy
};

inline FinalOutcome run_train_final(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    const fs::path arch_path = dir / "architecture.json";
    if (!fs::exists(arch_path)) throw StateError("missing '" + arch_path.string() + "': run search first");
    const DiscreteArchitecture arch = discrete_from_json(read_json(arch_path));
    const RunData data = prepare_data(cfg);
    const Network net(network_for(cfg, data.train.x), OpCatalog::darts(), arch);
    const LossSettings loss = loss_settings(cfg, static_cast<double>(data.train.size()));
    std::mt19937_64 rng(derive_seed(seed, "final"));
    FinalOutcome out;
    out.params = net.init_params(rng, cfg.dropout);
    out.buffers = net.init_buffers();
    SgdMomentum opt;
    const TrainFinalConfig& tf = cfg.train_final;
    CsvWriter csv(dir / "final_train.csv", "udarts final-train v1",
                  {"epoch", "ce_train", "l_mc", "total_train", "test_accuracy", "test_pred_var"});
    const Batch train = data.train.batch(), test = data.valid.batch();
    for (std::size_t e = 1; e <= tf.epochs; ++e) {
        const auto idx = shuffled_indices(train.size(), rng);
        const std::size_t bs = std::min(tf.batch_size, idx.size());
        LossReport mean;
        const std::size_t nb = idx.size() / bs;
        for (std::size_t b = 0; b < nb; ++b) {
            const Batch tb = gather(train.x, train.y, std::span(idx).subspan(b * bs, bs));
            const Evaluation ev = train_loss(net, out.params, tb, loss, rng(), &out.buffers);
            opt.step(out.params, ev.grads, tf.lr, tf.momentum, tf.weight_decay, [](std::string_view) { return true; },
                     [&](std::string_view n) { return param_role(n) == ParamRole::Dropout ? 0.0 : tf.weight_decay; });
            mean.ce_train += ev.report.ce_train / static_cast<double>(nb);
            mean.l_mc += ev.report.l_mc / static_cast<double>(nb);
            mean.total_train += ev.report.total_train / static_cast<double>(nb);
        }
        std::mt19937_64 eval_rng(derive_seed(seed, "final-eval"));
        const EvalStats es = evaluate_model(net, out.params, out.buffers, test, cfg.evaluate.T, cfg.dropout.temperature,
                                            cfg.dropout.tau_inverse, eval_rng);
        csv.row({std::to_string(e), num(mean.ce_train), num(mean.l_mc), num(mean.total_train), num(es.accuracy),
                 num(es.pred_var)});
        out.epochs.emplace_back(mean, es.accuracy);
    }
    Checkpoint ck;
    ck.kind = "final";
    ck.mode = cfg.mode;
    ck.epoch = tf.epochs;
    ck.config_hash = cfg.hash();
    ck.rng = rng_state(rng);
    ck.params = out.params;
    ck.buffers = out.buffers;
    ck.momentum = opt.buffers;
    ck.architecture = arch;
    save_checkpoint(ck, dir / "final");
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation and noise sweeps

struct LoadedModel {
    Checkpoint checkpoint;
    std::optional<Network> net;
};

/// The final checkpoint when present, otherwise the search checkpoint.
inline LoadedModel load_model(const ExperimentConfig& cfg, const fs::path& dir, const Tensor& x_example) {
    const fs::path final_dir = dir / "final", search_dir = dir / "checkpoint";
    const bool has_final = fs::exists(final_dir / "manifest.json");
    if (!has_final && !fs::exists(search_dir / "manifest.json"))
        throw StateError("missing checkpoint under '" + dir.string() + "': run search first");
    LoadedModel m;
    m.checkpoint = load_checkpoint(has_final ? final_dir : search_dir, cfg.hash());
    if (m.checkpoint.mode != cfg.mode)
        throw ConfigError("checkpoint mode '" + std::string(mode_name(m.checkpoint.mode)) + "' differs from config mode");
    m.net.emplace(network_for(cfg, x_example), OpCatalog::darts(), m.checkpoint.architecture);
    std::mt19937_64 rng(0);
    check_shapes(m.checkpoint.params, m.net->init_params(rng, cfg.dropout), "checkpoint");
    return m;
}

inline std::string snr_label(double snr) { return std::isinf(snr) ? std::string("clean") : num(snr); }

inline void run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    const RunData data = prepare_data(cfg);
    LoadedModel m = load_model(cfg, dir, data.valid.x);
    std::mt19937_64 rng(derive_seed(seed, "evaluate"));
    const ParamSet params = perturb_params(m.checkpoint.params, cfg.evaluate.param_sigma, rng);
    Batch test = data.valid.batch();
    test.x = add_input_noise(test.x, cfg.evaluate.snr_db, rng);
    const EvalStats s = evaluate_model(*m.net, params, m.checkpoint.buffers, test, cfg.evaluate.T, cfg.dropout.temperature,
                                       cfg.dropout.tau_inverse, rng);
    CsvWriter csv(dir / "evaluate.csv", "udarts evaluate v1",
                  {"checkpoint", "snr_db", "param_sigma", "T", "accuracy", "pred_var", "nll"});
    csv.row({m.checkpoint.kind, snr_label(cfg.evaluate.snr_db), num(cfg.evaluate.param_sigma),
             std::to_string(cfg.evaluate.T), num(s.accuracy), num(s.pred_var), num(s.nll)});
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

inline void run_noise_sweep(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    const RunData data = prepare_data(cfg);
    LoadedModel m = load_model(cfg, dir, data.valid.x);
    const Batch clean = data.valid.batch();
    CsvWriter csv(dir / "noise_sweep.csv", "udarts noise-sweep v1",
                  {"snr_db", "param_sigma", "headline", "repetitions", "accuracy_mean", "accuracy_std", "pred_var_mean",
                   "pred_var_std"});
    for (std::size_t a = 0; a < cfg.noise_sweep.snr_db.size(); ++a)
        for (std::size_t b = 0; b < cfg.noise_sweep.param_sigma.size(); ++b) {
            const double snr = cfg.noise_sweep.snr_db[a], sigma = cfg.noise_sweep.param_sigma[b];
            std::vector<double> acc, var;
            for (std::size_t r = 0; r < cfg.noise_sweep.repetitions; ++r) {
                std::mt19937_64 rng(derive_seed(seed, "sweep/" + std::to_string(a) + "/" + std::to_string(b) + "/" +
                                                          std::to_string(r)));
                const ParamSet params = perturb_params(m.checkpoint.params, sigma, rng);
                Batch test = clean;  // same sample order for every cell
                test.x = add_input_noise(clean.x, snr, rng);
                const EvalStats s = evaluate_model(*m.net, params, m.checkpoint.buffers, test, cfg.evaluate.T,
                                                   cfg.dropout.temperature, cfg.dropout.tau_inverse, rng);
                acc.push_back(s.accuracy);
                var.push_back(s.pred_var);
            }
            const auto [am, as] = mean_std(acc);
            const auto [vm, vs] = mean_std(var);
            csv.row({snr_label(snr), num(sigma), sigma == cfg.noise_sweep.headline_sigma ? "1" : "0",
                     std::to_string(cfg.noise_sweep.repetitions), num(am), num(as), num(vm), num(vs)});
        }
}

// ---------------------------------------------------------------------------
// Spectra from saved checkpoints

inline void run_spectra(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    std::vector<fs::path> dirs;
    if (fs::exists(dir / "checkpoints"))
        for (const auto& e : fs::directory_iterator(dir / "checkpoints"))
            if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    dirs.push_back(dir / "checkpoint");
    const RunData data = prepare_data(cfg);
    const Network net(network_for(cfg, data.train.x), OpCatalog::darts());
    const LossSettings loss = loss_settings(cfg, static_cast<double>(data.train.size()));
    SpectralProbe sp{&data.probe_train, &data.probe_valid, derive_seed(seed, "probe"), cfg.search.power};
    sp.power.seed = derive_seed(seed, "power");
    CsvWriter csv(dir / "spectra_checkpoints.csv", "udarts spectra v1", spectral_columns());
    std::mt19937_64 rng(0);
    const ParamSet expected = net.init_params(rng, cfg.dropout);
    for (const auto& d : dirs) {
        const Checkpoint ck = load_checkpoint(d, cfg.hash());
        check_shapes(ck.params, expected, d.string());
        csv.row(spectral_cells(spectral_snapshot(net, ck.params, loss, sp, ck.epoch)));
    }
}

// ---------------------------------------------------------------------------
// Linear-model verification report

struct LemmaReport {
    json report;
    bool passed = false;
};

inline LemmaReport run_verify_lemmas(const LemmaConfig& lc) {
    LemmaReport out;
    json& r = out.report;
    bool ok = true;

    const lin::SigmaExtrema ex = lin::sigma_extrema();
    const bool c1 = std::abs(ex.sigma_d.max - 0.25) <= 1e-9;
    const bool c2 = std::abs(ex.cubic.max - 0.0962) <= 1e-4;
    const bool c3 = std::abs(ex.cubic.argmax - (3.0 - std::sqrt(3.0)) / 6.0) <= 1e-6;
    ok = ok && c1 && c2 && c3;
    r["constants"] = {{"sigma_d_max", ex.sigma_d.max},
                      {"sigma_d_argmax", ex.sigma_d.argmax},
                      {"cubic_max", ex.cubic.max},
                      {"cubic_argmax", ex.cubic.argmax},
                      {"cubic_argmax_bisection", ex.cubic_root},
                      {"reference_sigma_d_max", 0.25},
                      {"reference_cubic_max", 0.0962},
                      {"pass", c1 && c2 && c3}};

    std::mt19937_64 rng(lc.seed);
    std::size_t bound_ok = 0, convex_ok = 0;
    double worst_gap = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < lc.lemma1_instances; ++k) {
        const auto rep = lin::verify_lemma1(lin::random_instance(rng));
        bound_ok += rep.bound_ok;
        convex_ok += rep.convex_ok;
        worst_gap = std::max(worst_gap, rep.lambda_max - rep.bound);
    }
    ok = ok && bound_ok == lc.lemma1_instances && convex_ok == lc.lemma1_instances;
    r["lemma1"] = {{"instances", lc.lemma1_instances},
                   {"bound_passes", bound_ok},
                   {"convex_passes", convex_ok},
                   {"max_lambda_minus_bound", worst_gap},
                   {"seed", lc.seed}};

    std::mt19937_64 jr(derive_seed(lc.seed, "jensen"));
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::size_t jensen_ok = 0;
    for (std::size_t k = 0; k < lc.jensen_points; ++k) {
        const std::size_t d = 1 + k % 8;
        std::vector<double> x(d), a(d);
        for (auto& v : x) v = nd(jr);
        for (auto& v : a) v = nd(jr);
        const double scale = ud(jr) / std::sqrt(sum_squares(a));
        for (auto& v : a) v *= scale;
        const double z = dot(x, a);
        jensen_ok += std::pow(lin::sigmoid(z), 2) <= lin::sigmoid(z * z);
    }
    ok = ok && jensen_ok == lc.jensen_points;
    r["jensen"] = {{"points", lc.jensen_points}, {"passes", jensen_ok}};

    json grid = json::object();
    for (auto v : {lin::SigmaUdVariant::Final, lin::SigmaUdVariant::DraftMinus, lin::SigmaUdVariant::DraftPlus}) {
        std::size_t nonpos = 0, cells = 0;
        double worst = -std::numeric_limits<double>::infinity(), worst_q = 0.0, worst_a2 = 0.0;
        for (std::size_t i = 0; i < 100; ++i) {
            const double a2 = static_cast<double>(i) / 100.0;
            const auto m = lin::sigma_ud_grid_max(a2, v, lc.grid_step);
            ++cells;
            nonpos += m.max <= 0.0;
            if (m.max > worst) {
                worst = m.max;
                worst_q = m.argmax;
                worst_a2 = a2;
            }
        }
        grid[std::string(lin::variant_name(v))] = {
            {"a2_values", cells}, {"nonpositive", nonpos}, {"max", worst}, {"argmax_q", worst_q}, {"at_a2", worst_a2}};
        if (v == lin::SigmaUdVariant::Final) ok = ok && nonpos == cells;
    }
    r["sigma_ud_grid"] = grid;
    r["sigma_ud_grid"]["q_step"] = lc.grid_step;
    r["sigma_ud_grid"]["gated_variant"] = "final";

    const lin::Lemma3Census census = lin::lemma3_census(derive_seed(lc.seed, "lemma3"), lc.lemma3_instances);
    json inst = json::array();
    for (const auto& i : census.instances)
        inst.push_back({{"N", i.N},
                        {"d", i.d},
                        {"alpha_sq", i.alpha_sq},
                        {"lambda_darts", i.lambda_darts},
                        {"lambda_mudarts", i.lambda_mudarts},
                        {"inequality", i.inequality_ok}});
    r["lemma3"] = {{"instances", census.instances.size()},
                   {"inequality_passes", census.inequality_passes},
                   {"pass_rate", static_cast<double>(census.inequality_passes) /
                                     static_cast<double>(std::max<std::size_t>(census.instances.size(), 1))},
                   {"sigma_ud_positive_regime", census.positive_regime},
                   {"gated", false},
                   {"seed", derive_seed(lc.seed, "lemma3")},
                   {"per_instance", inst}};
    r["passed"] = ok;
    out.passed = ok;
    return out;
}

// ---------------------------------------------------------------------------
// Running seeds

/// Worker cap from UDARTS_THREADS (default 1).
inline std::size_t worker_count() {
    if (const char* v = std::getenv("UDARTS_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(v, &end, 10);
        if (end == v || *end != '\0' || n < 1) throw ConfigError("UDARTS_THREADS: expected a positive integer");
        return static_cast<std::size_t>(n);
    }
    return 1;
}

/// Runs `job(seed)` for every seed on up to `workers` threads. The first
/// exception is rethrown after all workers finish.
inline void for_each_seed(const std::vector<std::uint64_t>& seeds, std::size_t workers,
                          const std::function<void(std::uint64_t)>& job) {
    workers = std::max<std::size_t>(1, std::min(workers, seeds.size()));
    if (workers == 1) {
        for (auto s : seeds) job(s);
        return;
    }
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::uint64_t s;
                {
                    std::lock_guard lock(mu);
                    if (next == seeds.size() || err) return;
                    s = seeds[next++];
                }
                try {
                    job(s);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace udarts
