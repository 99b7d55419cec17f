// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "udarts/bilevel.hpp"

namespace udarts {

struct Dataset {
    Tensor x;  // [n, c, h, w]; tabular features are stored as [n, d, 1, 1]
    std::vector<int> y;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return y.size(); }
    Batch batch() const { return {x, y}; }
};

enum class SourceKind { TwoMoons, Blobs, Spirals, Idx, Csv };

inline std::string_view source_name(SourceKind k) {
    switch (k) {
        case SourceKind::TwoMoons: return "two_moons";
        case SourceKind::Blobs: return "blobs";
        case SourceKind::Spirals: return "spirals";
        case SourceKind::Idx: return "idx";
        case SourceKind::Csv: return "csv";
    }
    return "?";
}

inline SourceKind source_from_name(std::string_view s) {
    for (SourceKind k : {SourceKind::TwoMoons, SourceKind::Blobs, SourceKind::Spirals, SourceKind::Idx, SourceKind::Csv})
        if (source_name(k) == s) return k;
    throw ConfigError("dataset.source: unknown value '" + std::string(s) + "'");
}

struct DatasetSpec {
    SourceKind source = SourceKind::TwoMoons;
    std::size_t n = 256;
    double noise = 0.1;
    std::uint64_t seed = 0;
    std::size_t classes = 2;
    double split_fraction = 0.5;
    std::string images_path;  // idx
    std::string labels_path;  // idx
    std::string csv_path;     // csv
};

// ---------------------------------------------------------------------------
// Synthetic sources

/// Per-dimension zero mean and unit (population) variance over axis 0.
inline void standardize(Tensor& x) {
    const std::size_t n = x.dim(0), d = x.size() / n;
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += x[i * d + j];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += std::pow(x[i * d + j] - m, 2);
        const double sd = std::sqrt(v / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) x[i * d + j] = sd > 0 ? (x[i * d + j] - m) / sd : 0.0;
    }
}

inline Dataset generate(const DatasetSpec& spec) {
    if (spec.classes < 2) throw ConfigError("dataset.classes must be at least 2");
    if (spec.n < 4 * spec.classes)
        throw ConfigError("dataset.n must be at least 4 * classes (" + std::to_string(4 * spec.classes) + ")");
    if (!(spec.noise >= 0.0)) throw ConfigError("dataset.noise must be >= 0");
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t n = spec.n;
    std::vector<std::array<double, 2>> pts(n);
    std::vector<int> labels(n);
    const double pi = std::numbers::pi;
    switch (spec.source) {
        case SourceKind::TwoMoons: {
            if (spec.classes != 2) throw ConfigError("dataset.classes must be 2 for two_moons");
            const std::size_t outer = n / 2, inner = n - outer;
            for (std::size_t i = 0; i < outer; ++i) {
                const double t = outer > 1 ? pi * static_cast<double>(i) / static_cast<double>(outer - 1) : 0.0;
                pts[i] = {std::cos(t), std::sin(t)};
                labels[i] = 0;
            }
            for (std::size_t i = 0; i < inner; ++i) {
                const double t = inner > 1 ? pi * static_cast<double>(i) / static_cast<double>(inner - 1) : 0.0;
                pts[outer + i] = {1.0 - std::cos(t), 0.5 - std::sin(t)};
                labels[outer + i] = 1;
            }
            break;
        }
        case SourceKind::Blobs: {
            const double k = static_cast<double>(spec.classes);
            for (std::size_t i = 0; i < n; ++i) {
                const int c = static_cast<int>(i % spec.classes);
                const double a = 2.0 * pi * c / k;
                pts[i] = {4.0 * std::cos(a), 4.0 * std::sin(a)};
                labels[i] = c;
            }
            break;
        }
        case SourceKind::Spirals: {
            const double k = static_cast<double>(spec.classes);
            const std::size_t per = (n + spec.classes - 1) / spec.classes;
            for (std::size_t i = 0; i < n; ++i) {
                const int c = static_cast<int>(i % spec.classes);
                const double r = static_cast<double>(i / spec.classes + 1) / static_cast<double>(per);
                const double a = 2.0 * pi * c / k + 2.0 * pi * r;
                pts[i] = {r * std::sin(a), r * std::cos(a)};
                labels[i] = c;
            }
            break;
        }
        default: throw ConfigError("generate: source '" + std::string(source_name(spec.source)) + "' is not synthetic");
    }
    for (auto& p : pts)
        for (double& v : p) v += spec.noise * nd(rng);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    Dataset ds;
    ds.classes = spec.classes;
    ds.x = Tensor({n, 2, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
        ds.x[2 * i] = pts[order[i]][0];
        ds.x[2 * i + 1] = pts[order[i]][1];
        ds.y.push_back(labels[order[i]]);
    }
    standardize(ds.x);
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> valid;
};

/// Seeded permutation; the first round(fraction * n) indices train the
/// weights, the rest drive the architecture.
inline SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("dataset.split_fraction must lie in (0, 1)");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx = shuffled_indices(n, rng);
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (k == 0 || k == n) throw ConfigError("dataset.split_fraction leaves one side empty");
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    s.valid.assign(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
    return s;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
    Batch b = gather(ds.x, ds.y, idx);
    return {std::move(b.x), std::move(b.y), ds.classes};
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
    const SplitIndices s = split_indices(ds.size(), fraction, seed);
    return {subset(ds, s.train), subset(ds, s.valid)};
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, unsigned byte payload)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size())
        throw ParseError(path + ": truncated at byte offset " + std::to_string(b.size()) + " (header field at offset " +
                         std::to_string(off) + " needs 4 bytes)");
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline void put_be32(std::string& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<unsigned char> pixels;
};

inline IdxImages read_idx_images(const std::string& path) {
    const auto b = detail::read_file(path);
    const std::uint32_t magic = detail::be32(b, 0, path);
    if (magic != kIdxImagesMagic) {
        std::ostringstream os;
        os << path << ": bad magic 0x" << std::hex << magic << " at byte offset 0 (expected 0x00000803)";
        throw ParseError(os.str());
    }
    IdxImages im;
    im.count = detail::be32(b, 4, path);
    im.rows = detail::be32(b, 8, path);
    im.cols = detail::be32(b, 12, path);
    const std::size_t need = 16 + im.count * im.rows * im.cols;
    if (b.size() < need)
        throw ParseError(path + ": truncated at byte offset " + std::to_string(b.size()) + ", expected " +
                         std::to_string(need) + " bytes");
    im.pixels.assign(b.begin() + 16, b.begin() + static_cast<std::ptrdiff_t>(need));
    return im;
}

inline std::vector<int> read_idx_labels(const std::string& path) {
    const auto b = detail::read_file(path);
    const std::uint32_t magic = detail::be32(b, 0, path);
    if (magic != kIdxLabelsMagic) {
        std::ostringstream os;
        os << path << ": bad magic 0x" << std::hex << magic << " at byte offset 0 (expected 0x00000801)";
        throw ParseError(os.str());
    }
    const std::size_t n = detail::be32(b, 4, path);
    if (b.size() < 8 + n)
        throw ParseError(path + ": truncated at byte offset " + std::to_string(b.size()) + ", expected " +
                         std::to_string(8 + n) + " bytes");
    return {b.begin() + 8, b.begin() + static_cast<std::ptrdiff_t>(8 + n)};
}

inline void write_idx_images(const std::string& path, const IdxImages& im) {
    if (im.pixels.size() != im.count * im.rows * im.cols) throw ShapeError("write_idx_images: pixel count mismatch");
    std::string out;
    detail::put_be32(out, kIdxImagesMagic);
    detail::put_be32(out, static_cast<std::uint32_t>(im.count));
    detail::put_be32(out, static_cast<std::uint32_t>(im.rows));
    detail::put_be32(out, static_cast<std::uint32_t>(im.cols));
    out.append(im.pixels.begin(), im.pixels.end());
    detail::write_file(path, out);
}

inline void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::string out;
    detail::put_be32(out, kIdxLabelsMagic);
    detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
        if (l < 0 || l > 255) throw ConfigError("write_idx_labels: label out of byte range");
        out.push_back(static_cast<char>(l));
    }
    detail::write_file(path, out);
}

/// Images scaled to [0, 1] as [n, 1, rows, cols].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const IdxImages im = read_idx_images(images_path);
    std::vector<int> labels = read_idx_labels(labels_path);
    if (labels.size() != im.count)
        throw ParseError(labels_path + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(im.count) +
                         " images");
    if (im.count == 0 || im.rows == 0 || im.cols == 0) throw ParseError(images_path + ": empty image set");
    Dataset ds;
    ds.x = Tensor({im.count, 1, im.rows, im.cols});
    for (std::size_t i = 0; i < im.pixels.size(); ++i) ds.x[i] = im.pixels[i] / 255.0;
    ds.classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    ds.y = std::move(labels);
    return ds;
}

// ---------------------------------------------------------------------------
// CSV: numeric feature columns, integer label in the last column

inline Dataset parse_csv(const std::string& text, const std::string& origin = "<csv>") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0, width = 0;
    std::vector<double> feats;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (cells.size() < 2) throw ParseError(origin + ":" + std::to_string(lineno) + ": need features and a label");
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": ragged row with " + std::to_string(cells.size()) +
                             " columns, expected " + std::to_string(width));
        for (std::size_t c = 0; c + 1 < cells.size(); ++c) {
            std::size_t used = 0;
            double v;
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || cells[c].find_first_not_of(" \t", used) != std::string::npos)
                throw ParseError(origin + ":" + std::to_string(lineno) + ": column " + std::to_string(c + 1) +
                                 " is not a number");
            feats.push_back(v);
        }
        const std::string& lab = cells.back();
        std::size_t used = 0;
        long v = -1;
        try {
            v = std::stol(lab, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || lab.find_first_not_of(" \t", used) != std::string::npos || v < 0)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": label '" + lab + "' is not a non-negative integer");
        labels.push_back(static_cast<int>(v));
    }
    if (labels.empty()) throw ParseError(origin + ": no rows");
    Dataset ds;
    const std::size_t d = width - 1;
    ds.x = Tensor({labels.size(), d, 1, 1}, std::move(feats));
    ds.classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    ds.y = std::move(labels);
    return ds;
}

inline Dataset load_csv(const std::string& path) {
    const auto b = detail::read_file(path);
    return parse_csv(std::string(b.begin(), b.end()), path);
}

inline Dataset load_dataset(const DatasetSpec& spec) {
    switch (spec.source) {
        case SourceKind::Idx: return load_idx(spec.images_path, spec.labels_path);
        case SourceKind::Csv: return load_csv(spec.csv_path);
        default: return generate(spec);
    }
}

// ---------------------------------------------------------------------------
// Perturbations

/// Sentinel for "no input noise".
inline constexpr double kCleanSnr = std::numeric_limits<double>::infinity();

/// Additive Gaussian noise with power mean(x^2) / 10^(snr_db/10), measured
/// over the whole batch.
inline Tensor add_input_noise(const Tensor& x, double snr_db, std::mt19937_64& rng) {
    if (x.empty()) throw ShapeError("add_input_noise: empty batch");
    if (std::isinf(snr_db) && snr_db > 0) return x;
    if (std::isnan(snr_db)) throw ConfigError("add_input_noise: snr_db is NaN");
    const double signal = sum_squares(x.data()) / static_cast<double>(x.size());
    const double sd = std::sqrt(signal / std::pow(10.0, snr_db / 10.0));
    std::normal_distribution<double> nd(0.0, sd);
    Tensor out = x;
    for (auto& v : out.raw()) v += nd(rng);
    return out;
}

/// w + sigma * N(0, 1) on weight entries; architecture and dropout entries
/// are copied unchanged.
inline ParamSet perturb_params(const ParamSet& params, double sigma, std::mt19937_64& rng) {
    if (!(sigma >= 0.0)) throw ConfigError("perturb_params: sigma must be >= 0");
    ParamSet out = params;
    if (sigma == 0.0) return out;
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& [name, t] : out)
        if (param_role(name) == ParamRole::Weight)
            for (auto& v : t.raw()) v += sigma * nd(rng);
    return out;
}

}  // namespace udarts
