// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "udarts/autodiff.hpp"
#include "udarts/uncertainty.hpp"

namespace udarts {

enum class OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
    Zero,
};

inline constexpr std::array<OpKind, 8> kAllOps = {OpKind::SepConv3x3, OpKind::SepConv5x5, OpKind::DilConv3x3,
                                                  OpKind::DilConv5x5, OpKind::MaxPool3x3, OpKind::AvgPool3x3,
                                                  OpKind::Identity,   OpKind::Zero};

inline std::string_view op_name(OpKind k) {
    switch (k) {
        case OpKind::SepConv3x3: return "sep_conv_3x3";
        case OpKind::SepConv5x5: return "sep_conv_5x5";
        case OpKind::DilConv3x3: return "dil_conv_3x3";
        case OpKind::DilConv5x5: return "dil_conv_5x5";
        case OpKind::MaxPool3x3: return "max_pool_3x3";
        case OpKind::AvgPool3x3: return "avg_pool_3x3";
        case OpKind::Identity: return "identity";
        case OpKind::Zero: return "zero";
    }
    return "?";
}

inline OpKind op_from_name(std::string_view name) {
    for (OpKind k : kAllOps)
        if (op_name(k) == name) return k;
    throw ParseError("unknown operation '" + std::string(name) + "'");
}

/// Ordered candidate set. The position of an op is its alpha column, so the
/// order is part of the checkpoint format.
struct OpCatalog {
    std::vector<OpKind> ops;

    static OpCatalog darts() { return {std::vector<OpKind>(kAllOps.begin(), kAllOps.end())}; }

    std::size_t size() const noexcept { return ops.size(); }

    std::optional<std::size_t> index_of(OpKind k) const {
        for (std::size_t i = 0; i < ops.size(); ++i)
            if (ops[i] == k) return i;
        return std::nullopt;
    }
};

enum class CellKind { Normal, Reduction };

/// Edge bookkeeping of a cell with two input states and `n_nodes`
/// intermediate nodes. Intermediate node j (0-based) reads states 0..j+1, and
/// edges are numbered node-major.
struct CellGraph {
    std::size_t n_nodes = 4;
    CellKind kind = CellKind::Normal;

    std::size_t edge_count() const noexcept { return n_nodes * (n_nodes + 3) / 2; }
    static std::size_t first_edge(std::size_t node) noexcept { return node * (node + 3) / 2; }
    static std::size_t in_degree(std::size_t node) noexcept { return node + 2; }
    std::size_t edge_index(std::size_t node, std::size_t pred) const {
        if (node >= n_nodes || pred >= in_degree(node)) throw ShapeError("edge outside the cell DAG");
        return first_edge(node) + pred;
    }
    std::size_t predecessor(std::size_t edge) const {
        for (std::size_t j = 0; j < n_nodes; ++j)
            if (edge < first_edge(j) + in_degree(j)) return edge - first_edge(j);
        throw ShapeError("edge index out of range");
    }
    std::size_t node_of(std::size_t edge) const {
        for (std::size_t j = 0; j < n_nodes; ++j)
            if (edge < first_edge(j) + in_degree(j)) return j;
        throw ShapeError("edge index out of range");
    }
};

struct NetworkSpec {
    std::size_t input_channels = 3;
    std::size_t input_height = 8;
    std::size_t input_width = 8;
    std::size_t classes = 10;
    std::size_t n_cells = 4;
    std::size_t n_nodes = 4;
    std::size_t channels = 8;
    std::size_t stem_multiplier = 3;
    std::vector<std::size_t> reduction_positions{1, 2};
    bool dropout_in_ops = true;
    bool dropout_before_classifier = true;

    /// Desk default: reductions at one and two thirds of the depth.
    static NetworkSpec desk(std::size_t n_cells = 4) {
        NetworkSpec s;
        s.n_cells = n_cells;
        s.reduction_positions = default_reductions(n_cells);
        return s;
    }

    static std::vector<std::size_t> default_reductions(std::size_t n_cells) {
        std::vector<std::size_t> r;
        for (std::size_t k : {n_cells / 3, 2 * n_cells / 3})
            if (k > 0 && k < n_cells && std::find(r.begin(), r.end(), k) == r.end()) r.push_back(k);
        return r;
    }

    bool is_reduction(std::size_t cell) const {
        return std::find(reduction_positions.begin(), reduction_positions.end(), cell) != reduction_positions.end();
    }

    bool has_dropout() const noexcept { return dropout_in_ops || dropout_before_classifier; }

    void validate() const {
        if (n_cells == 0 || n_nodes == 0 || channels == 0 || classes < 2 || input_channels == 0 ||
            input_height == 0 || input_width == 0 || stem_multiplier == 0)
            throw ConfigError("network spec: extents must be positive and classes >= 2");
        for (std::size_t r : reduction_positions)
            if (r == 0 || r >= n_cells)
                throw ConfigError("network spec: reduction position " + std::to_string(r) + " not inside (0, " +
                                  std::to_string(n_cells) + ")");
    }
};

/// Per intermediate node, its retained (edge, op) pairs.
struct DiscreteArchitecture {
    struct Choice {
        std::size_t edge = 0;
        OpKind op = OpKind::Identity;
        bool operator==(const Choice&) const = default;
    };
    std::vector<std::vector<Choice>> normal;
    std::vector<std::vector<Choice>> reduce;

    const std::vector<std::vector<Choice>>& cell(CellKind k) const { return k == CellKind::Normal ? normal : reduce; }
    bool operator==(const DiscreteArchitecture&) const = default;
};

inline nlohmann::json to_json(const DiscreteArchitecture& d) {
    auto side = [](const std::vector<std::vector<DiscreteArchitecture::Choice>>& nodes) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& node : nodes) {
            nlohmann::json n = nlohmann::json::array();
            for (const auto& c : node) n.push_back({c.edge, std::string(op_name(c.op))});
            arr.push_back(n);
        }
        return arr;
    };
    return {{"normal", side(d.normal)}, {"reduce", side(d.reduce)}};
}

inline DiscreteArchitecture discrete_from_json(const nlohmann::json& j) {
    auto side = [](const nlohmann::json& arr) {
        std::vector<std::vector<DiscreteArchitecture::Choice>> nodes;
        for (const auto& n : arr) {
            std::vector<DiscreteArchitecture::Choice> cs;
            for (const auto& c : n) cs.push_back({c.at(0).get<std::size_t>(), op_from_name(c.at(1).get<std::string>())});
            nodes.push_back(std::move(cs));
        }
        return nodes;
    };
    try {
        return {side(j.at("normal")), side(j.at("reduce"))};
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("discrete architecture: ") + e.what());
    }
}

inline constexpr std::string_view kAlphaNormal = "alpha/normal";
inline constexpr std::string_view kAlphaReduce = "alpha/reduce";
inline constexpr std::string_view kDropPrefix = "drop/";
inline constexpr std::string_view kAlphaPrefix = "alpha/";

/// Role of a parameter, by naming convention.
enum class ParamRole { Weight, Alpha, Dropout };

inline ParamRole param_role(std::string_view name) {
    if (name.starts_with(kAlphaPrefix)) return ParamRole::Alpha;
    if (name.starts_with(kDropPrefix)) return ParamRole::Dropout;
    return ParamRole::Weight;
}

/// Per node, the k (edge, op) pairs with the largest softmax weight, `zero`
/// excluded. Each edge contributes its best op; edges are ranked by that
/// weight with ties going to the lower edge index, ops to the lower op index.
inline std::vector<std::vector<DiscreteArchitecture::Choice>> discretize_cell(const Tensor& alpha, const OpCatalog& catalog,
                                                                              std::size_t n_nodes, std::size_t k) {
    CellGraph cg{n_nodes};
    if (alpha.rank() != 2 || alpha.dim(0) != cg.edge_count() || alpha.dim(1) != catalog.size())
        throw ShapeError("alpha shape " + shape_str(alpha.shape()) + " does not match cell with " +
                         std::to_string(n_nodes) + " nodes and " + std::to_string(catalog.size()) + " ops");
    std::vector<std::vector<DiscreteArchitecture::Choice>> out;
    for (std::size_t j = 0; j < n_nodes; ++j) {
        struct Cand {
            double w;
            std::size_t edge;
            std::size_t op;
        };
        std::vector<Cand> best;
        for (std::size_t pred = 0; pred < CellGraph::in_degree(j); ++pred) {
            const std::size_t e = cg.edge_index(j, pred);
            const std::size_t o = catalog.size();
            const double* row = alpha.raw().data() + e * o;
            const double m = *std::max_element(row, row + o);
            double z = 0.0;
            for (std::size_t i = 0; i < o; ++i) z += std::exp(row[i] - m);
            std::optional<Cand> top;
            for (std::size_t i = 0; i < o; ++i) {
                if (catalog.ops[i] == OpKind::Zero) continue;
                const double w = std::exp(row[i] - m) / z;
                if (!top || w > top->w) top = Cand{w, e, i};
            }
            if (top) best.push_back(*top);
        }
        if (k > best.size())
            throw ConfigError("discretize: k=" + std::to_string(k) + " exceeds the " + std::to_string(best.size()) +
                              " non-zero candidate edges of node " + std::to_string(j));
        std::stable_sort(best.begin(), best.end(), [](const Cand& a, const Cand& b) {
            if (a.w != b.w) return a.w > b.w;
            return a.edge < b.edge;
        });
        std::vector<DiscreteArchitecture::Choice> node;
        for (std::size_t i = 0; i < k; ++i) node.push_back({best[i].edge, catalog.ops[best[i].op]});
        std::sort(node.begin(), node.end(), [](const auto& a, const auto& b) { return a.edge < b.edge; });
        out.push_back(std::move(node));
    }
    return out;
}

inline DiscreteArchitecture discretize(const ParamSet& params, const OpCatalog& catalog, std::size_t n_nodes,
                                       std::size_t k = 2) {
    return {discretize_cell(params.at(std::string(kAlphaNormal)), catalog, n_nodes, k),
            discretize_cell(params.at(std::string(kAlphaReduce)), catalog, n_nodes, k)};
}

struct ForwardOptions {
    BnMode bn = BnMode::Train;
    const Buffers* running = nullptr;  // read in Eval mode
    Buffers* update = nullptr;         // folded into in Train mode
    bool sample_dropout = true;        // false: dropout sites act as identity
    std::mt19937_64* rng = nullptr;    // mask source when sampling
    double temperature = 0.1;
};

struct ForwardResult {
    Var logits;
    std::vector<SiteVars> sites;
};

/// Candidate op applied to an edge, or an invalid Var for `zero`.
using OpApplier = std::function<Var(OpKind, Var)>;

/// softmax(alpha_row)-weighted sum of every candidate applied to x.
inline Var mixed_op_forward(Var x, Var alpha_row, const OpCatalog& catalog, const OpApplier& apply) {
    if (alpha_row.value().size() != catalog.size())
        throw ShapeError("alpha row has " + std::to_string(alpha_row.value().size()) + " entries for " +
                         std::to_string(catalog.size()) + " candidate ops");
    Var w = ops::softmax(alpha_row);
    std::vector<Var> outs;
    outs.reserve(catalog.size());
    for (OpKind k : catalog.ops) outs.push_back(apply(k, x));
    return ops::weighted_sum(outs, w);
}

/// Stacked DARTS cells over a stem and a pooled linear classifier. With a
/// DiscreteArchitecture the mixed edges are replaced by the retained ops.
class Network {
public:
    Network(NetworkSpec spec, OpCatalog catalog = OpCatalog::darts(),
            std::optional<DiscreteArchitecture> discrete = std::nullopt)
        : spec_(std::move(spec)), catalog_(std::move(catalog)), discrete_(std::move(discrete)) {
        spec_.validate();
        if (catalog_.size() == 0) throw ConfigError("empty op catalog");
        if (discrete_) {
            for (const auto* side : {&discrete_->normal, &discrete_->reduce}) {
                if (side->size() != spec_.n_nodes) throw ConfigError("discrete architecture node count mismatch");
                CellGraph cg{spec_.n_nodes};
                for (std::size_t j = 0; j < side->size(); ++j)
                    for (const auto& c : (*side)[j]) {
                        if (c.edge >= cg.edge_count() || cg.node_of(c.edge) != j)
                            throw ConfigError("discrete architecture edge " + std::to_string(c.edge) +
                                              " does not feed node " + std::to_string(j));
                        if (c.op == OpKind::Zero) throw ConfigError("discrete architecture retains a zero op");
                    }
            }
        }
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    const OpCatalog& catalog() const noexcept { return catalog_; }
    const std::optional<DiscreteArchitecture>& discrete() const noexcept { return discrete_; }
    std::size_t edges() const noexcept { return CellGraph{spec_.n_nodes}.edge_count(); }

    /// Creates every parameter by tracing a forward pass: conv/linear weights
    /// uniform in +-sqrt(6/(fan_in+fan_out)), BN scale 1 and shift 0, alpha
    /// 1e-3 * N(0,1), dropout logits at logit(init_p).
    ParamSet init_params(std::mt19937_64& rng, const DropoutConfig& dropout = {}) const {
        ParamSet store;
        Buffers buffers;
        initialize(rng, dropout, store, buffers);
        return store;
    }

    /// Running statistics for every batch-norm layer (mean 0, variance 1).
    Buffers init_buffers() const {
        ParamSet store;
        Buffers buffers;
        std::mt19937_64 rng(0);
        initialize(rng, {}, store, buffers);
        return buffers;
    }

    ForwardResult forward(Graph& g, Var x, const ForwardOptions& opt) const { return forward_impl(g, x, opt, nullptr); }

private:
    void initialize(std::mt19937_64& rng, const DropoutConfig& dropout, ParamSet& store, Buffers& buffers) const {
        if (!discrete_) {
            std::normal_distribution<double> nd(0.0, 1.0);
            for (auto name : {kAlphaNormal, kAlphaReduce}) {
                Tensor a({edges(), catalog_.size()});
                for (auto& v : a.raw()) v = 1e-3 * nd(rng);
                store.emplace(std::string(name), std::move(a));
            }
        }
        Init init{&store, &buffers, &rng, logit_of(dropout.init_p)};
        Graph g(&store);
        ForwardOptions opt;
        opt.sample_dropout = false;
        Tensor x({2, spec_.input_channels, spec_.input_height, spec_.input_width});
        forward_impl(g, g.input(std::move(x)), opt, &init);
    }

    struct Init {
        ParamSet* store;
        Buffers* buffers;
        std::mt19937_64* rng;
        double drop_logit;
    };

    enum class InitKind { Glorot, One, Zero, DropLogit };

    struct Ctx {
        Graph& g;
        const ForwardOptions& opt;
        Init* init;
        std::vector<SiteVars>* sites;
    };

    static double glorot_bound(const Shape& s) {
        double fan_in, fan_out;
        if (s.size() == 4) {
            const double rf = static_cast<double>(s[2] * s[3]);
            fan_in = static_cast<double>(s[1]) * rf;
            fan_out = static_cast<double>(s[0]) * rf;
        } else {
            fan_in = static_cast<double>(s[0]);
            fan_out = static_cast<double>(s.size() > 1 ? s[1] : 1);
        }
        return std::sqrt(6.0 / (fan_in + fan_out));
    }

    Var param(Ctx& c, const std::string& name, const Shape& shape, InitKind kind) const {
        if (c.init && !c.init->store->count(name)) {
            Tensor t(shape);
            switch (kind) {
                case InitKind::Glorot: {
                    const double b = glorot_bound(shape);
                    std::uniform_real_distribution<double> u(-b, b);
                    for (auto& v : t.raw()) v = u(*c.init->rng);
                    break;
                }
                case InitKind::One: t.fill(1.0); break;
                case InitKind::Zero: break;
                case InitKind::DropLogit: t.fill(c.init->drop_logit); break;
            }
            c.init->store->emplace(name, std::move(t));
        }
        Var v = c.g.param(name);
        if (v.shape() != shape)
            throw ShapeError("parameter '" + name + "' has shape " + shape_str(v.shape()) + ", network expects " +
                             shape_str(shape) + " (channel mismatch)");
        return v;
    }

    Var conv(Ctx& c, const std::string& name, Var x, std::size_t cout, std::size_t k, ops::ConvOptions o) const {
        const std::size_t cin = x.shape()[1];
        return ops::conv2d(x, param(c, name, {cout, cin / o.groups, k, k}, InitKind::Glorot), o);
    }

    Var bn(Ctx& c, const std::string& name, Var x) const {
        const std::size_t ch = x.shape()[1];
        Var gamma = param(c, name + "/gamma", {ch}, InitKind::One);
        Var beta = param(c, name + "/beta", {ch}, InitKind::Zero);
        if (c.init) {
            if (!c.init->buffers->count(name))
                c.init->buffers->emplace(name, BnStats{Tensor(Shape{ch}, 0.0), Tensor(Shape{ch}, 1.0)});
            return ops::batch_norm(x, gamma, beta, BnMode::Train);
        }
        const BnStats* running = nullptr;
        BnStats* update = nullptr;
        if (c.opt.running) {
            auto it = c.opt.running->find(name);
            if (it != c.opt.running->end()) running = &it->second;
        }
        if (c.opt.update) {
            auto it = c.opt.update->find(name);
            if (it == c.opt.update->end()) throw StateError("no running statistics for '" + name + "'");
            update = &it->second;
        }
        if (c.opt.bn == BnMode::Eval && !running) throw StateError("no running statistics for '" + name + "'");
        return ops::batch_norm(x, gamma, beta, c.opt.bn, running, c.opt.bn == BnMode::Train ? update : nullptr);
    }

    /// Concrete-dropout site; `consumers` are the weights the dropped tensor feeds.
    Var dropout_site(Ctx& c, const std::string& name, Var x) const {
        Var logit = param(c, std::string(kDropPrefix) + name, {1}, InitKind::DropLogit);
        if (c.sites) c.sites->push_back(SiteVars{logit, Var{}, static_cast<double>(x.value().size() / x.shape()[0])});
        if (c.init || !c.opt.sample_dropout) return x;
        if (!c.opt.rng) throw StateError("dropout sampling requested without an RNG");
        return ops::concrete_dropout(x, logit, c.opt.temperature, draw_uniforms(x.shape(), *c.opt.rng));
    }

    void attach_consumer(Ctx& c, Var sqnorm) const {
        if (c.sites && !c.sites->empty() && !c.sites->back().weight_sqnorm.valid()) c.sites->back().weight_sqnorm = sqnorm;
    }

    /// ReLU -> [dropout] -> depthwise k x k -> pointwise 1x1 -> BN
    Var relu_dw_pw_bn(Ctx& c, const std::string& p, const std::string& tag, Var x, std::size_t k, std::size_t stride,
                      std::size_t dilation) const {
        const std::size_t ch = x.shape()[1];
        Var h = ops::relu(x);
        if (spec_.dropout_in_ops) h = dropout_site(c, p + "/" + tag, h);
        Var dw = param(c, p + "/dw" + tag, {ch, 1, k, k}, InitKind::Glorot);
        Var pw = param(c, p + "/pw" + tag, {ch, ch, 1, 1}, InitKind::Glorot);
        if (spec_.dropout_in_ops) attach_consumer(c, ops::add(ops::sum_squares(dw), ops::sum_squares(pw)));
        h = ops::conv2d(h, dw, {stride, dilation * (k - 1) / 2, dilation, ch});
        h = ops::conv2d(h, pw, {});
        return bn(c, p + "/bn" + tag, h);
    }

    Var apply_op(Ctx& c, OpKind kind, Var x, const std::string& edge, std::size_t stride) const {
        const std::string p = edge + "/" + std::string(op_name(kind));
        switch (kind) {
            case OpKind::SepConv3x3:
            case OpKind::SepConv5x5: {
                const std::size_t k = kind == OpKind::SepConv3x3 ? 3 : 5;
                Var h = relu_dw_pw_bn(c, p, "1", x, k, stride, 1);
                return relu_dw_pw_bn(c, p, "2", h, k, 1, 1);
            }
            case OpKind::DilConv3x3: return relu_dw_pw_bn(c, p, "1", x, 3, stride, 2);
            case OpKind::DilConv5x5: return relu_dw_pw_bn(c, p, "1", x, 5, stride, 2);
            case OpKind::MaxPool3x3: return ops::max_pool3x3(x, stride);
            case OpKind::AvgPool3x3: return ops::avg_pool3x3(x, stride);
            case OpKind::Identity: {
                if (stride == 1) return x;
                // Strided skip: ReLU -> 1x1 conv (stride 2) -> BN.
                Var h = conv(c, p + "/conv", ops::relu(x), x.shape()[1], 1, {stride, 0, 1, 1});
                return bn(c, p + "/bn", h);
            }
            case OpKind::Zero: return Var{};
        }
        throw StateError("unhandled op kind");
    }

    Var relu_conv_bn(Ctx& c, const std::string& p, Var x, std::size_t cout, std::size_t stride) const {
        Var h = conv(c, p + "/conv", ops::relu(x), cout, 1, {stride, 0, 1, 1});
        return bn(c, p + "/bn", h);
    }

    Var cell(Ctx& c, std::size_t index, Var s0, Var s1, std::size_t ch, bool reduction, bool reduction_prev) const {
        const std::string prefix = "cell" + std::to_string(index);
        s0 = relu_conv_bn(c, prefix + "/pre0", s0, ch, reduction_prev ? 2 : 1);
        s1 = relu_conv_bn(c, prefix + "/pre1", s1, ch, 1);
        if (s0.shape() != s1.shape())
            throw ShapeError("cell " + std::to_string(index) + " inputs disagree: " + shape_str(s0.shape()) + " vs " +
                             shape_str(s1.shape()));
        std::vector<Var> states{s0, s1};
        CellGraph cg{spec_.n_nodes, reduction ? CellKind::Reduction : CellKind::Normal};
        Var weights;
        if (!discrete_) {
            Var alpha = c.g.param(std::string(reduction ? kAlphaReduce : kAlphaNormal));
            if (alpha.shape() != Shape{cg.edge_count(), catalog_.size()})
                throw ShapeError("alpha has shape " + shape_str(alpha.shape()) + ", cell expects " +
                                 shape_str({cg.edge_count(), catalog_.size()}));
            weights = ops::softmax(alpha);
        }
        for (std::size_t j = 0; j < spec_.n_nodes; ++j) {
            Var node;
            auto accumulate = [&](Var v) { node = node.valid() ? ops::add(node, v) : v; };
            if (discrete_) {
                for (const auto& choice : discrete_->cell(cg.kind)[j]) {
                    const std::size_t pred = cg.predecessor(choice.edge);
                    const std::size_t stride = reduction && pred < 2 ? 2 : 1;
                    accumulate(apply_op(c, choice.op, states[pred], prefix + "/edge" + std::to_string(choice.edge), stride));
                }
            } else {
                for (std::size_t pred = 0; pred < CellGraph::in_degree(j); ++pred) {
                    const std::size_t e = cg.edge_index(j, pred);
                    const std::size_t stride = reduction && pred < 2 ? 2 : 1;
                    const std::string edge = prefix + "/edge" + std::to_string(e);
                    Var w = ops::row(weights, e);
                    std::vector<Var> outs;
                    for (OpKind k : catalog_.ops) outs.push_back(apply_op(c, k, states[pred], edge, stride));
                    accumulate(ops::weighted_sum(outs, w));
                }
            }
            if (!node.valid()) throw ConfigError("node " + std::to_string(j) + " of cell " + std::to_string(index) + " has no inputs");
            states.push_back(node);
        }
        return ops::concat_channels(std::vector<Var>(states.begin() + 2, states.end()));
    }

    ForwardResult forward_impl(Graph& g, Var x, const ForwardOptions& opt, Init* init) const {
        const Shape& xs = x.shape();
        if (xs.size() != 4 || xs[1] != spec_.input_channels)
            throw ShapeError("network input " + shape_str(xs) + " does not have " +
                             std::to_string(spec_.input_channels) + " channels");
        ForwardResult r;
        Ctx c{g, opt, init, &r.sites};
        const std::size_t c_stem = spec_.stem_multiplier * spec_.channels;
        Var s = bn(c, "stem/bn", conv(c, "stem/conv", x, c_stem, 3, {1, 1, 1, 1}));
        Var s0 = s, s1 = s;
        std::size_t ch = spec_.channels;
        bool reduction_prev = false;
        for (std::size_t i = 0; i < spec_.n_cells; ++i) {
            const bool reduction = spec_.is_reduction(i);
            if (reduction) ch *= 2;
            Var out = cell(c, i, s0, s1, ch, reduction, reduction_prev);
            s0 = s1;
            s1 = out;
            reduction_prev = reduction;
        }
        Var feat = ops::global_avg_pool(s1);
        if (spec_.dropout_before_classifier) feat = dropout_site(c, "classifier", feat);
        Var w = param(c, "classifier/weight", {feat.shape()[1], spec_.classes}, InitKind::Glorot);
        Var b = param(c, "classifier/bias", {spec_.classes}, InitKind::Zero);
        if (spec_.dropout_before_classifier) attach_consumer(c, ops::sum_squares(w));
        r.logits = ops::add_bias(ops::matmul(feat, w), b);
        return r;
    }

    NetworkSpec spec_;
    OpCatalog catalog_;
    std::optional<DiscreteArchitecture> discrete_;
};

/// A network bound to concrete parameters, usable with mc_predict.
struct BoundNetwork {
    const Network* net;
    const ParamSet* params;
    const Buffers* buffers = nullptr;
    BnMode bn = BnMode::Eval;
    bool sample_dropout = true;
    double temperature = 0.1;

    Tensor predict_probs(const Tensor& x, std::mt19937_64& rng) const {
        Graph g(params);
        ForwardOptions opt;
        opt.bn = bn;
        opt.running = buffers;
        opt.sample_dropout = sample_dropout && net->spec().has_dropout();
        opt.rng = &rng;
        opt.temperature = temperature;
        Var probs = ops::softmax(net->forward(g, g.input(x), opt).logits);
        return probs.value();
    }
};

}  // namespace udarts
