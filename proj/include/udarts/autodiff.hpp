// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "udarts/tensor.hpp"

namespace udarts {

/// Named leaf tensors. std::map keeps iteration order (and therefore every
/// flattening of a parameter set) deterministic.
using ParamSet = std::map<std::string, Tensor>;
using NamedTensors = std::map<std::string, Tensor>;

inline ParamSet zeros_like(const ParamSet& p) {
    ParamSet out;
    for (const auto& [k, v] : p) out.emplace(k, Tensor::zeros(v.shape()));
    return out;
}

class Graph;

/// Handle to a node on a Graph's tape.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    bool valid() const noexcept { return graph != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Dynamic reverse-mode tape. Nodes are appended in creation order, which is
/// a topological order, and backward() walks them in exact reverse.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(const ParamSet* params = nullptr) : params_(params) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(Tensor t) { return push(std::move(t), {}, nullptr, "input", false); }
    Var constant(Tensor t) { return push(std::move(t), {}, nullptr, "constant", false); }

    /// Leaf bound to the parameter set. Repeated calls return the same node.
    Var param(const std::string& name) {
        if (!params_) throw StateError("graph has no parameter set bound (param '" + name + "')");
        if (auto it = leaf_ids_.find(name); it != leaf_ids_.end()) return Var{this, it->second};
        auto p = params_->find(name);
        if (p == params_->end()) throw StateError("unknown parameter '" + name + "'");
        Var v = push(p->second, {}, nullptr, "param", true);
        leaf_ids_.emplace(name, v.id);
        return v;
    }

    bool has_param(const std::string& name) const { return params_ && params_->count(name) > 0; }
    const ParamSet* params() const noexcept { return params_; }

    /// Appends an op result. Non-finite outputs are rejected here so that every
    /// primitive surfaces NaN/Inf at the op that produced it.
    Var record(Tensor value, std::vector<Var> parents, BackwardFn fn, std::string_view op) {
        if (!value.all_finite()) throw NonFiniteError("non-finite output from op '" + std::string(op) + "'");
        std::vector<std::size_t> ids;
        ids.reserve(parents.size());
        bool needs = false;
        for (const Var& p : parents) {
            if (p.graph != this) throw StateError("op '" + std::string(op) + "' mixes graphs");
            ids.push_back(p.id);
            needs = needs || nodes_[p.id].requires_grad;
        }
        return push(std::move(value), std::move(ids), needs ? std::move(fn) : nullptr, op, needs);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Incoming gradient of a node during backward.
    const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

    /// Accumulation target for a parent, or nullptr when it needs no gradient.
    Tensor* accum(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape());
            n.has_grad = true;
        }
        return &n.grad;
    }

    /// Seeds `out` and propagates. Returns a gradient for every parameter in the
    /// bound set; parameters not reached by the tape get zeros.
    ParamSet backward(Var out, const Tensor& seed) {
        if (nodes_.empty()) throw StateError("backward called before forward (empty tape)");
        if (out.graph != this || out.id >= nodes_.size()) throw StateError("backward on a foreign node");
        if (seed.shape() != nodes_[out.id].value.shape())
            throw ShapeError("seed shape " + shape_str(seed.shape()) + " does not match output " +
                             shape_str(nodes_[out.id].value.shape()));
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        if (nodes_[out.id].requires_grad) {
            nodes_[out.id].grad = seed;
            nodes_[out.id].has_grad = true;
        }
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad || !n.fn) continue;
            n.fn(*this, i);
        }
        ParamSet grads;
        if (params_) {
            for (const auto& [name, t] : *params_) {
                auto it = leaf_ids_.find(name);
                if (it != leaf_ids_.end() && nodes_[it->second].has_grad)
                    grads.emplace(name, nodes_[it->second].grad);
                else
                    grads.emplace(name, Tensor::zeros(t.shape()));
            }
        }
        backward_ran_ = true;
        return grads;
    }

    ParamSet backward(Var out) {
        if (out.valid() && out.value().size() != 1)
            throw ShapeError("implicit seed needs a scalar output, got " + shape_str(out.shape()));
        return backward(out, Tensor::scalar(1.0));
    }

    /// Gradient w.r.t. an arbitrary node after backward() (zeros if unreached).
    Tensor grad_of(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (!backward_ran_) throw StateError("grad_of before backward");
        return n.has_grad ? n.grad : Tensor::zeros(n.value.shape());
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> parents;
        BackwardFn fn;
        std::string_view op;
        bool requires_grad = false;
        bool has_grad = false;
    };

    Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, std::string_view op, bool rg) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(fn), op, rg, false});
        return Var{this, nodes_.size() - 1};
    }

    const ParamSet* params_ = nullptr;
    std::deque<Node> nodes_;  // stable references across appends
    std::map<std::string, std::size_t> leaf_ids_;
    bool backward_ran_ = false;
};

inline const Tensor& Var::value() const {
    if (!graph) throw StateError("value() on an empty Var");
    return graph->value(id);
}

/// A callable model with a declared input signature. An extent of 0 in the
/// signature matches any size (used for the batch axis).
class Program {
public:
    using Body = std::function<std::map<std::string, Var>(Graph&, const std::map<std::string, Var>&)>;

    Program(std::map<std::string, Shape> signature, Body body)
        : signature_(std::move(signature)), body_(std::move(body)) {}

    std::map<std::string, Var> forward(Graph& g, const NamedTensors& inputs) const {
        std::map<std::string, Var> vars;
        for (const auto& [name, shape] : signature_) {
            auto it = inputs.find(name);
            if (it == inputs.end()) throw ShapeError("missing input '" + name + "'");
            const Shape& got = it->second.shape();
            bool ok = got.size() == shape.size();
            for (std::size_t i = 0; ok && i < shape.size(); ++i) ok = shape[i] == 0 || shape[i] == got[i];
            if (!ok)
                throw ShapeError("input '" + name + "' has shape " + shape_str(got) + ", expected " +
                                 shape_str(shape));
            vars.emplace(name, g.input(it->second));
        }
        return body_(g, vars);
    }

private:
    std::map<std::string, Shape> signature_;
    Body body_;
};

/// Running statistics of one batch-norm layer.
struct BnStats {
    Tensor mean;
    Tensor var;
};
using Buffers = std::map<std::string, BnStats>;

enum class BnMode { Train, Eval };

namespace ops {

namespace detail {
inline Graph& graph_of(const Var& a) {
    if (!a.valid()) throw StateError("op on an empty Var");
    return *a.graph;
}
}  // namespace detail

inline Var add(Var a, Var b) {
    Graph& g = detail::graph_of(a);
    a.value().require_same(b.value(), "add");
    Tensor out = a.value();
    out += b.value();
    return g.record(std::move(out), {a, b}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        for (std::size_t p : g.parents(self))
            if (Tensor* d = g.accum(p)) *d += go;
    }, "add");
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::graph_of(a);
    a.value().require_same(b.value(), "sub");
    Tensor out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return g.record(std::move(out), {a, b}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        if (Tensor* d = g.accum(ps[0])) *d += go;
        if (Tensor* d = g.accum(ps[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] -= go[i];
    }, "sub");
}

inline Var mul(Var a, Var b) {
    Graph& g = detail::graph_of(a);
    a.value().require_same(b.value(), "mul");
    Tensor out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return g.record(std::move(out), {a, b}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& av = g.value(ps[0]);
        const Tensor& bv = g.value(ps[1]);
        if (Tensor* d = g.accum(ps[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * bv[i];
        if (Tensor* d = g.accum(ps[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * av[i];
    }, "mul");
}

inline Var scale(Var a, double c) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    for (auto& v : out.raw()) v *= c;
    return g.record(std::move(out), {a}, [c](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += c * go[i];
    }, "scale");
}

/// x * s where s is a single-element node.
inline Var scale_by(Var x, Var s) {
    Graph& g = detail::graph_of(x);
    if (s.value().size() != 1) throw ShapeError("scale_by expects a scalar factor");
    const double c = s.value()[0];
    Tensor out = x.value();
    for (auto& v : out.raw()) v *= c;
    return g.record(std::move(out), {x, s}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& xv = g.value(ps[0]);
        const double c = g.value(ps[1])[0];
        if (Tensor* d = g.accum(ps[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += c * go[i];
        if (Tensor* d = g.accum(ps[1])) (*d)[0] += dot(go.data(), xv.data());
    }, "scale_by");
}

inline Var square(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    for (auto& v : out.raw()) v *= v;
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        std::size_t p = g.parents(self)[0];
        const Tensor& av = g.value(p);
        if (Tensor* d = g.accum(p))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += 2.0 * av[i] * go[i];
    }, "square");
}

inline Var log(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    for (auto& v : out.raw()) v = std::log(v);
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        std::size_t p = g.parents(self)[0];
        const Tensor& av = g.value(p);
        if (Tensor* d = g.accum(p))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] / av[i];
    }, "log");
}

inline Var sum(Var a) {
    Graph& g = detail::graph_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return g.record(Tensor::scalar(s), {a}, [](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0];
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (auto& v : d->raw()) v += go;
    }, "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of squares of all elements, as a scalar.
inline Var sum_squares(Var a) {
    Graph& g = detail::graph_of(a);
    return g.record(Tensor::scalar(udarts::sum_squares(a.value().data())), {a}, [](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0];
        std::size_t p = g.parents(self)[0];
        const Tensor& av = g.value(p);
        if (Tensor* d = g.accum(p))
            for (std::size_t i = 0; i < av.size(); ++i) (*d)[i] += 2.0 * av[i] * go;
    }, "sum_squares");
}

inline Var reshape(Var a, Shape s) {
    Graph& g = detail::graph_of(a);
    if (shape_numel(s) != a.value().size())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
    return g.record(a.value().reshaped(std::move(s)), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i];
    }, "reshape");
}

/// Element `index` of a vector node, as a [1] node.
inline Var select(Var a, std::size_t index) {
    Graph& g = detail::graph_of(a);
    if (index >= a.value().size()) throw ShapeError("select index out of range");
    return g.record(Tensor::scalar(a.value()[index]), {a}, [index](Graph& g, std::size_t self) {
        if (Tensor* d = g.accum(g.parents(self)[0])) (*d)[index] += g.grad(self)[0];
    }, "select");
}

/// Row `r` of a rank-2 node.
inline Var row(Var a, std::size_t r) {
    Graph& g = detail::graph_of(a);
    const Tensor& av = a.value();
    if (av.rank() != 2 || r >= av.dim(0)) throw ShapeError("row index out of range");
    const std::size_t n = av.dim(1);
    std::vector<double> out(av.raw().begin() + r * n, av.raw().begin() + (r + 1) * n);
    return g.record(Tensor::vector(std::move(out)), {a}, [r, n](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < n; ++i) (*d)[r * n + i] += go[i];
    }, "row");
}

inline Var relu(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    for (auto& v : out.raw()) v = v > 0.0 ? v : 0.0;
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        std::size_t p = g.parents(self)[0];
        const Tensor& av = g.value(p);
        if (Tensor* d = g.accum(p))
            for (std::size_t i = 0; i < go.size(); ++i)
                if (av[i] > 0.0) (*d)[i] += go[i];
    }, "relu");
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    for (auto& v : out.raw()) v = sigmoid_scalar(v);
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const Tensor& y = g.value(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * y[i] * (1.0 - y[i]);
    }, "sigmoid");
}

namespace detail {
inline void softmax_rows(Tensor& t) {
    const std::size_t n = t.shape().back();
    const std::size_t rows = t.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        double* x = t.raw().data() + r * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (x[i] = std::exp(x[i] - m));
        for (std::size_t i = 0; i < n; ++i) x[i] /= s;
    }
}
}  // namespace detail

/// Softmax over the last axis.
inline Var softmax(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    detail::softmax_rows(out);
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const Tensor& y = g.value(self);
        Tensor* d = g.accum(g.parents(self)[0]);
        if (!d) return;
        const std::size_t n = y.shape().back();
        for (std::size_t r = 0; r < y.size() / n; ++r) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += go[r * n + i] * y[r * n + i];
            for (std::size_t i = 0; i < n; ++i) (*d)[r * n + i] += y[r * n + i] * (go[r * n + i] - s);
        }
    }, "softmax");
}

inline Var log_softmax(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = a.value();
    const std::size_t n = out.shape().back();
    for (std::size_t r = 0; r < out.size() / n; ++r) {
        double* x = out.raw().data() + r * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
        const double lse = m + std::log(s);
        for (std::size_t i = 0; i < n; ++i) x[i] -= lse;
    }
    return g.record(std::move(out), {a}, [](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const Tensor& y = g.value(self);
        Tensor* d = g.accum(g.parents(self)[0]);
        if (!d) return;
        const std::size_t n = y.shape().back();
        for (std::size_t r = 0; r < y.size() / n; ++r) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += go[r * n + i];
            for (std::size_t i = 0; i < n; ++i) (*d)[r * n + i] += go[r * n + i] - std::exp(y[r * n + i]) * s;
        }
    }, "log_softmax");
}

inline void check_labels(const Shape& s, const std::vector<int>& labels, const char* what) {
    if (s.size() != 2 || s[0] != labels.size())
        throw ShapeError(std::string(what) + ": expected [batch, classes] matching " +
                         std::to_string(labels.size()) + " labels, got " + shape_str(s));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= s[1])
            throw ShapeError(std::string(what) + ": label " + std::to_string(y) + " outside [0, " +
                             std::to_string(s[1]) + ")");
}

/// Mean cross-entropy of logits [B, C] against integer labels.
inline Var cross_entropy(Var logits, const std::vector<int>& labels) {
    check_labels(logits.shape(), labels, "cross_entropy");
    Var lp = log_softmax(logits);
    Graph& g = detail::graph_of(logits);
    const std::size_t c = logits.shape()[1];
    const double b = static_cast<double>(labels.size());
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) s -= lp.value()[i * c + labels[i]];
    return g.record(Tensor::scalar(s / b), {lp}, [labels, c, b](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0];
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < labels.size(); ++i) (*d)[i * c + labels[i]] -= go / b;
    }, "cross_entropy");
}

/// Mean negative log-likelihood of class probabilities [B, C].
inline Var nll_from_probs(Var probs, const std::vector<int>& labels) {
    check_labels(probs.shape(), labels, "nll_from_probs");
    Graph& g = detail::graph_of(probs);
    const std::size_t c = probs.shape()[1];
    const double b = static_cast<double>(labels.size());
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) s -= std::log(probs.value()[i * c + labels[i]]);
    return g.record(Tensor::scalar(s / b), {probs}, [labels, c, b](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0];
        std::size_t p = g.parents(self)[0];
        const Tensor& pv = g.value(p);
        if (Tensor* d = g.accum(p))
            for (std::size_t i = 0; i < labels.size(); ++i)
                (*d)[i * c + labels[i]] -= go / (b * pv[i * c + labels[i]]);
    }, "nll_from_probs");
}

/// [M, K] x [K, N].
inline Var matmul(Var a, Var b) {
    Graph& g = detail::graph_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    return g.record(std::move(out), {a, b}, [m, k, n](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& av = g.value(ps[0]);
        const Tensor& bv = g.value(ps[1]);
        if (Tensor* da = g.accum(ps[0]))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * bv[p * n + j];
                    (*da)[i * k + p] += s;
                }
        if (Tensor* db = g.accum(ps[1]))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) (*db)[p * n + j] += aip * go[i * n + j];
                }
    }, "matmul");
}

/// x [N, F] + bias [F] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.rank() != 2 || bv.size() != xv.dim(1))
        throw ShapeError("add_bias " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
    Tensor out = xv;
    const std::size_t f = xv.dim(1);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % f];
    return g.record(std::move(out), {x, bias}, [f](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        if (Tensor* d = g.accum(ps[0])) *d += go;
        if (Tensor* d = g.accum(ps[1]))
            for (std::size_t i = 0; i < go.size(); ++i) (*d)[i % f] += go[i];
    }, "add_bias");
}

struct ConvOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvOptions& o) {
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(o.dilation * (k - 1) + 1);
    const std::ptrdiff_t padded = static_cast<std::ptrdiff_t>(in + 2 * o.padding);
    if (padded < span) throw ShapeError("convolution window larger than padded input");
    return static_cast<std::size_t>((padded - span) / static_cast<std::ptrdiff_t>(o.stride)) + 1;
}

/// 2-D convolution, NCHW input, weight [Cout, Cin/groups, kh, kw]. Depthwise
/// convolution is groups == Cin; dilated convolution is dilation > 1.
inline Var conv2d(Var x, Var w, ConvOptions o = {}) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d expects rank-4 input and weight");
    const std::size_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const std::size_t cout = wv.dim(0), cpg = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    if (o.groups == 0 || cin % o.groups || cout % o.groups || cpg != cin / o.groups || o.stride == 0)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(xv.shape()) + ", weight " +
                         shape_str(wv.shape()) + ", groups " + std::to_string(o.groups));
    const std::size_t ho = conv_out_extent(h, kh, o), wo = conv_out_extent(wd, kw, o);
    const std::size_t opg = cout / o.groups;
    Tensor out({n, cout, ho, wo});
    const auto pad = static_cast<std::ptrdiff_t>(o.padding);
    // Output rows/columns whose tap (i, j) lands inside the input; computed
    // once per tap so the inner loops carry no bounds checks.
    auto valid_range = [pad, stride = o.stride, dil = o.dilation](std::size_t tap, std::size_t in, std::size_t out_n) {
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tap * dil) - pad;
        const auto s = static_cast<std::ptrdiff_t>(stride);
        std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
        std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - 1 - off);
        hi = hi < 0 ? -1 : hi / s;
        hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_n) - 1);
        return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(lo),
                                                   hi < lo ? static_cast<std::size_t>(lo) : static_cast<std::size_t>(hi + 1)};
    };
    auto body = [=](auto&& visit) {
        for (std::size_t i = 0; i < kh; ++i) {
            const auto [oh0, oh1] = valid_range(i, h, ho);
            for (std::size_t j = 0; j < kw; ++j) {
                const auto [ow0, ow1] = valid_range(j, wd, wo);
                if (oh0 >= oh1 || ow0 >= ow1) continue;
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t oc = 0; oc < cout; ++oc) {
                        const std::size_t grp = oc / opg;
                        for (std::size_t icg = 0; icg < cpg; ++icg) {
                            const std::size_t ic = grp * cpg + icg;
                            const std::size_t widx = ((oc * cpg + icg) * kh + i) * kw + j;
                            for (std::size_t oh = oh0; oh < oh1; ++oh) {
                                const std::size_t ih = oh * o.stride + i * o.dilation - o.padding;
                                const std::size_t xrow = ((b * cin + ic) * h + ih) * wd + j * o.dilation - o.padding;
                                const std::size_t orow = ((b * cout + oc) * ho + oh) * wo;
                                for (std::size_t ow = ow0; ow < ow1; ++ow) visit(xrow + ow * o.stride, widx, orow + ow);
                            }
                        }
                    }
            }
        }
    };
    body([&](std::size_t xi, std::size_t wi, std::size_t oi) { out[oi] += xv[xi] * wv[wi]; });
    return g.record(std::move(out), {x, w}, [body](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& xv = g.value(ps[0]);
        const Tensor& wv = g.value(ps[1]);
        Tensor* dx = g.accum(ps[0]);
        Tensor* dw = g.accum(ps[1]);
        if (dx && dw)
            body([&](std::size_t xi, std::size_t wi, std::size_t oi) {
                (*dx)[xi] += go[oi] * wv[wi];
                (*dw)[wi] += go[oi] * xv[xi];
            });
        else if (dx)
            body([&](std::size_t xi, std::size_t wi, std::size_t oi) { (*dx)[xi] += go[oi] * wv[wi]; });
        else if (dw)
            body([&](std::size_t xi, std::size_t wi, std::size_t oi) { (*dw)[wi] += go[oi] * xv[xi]; });
    }, "conv2d");
}

namespace detail {
struct PoolGeometry {
    std::size_t n, c, h, w, ho, wo, stride;
};

inline PoolGeometry pool_geometry(const Tensor& xv, std::size_t stride) {
    if (xv.rank() != 4) throw ShapeError("pooling expects NCHW input");
    ConvOptions o{stride, 1, 1, 1};
    return {xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), conv_out_extent(xv.dim(2), 3, o),
            conv_out_extent(xv.dim(3), 3, o), stride};
}

template <class F>
void pool_windows(const PoolGeometry& p, F&& f) {
    for (std::size_t b = 0; b < p.n; ++b)
        for (std::size_t ch = 0; ch < p.c; ++ch)
            for (std::size_t oh = 0; oh < p.ho; ++oh)
                for (std::size_t ow = 0; ow < p.wo; ++ow) {
                    const std::size_t oidx = ((b * p.c + ch) * p.ho + oh) * p.wo + ow;
                    for (std::size_t i = 0; i < 3; ++i)
                        for (std::size_t j = 0; j < 3; ++j) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * p.stride + i) - 1;
                            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * p.stride + j) - 1;
                            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(p.h) ||
                                iw >= static_cast<std::ptrdiff_t>(p.w))
                                continue;
                            f(oidx, ((b * p.c + ch) * p.h + ih) * p.w + iw);
                        }
                }
}
}  // namespace detail

/// 3x3 max pooling, padding 1 (padding never wins the max).
inline Var max_pool3x3(Var x, std::size_t stride = 1) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    const auto p = detail::pool_geometry(xv, stride);
    Tensor out({p.n, p.c, p.ho, p.wo}, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> arg(out.size(), 0);
    detail::pool_windows(p, [&](std::size_t o, std::size_t i) {
        if (xv[i] > out[o]) {
            out[o] = xv[i];
            arg[o] = i;
        }
    });
    return g.record(std::move(out), {x}, [arg = std::move(arg)](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t o = 0; o < go.size(); ++o) (*d)[arg[o]] += go[o];
    }, "max_pool3x3");
}

/// 3x3 average pooling, padding 1, padded cells excluded from the count.
inline Var avg_pool3x3(Var x, std::size_t stride = 1) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    const auto p = detail::pool_geometry(xv, stride);
    Tensor out({p.n, p.c, p.ho, p.wo});
    std::vector<double> count(out.size(), 0.0);
    detail::pool_windows(p, [&](std::size_t o, std::size_t i) {
        out[o] += xv[i];
        count[o] += 1.0;
    });
    for (std::size_t o = 0; o < out.size(); ++o) out[o] /= count[o];
    return g.record(std::move(out), {x}, [p, count = std::move(count)](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            detail::pool_windows(p, [&](std::size_t o, std::size_t i) { (*d)[i] += go[o] / count[o]; });
    }, "avg_pool3x3");
}

/// Concatenation along the channel axis of NCHW nodes.
inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat of nothing");
    Graph& g = detail::graph_of(xs.front());
    const Shape& s0 = xs.front().shape();
    if (s0.size() != 4) throw ShapeError("concat_channels expects NCHW");
    std::size_t ctot = 0;
    std::vector<std::size_t> cs;
    for (const Var& v : xs) {
        const Shape& s = v.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: " + shape_str(s) + " vs " + shape_str(s0));
        cs.push_back(s[1]);
        ctot += s[1];
    }
    const std::size_t n = s0[0], hw = s0[2] * s0[3];
    Tensor out({n, ctot, s0[2], s0[3]});
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Tensor& v = xs[k].value();
        for (std::size_t b = 0; b < n; ++b)
            std::copy_n(v.raw().begin() + b * cs[k] * hw, cs[k] * hw, out.raw().begin() + (b * ctot + off) * hw);
        off += cs[k];
    }
    return g.record(std::move(out), xs, [cs, n, hw, ctot](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (Tensor* d = g.accum(ps[k]))
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t i = 0; i < cs[k] * hw; ++i) (*d)[b * cs[k] * hw + i] += go[(b * ctot + off) * hw + i];
            off += cs[k];
        }
    }, "concat_channels");
}

/// [N, C, H, W] -> [N, C]
inline Var global_avg_pool(Var x) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("global_avg_pool expects NCHW");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out({n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += xv[i * hw + j];
        out[i] = s / static_cast<double>(hw);
    }
    return g.record(std::move(out), {x}, [n, c, hw](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        if (Tensor* d = g.accum(g.parents(self)[0]))
            for (std::size_t i = 0; i < n * c; ++i)
                for (std::size_t j = 0; j < hw; ++j) (*d)[i * hw + j] += go[i] / static_cast<double>(hw);
    }, "global_avg_pool");
}

/// Zero candidate: zeros of `out_shape`; its input receives a zero gradient.
inline Var zero(Var x, Shape out_shape) {
    Graph& g = detail::graph_of(x);
    return g.record(Tensor::zeros(std::move(out_shape)), {x}, [](Graph&, std::size_t) {}, "zero");
}

/// sum_k weights[k] * xs[k]; invalid entries in xs are skipped (zero op).
inline Var weighted_sum(const std::vector<Var>& xs, Var weights) {
    Graph& g = detail::graph_of(weights);
    const Tensor& wv = weights.value();
    if (wv.size() != xs.size()) throw ShapeError("weighted_sum: weight count mismatch");
    std::vector<Var> parents{weights};
    std::vector<std::size_t> slot;
    Shape shape;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        if (!xs[k].valid()) continue;
        if (shape.empty()) shape = xs[k].shape();
        if (xs[k].shape() != shape)
            throw ShapeError("mixed op candidates disagree: " + shape_str(xs[k].shape()) + " vs " + shape_str(shape));
        parents.push_back(xs[k]);
        slot.push_back(k);
    }
    if (shape.empty()) throw ShapeError("weighted_sum needs at least one non-zero candidate");
    Tensor out(shape);
    for (std::size_t i = 0; i < slot.size(); ++i) {
        const double c = wv[slot[i]];
        const Tensor& v = parents[i + 1].value();
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += c * v[j];
    }
    return g.record(std::move(out), std::move(parents), [slot](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& wv = g.value(ps[0]);
        Tensor* dw = g.accum(ps[0]);
        for (std::size_t i = 0; i < slot.size(); ++i) {
            const Tensor& v = g.value(ps[i + 1]);
            if (dw) (*dw)[slot[i]] += dot(go.data(), v.data());
            if (Tensor* d = g.accum(ps[i + 1]))
                for (std::size_t j = 0; j < go.size(); ++j) (*d)[j] += wv[slot[i]] * go[j];
        }
    }, "weighted_sum");
}

using udarts::BnStats;
using udarts::Buffers;
using udarts::BnMode;

/// Per-channel affine batch normalisation over (N, H, W). Train mode uses batch
/// statistics and, when `update` is given, folds them into those running
/// averages with the given momentum. Eval mode normalises by `running`.
inline Var batch_norm(Var x, Var gamma, Var beta, BnMode mode, const BnStats* running = nullptr,
                      BnStats* update = nullptr, double momentum = 0.9, double eps = 1e-5) {
    Graph& g = detail::graph_of(x);
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("batch_norm expects NCHW");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    if (gamma.value().size() != c || beta.value().size() != c)
        throw ShapeError("batch_norm affine size mismatch for " + shape_str(xv.shape()));
    const double m = static_cast<double>(n * hw);
    std::vector<double> mu(c, 0.0), inv(c, 0.0);
    if (mode == BnMode::Train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t j = 0; j < hw; ++j) s += xv[(b * c + ch) * hw + j];
            mu[ch] = s / m;
            double v = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t j = 0; j < hw; ++j) {
                    const double d = xv[(b * c + ch) * hw + j] - mu[ch];
                    v += d * d;
                }
            v /= m;
            inv[ch] = 1.0 / std::sqrt(v + eps);
            if (update) {
                const double unbiased = m > 1.0 ? v * m / (m - 1.0) : v;
                update->mean[ch] = momentum * update->mean[ch] + (1.0 - momentum) * mu[ch];
                update->var[ch] = momentum * update->var[ch] + (1.0 - momentum) * unbiased;
            }
        }
    } else {
        if (!running) throw StateError("batch_norm eval mode needs running statistics");
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = running->mean[ch];
            inv[ch] = 1.0 / std::sqrt(running->var[ch] + eps);
        }
    }
    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t i = (b * c + ch) * hw + j;
                xhat[i] = (xv[i] - mu[ch]) * inv[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
    const bool train = mode == BnMode::Train;
    return g.record(std::move(out), {x, gamma, beta},
                    [n, c, hw, m, inv, train, xhat = std::move(xhat)](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& gv = g.value(ps[1]);
        std::vector<double> sdy(c, 0.0), sdyx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t j = 0; j < hw; ++j) {
                    const std::size_t i = (b * c + ch) * hw + j;
                    sdy[ch] += go[i];
                    sdyx[ch] += go[i] * xhat[i];
                }
        if (Tensor* dg = g.accum(ps[1]))
            for (std::size_t ch = 0; ch < c; ++ch) (*dg)[ch] += sdyx[ch];
        if (Tensor* db = g.accum(ps[2]))
            for (std::size_t ch = 0; ch < c; ++ch) (*db)[ch] += sdy[ch];
        if (Tensor* dx = g.accum(ps[0]))
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t i = (b * c + ch) * hw + j;
                        if (train)
                            (*dx)[i] += gv[ch] * inv[ch] * (go[i] - sdy[ch] / m - xhat[i] * sdyx[ch] / m);
                        else
                            (*dx)[i] += gv[ch] * inv[ch] * go[i];
                    }
    }, "batch_norm");
}

}  // namespace ops

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(Var a, Var b) { return ops::mul(a, b); }
inline Var operator*(double c, Var a) { return ops::scale(a, c); }

/// Central-difference gradient of a deterministic scalar function of a
/// parameter set: (f(p + h e_i) - f(p - h e_i)) / 2h per coordinate.
inline ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& loss, const ParamSet& params,
                                 double h = 1e-5) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
    ParamSet work = params;
    ParamSet grads = zeros_like(params);
    for (auto& [name, t] : work) {
        Tensor& gt = grads.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = loss(work);
            t[i] = orig - h;
            const double fm = loss(work);
            t[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NonFiniteError("non-finite loss at perturbed coordinate " + name + "[" + std::to_string(i) + "]");
            gt[i] = (fp - fm) / (2.0 * h);
        }
    }
    return grads;
}

/// Flat-vector variant of finite_diff_grad.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& loss,
                                            std::vector<double> x, double h = 1e-5) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = loss(x);
        x[i] = orig - h;
        const double fm = loss(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFiniteError("non-finite loss at perturbed coordinate " + std::to_string(i));
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace udarts
