// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "udarts/autodiff.hpp"
#include "udarts/searchspace.hpp"
#include "udarts/uncertainty.hpp"

namespace udarts {

// ---------------------------------------------------------------------------
// Search modes

enum class Mode { Darts, DartsCd, Mudarts };

struct ModeFlags {
    bool dropout = true;   // concrete dropout sites present
    bool pred_var = true;  // predictive variance added to the outer objective
    bool l_mc = true;      // KL regulariser added to the inner objective
};

inline ModeFlags flags_of(Mode m) {
    switch (m) {
        case Mode::Darts: return {false, false, false};
        case Mode::DartsCd: return {true, false, true};
        case Mode::Mudarts: return {true, true, true};
    }
    throw ConfigError("unknown mode");
}

inline std::string_view mode_name(Mode m) {
    switch (m) {
        case Mode::Darts: return "darts";
        case Mode::DartsCd: return "darts_cd";
        case Mode::Mudarts: return "mudarts";
    }
    return "?";
}

inline Mode mode_from_name(std::string_view s) {
    if (s == "darts") return Mode::Darts;
    if (s == "darts_cd") return Mode::DartsCd;
    if (s == "mudarts") return Mode::Mudarts;
    throw ConfigError("mode: unknown value '" + std::string(s) + "' (expected darts, darts_cd or mudarts)");
}

/// Strips dropout sites from the spec when the mode does not use them.
inline NetworkSpec spec_for_mode(NetworkSpec spec, Mode m) {
    if (!flags_of(m).dropout) {
        spec.dropout_in_ops = false;
        spec.dropout_before_classifier = false;
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Configuration and reports

enum class Order { First, Second };

struct BilevelConfig {
    double xi = 0.025;
    double w_lr = 0.025;
    double w_momentum = 0.9;
    double w_weight_decay = 0.0243;
    double alpha_lr = 0.5;
    Order order = Order::Second;
    double fd_scale = 0.01;

    void validate() const {
        auto check = [](bool ok, const char* field, const char* why) {
            if (!ok) throw ConfigError(std::string("bilevel.") + field + ": " + why);
        };
        check(std::isfinite(xi) && xi >= 0.0, "xi", "must be finite and >= 0");
        check(std::isfinite(w_lr) && w_lr >= 0.0, "w_lr", "must be finite and >= 0");
        check(std::isfinite(w_momentum) && w_momentum >= 0.0 && w_momentum < 1.0, "w_momentum", "must lie in [0, 1)");
        check(std::isfinite(w_weight_decay) && w_weight_decay >= 0.0, "w_weight_decay", "must be finite and >= 0");
        check(std::isfinite(alpha_lr) && alpha_lr >= 0.0, "alpha_lr", "must be finite and >= 0");
        check(std::isfinite(fd_scale) && fd_scale > 0.0, "fd_scale", "must be finite and > 0");
    }

    /// First order ignores xi entirely.
    double effective_xi() const noexcept { return order == Order::First ? 0.0 : xi; }
};

struct LossReport {
    double ce_train = 0.0;
    double l_mc = 0.0;
    double ce_valid = 0.0;
    double pred_var = 0.0;
    double total_train = 0.0;
    double total_valid = 0.0;
};

struct Batch {
    Tensor x;
    std::vector<int> y;

    std::size_t size() const noexcept { return y.size(); }
};

/// A scalar objective value with gradients for every parameter.
struct Evaluation {
    double value = 0.0;
    ParamSet grads;
    LossReport report;
    std::size_t clamped = 0;  // dropout logits clamped by the regulariser
};

struct LossSettings {
    Mode mode = Mode::Mudarts;
    std::size_t T = 20;
    DropoutConfig dropout;
    double dataset_size = 1.0;  // N in the KL regulariser
};

// ---------------------------------------------------------------------------
// Composite losses

namespace detail {

inline void require_batch(const Batch& b, const char* what) {
    if (b.size() == 0) throw ShapeError(std::string(what) + ": empty batch");
    if (b.x.shape().empty() || b.x.shape()[0] != b.size())
        throw ShapeError(std::string(what) + ": " + std::to_string(b.size()) + " labels for inputs " + shape_str(b.x.shape()));
}

inline ForwardOptions train_forward(const LossSettings& s, std::mt19937_64* rng, Buffers* update) {
    ForwardOptions opt;
    opt.bn = BnMode::Train;
    opt.update = update;
    opt.sample_dropout = flags_of(s.mode).dropout;
    opt.rng = rng;
    opt.temperature = s.dropout.temperature;
    return opt;
}

}  // namespace detail

/// Cross-entropy over the batch plus, when the mode uses it, the KL
/// regulariser. One dropout mask draw per call, seeded by `seed`.
inline Evaluation train_loss(const Network& net, const ParamSet& params, const Batch& batch, const LossSettings& s,
                             std::uint64_t seed, Buffers* update = nullptr) {
    detail::require_batch(batch, "train_loss");
    std::mt19937_64 rng(seed);
    Graph g(&params);
    ForwardResult fr = net.forward(g, g.input(batch.x), detail::train_forward(s, &rng, update));
    Var ce = ops::cross_entropy(fr.logits, batch.y);
    Var total = ce;
    Evaluation ev;
    ev.report.ce_train = ce.value()[0];
    if (flags_of(s.mode).l_mc) {
        Var reg = mc_regularizer(g, fr.sites, s.dropout.length_scale, s.dataset_size);
        for (const auto& site : fr.sites)
            if (std::abs(site.logit.value()[0]) > kMaxDropoutLogit) ++ev.clamped;
        ev.report.l_mc = reg.value()[0];
        total = ops::add(ce, reg);
    }
    ev.report.total_train = total.value()[0];
    ev.value = ev.report.total_train;
    ev.grads = g.backward(total);
    return ev;
}

/// Outer objective. darts: cross-entropy of a single deterministic pass.
/// Dropout modes: cross-entropy of the mean of T sampled softmax outputs,
/// plus the predictive variance of those samples under mudarts. Sample t
/// draws its masks from mc_stream_seed(seed, t).
inline Evaluation valid_loss(const Network& net, const ParamSet& params, const Batch& batch, const LossSettings& s,
                             std::uint64_t seed) {
    detail::require_batch(batch, "valid_loss");
    const ModeFlags f = flags_of(s.mode);
    Graph g(&params);
    Evaluation ev;
    Var total;
    if (!f.dropout) {
        total = ops::cross_entropy(net.forward(g, g.input(batch.x), detail::train_forward(s, nullptr, nullptr)).logits, batch.y);
        ev.report.ce_valid = total.value()[0];
    } else {
        if (s.T < 2) throw ConfigError("valid_loss: T must be at least 2");
        Var x = g.input(batch.x);
        std::vector<Var> samples;
        samples.reserve(s.T);
        for (std::size_t t = 0; t < s.T; ++t) {
            std::mt19937_64 rng(mc_stream_seed(seed, t));
            samples.push_back(ops::softmax(net.forward(g, x, detail::train_forward(s, &rng, nullptr)).logits));
        }
        Var mean;
        Var var;
        if (f.pred_var) {
            McStatsVars st = predictive_variance(samples, s.dropout.tau_inverse);
            mean = st.mean_probs;
            var = st.variance;
        } else {
            Var acc = samples.front();
            for (std::size_t t = 1; t < samples.size(); ++t) acc = ops::add(acc, samples[t]);
            mean = ops::scale(acc, 1.0 / static_cast<double>(s.T));
        }
        Var ce = ops::nll_from_probs(mean, batch.y);
        ev.report.ce_valid = ce.value()[0];
        total = ce;
        if (var.valid()) {
            ev.report.pred_var = var.value()[0];
            total = ops::add(ce, var);
        }
    }
    ev.report.total_valid = total.value()[0];
    ev.value = ev.report.total_valid;
    ev.grads = g.backward(total);
    return ev;
}

// ---------------------------------------------------------------------------
// Bilevel problem abstraction

/// Inner and outer objectives over one parameter set. Parameter roles follow
/// param_role(): alpha/ and drop/ entries are outer variables, the rest are
/// weights. Both objectives must be deterministic for a fixed seed.
class BilevelProblem {
public:
    virtual ~BilevelProblem() = default;
    virtual Evaluation train(const ParamSet& params, std::uint64_t seed) const = 0;
    virtual Evaluation valid(const ParamSet& params, std::uint64_t seed) const = 0;
};

/// The search network on one (train, valid) batch pair.
class NetworkProblem final : public BilevelProblem {
public:
    NetworkProblem(const Network& net, const LossSettings& s, const Batch& train, const Batch& valid)
        : net_(net), s_(s), train_(train), valid_(valid) {}

    Evaluation train(const ParamSet& params, std::uint64_t seed) const override {
        return train_loss(net_, params, train_, s_, seed);
    }
    Evaluation valid(const ParamSet& params, std::uint64_t seed) const override {
        return valid_loss(net_, params, valid_, s_, seed);
    }

private:
    const Network& net_;
    const LossSettings& s_;
    const Batch& train_;
    const Batch& valid_;
};

/// Problem built from two graph-building functions; used for small models.
class FunctionProblem final : public BilevelProblem {
public:
    using Builder = std::function<Var(Graph&)>;

    FunctionProblem(Builder train, Builder valid) : train_(std::move(train)), valid_(std::move(valid)) {}

    Evaluation train(const ParamSet& params, std::uint64_t) const override { return run(train_, params, true); }
    Evaluation valid(const ParamSet& params, std::uint64_t) const override { return run(valid_, params, false); }

private:
    static Evaluation run(const Builder& b, const ParamSet& params, bool inner) {
        Graph g(&params);
        Var v = b(g);
        Evaluation ev;
        ev.value = v.value()[0];
        (inner ? ev.report.total_train : ev.report.total_valid) = ev.value;
        ev.grads = g.backward(v);
        return ev;
    }

    Builder train_;
    Builder valid_;
};

inline bool is_outer(std::string_view name) { return param_role(name) != ParamRole::Weight; }

/// w' = w - xi * grad on weight entries; outer entries are copied unchanged.
inline ParamSet virtual_step(const ParamSet& params, const ParamSet& grads, double xi) {
    if (!(xi >= 0.0)) throw ConfigError("virtual_step: xi must be >= 0");
    ParamSet out = params;
    if (xi == 0.0) return out;
    for (auto& [name, t] : out) {
        if (is_outer(name)) continue;
        const Tensor& gr = grads.at(name);
        if (!gr.all_finite()) throw NonFiniteError("virtual_step: non-finite gradient for '" + name + "'");
        for (std::size_t i = 0; i < t.size(); ++i) t[i] -= xi * gr[i];
    }
    return out;
}

inline ParamSet virtual_step(const BilevelProblem& prob, const ParamSet& params, double xi, std::uint64_t seed) {
    return virtual_step(params, prob.train(params, seed).grads, xi);
}

struct ArchGradient {
    ParamSet grads;      // outer entries only
    LossReport report;   // train part at (alpha, w), valid part at (alpha, w')
    std::size_t clamped = 0;
    bool second_order = false;  // correction applied
    bool skipped = false;       // zero weight gradient, correction dropped
    double eps = 0.0;
};

/// Gradient of the outer objective with respect to the outer variables
/// through one virtual weight step. Second order subtracts
/// xi/(2 eps) (grad_a L_train(w+) - grad_a L_train(w-)), w+- = w +- eps g,
/// g = grad_w L_valid(w'), eps = fd_scale / ||g||. All train evaluations share
/// `train_seed` and the valid evaluation uses `valid_seed`.
inline ArchGradient arch_gradient(const BilevelProblem& prob, const ParamSet& params, const BilevelConfig& cfg,
                                  std::uint64_t train_seed, std::uint64_t valid_seed) {
    cfg.validate();
    const double xi = cfg.effective_xi();
    ArchGradient out;
    Evaluation tr = prob.train(params, train_seed);
    out.report.ce_train = tr.report.ce_train;
    out.report.l_mc = tr.report.l_mc;
    out.report.total_train = tr.report.total_train;
    out.clamped = tr.clamped;
    const ParamSet w1 = virtual_step(params, tr.grads, xi);
    Evaluation va = prob.valid(w1, valid_seed);
    out.report.ce_valid = va.report.ce_valid;
    out.report.pred_var = va.report.pred_var;
    out.report.total_valid = va.report.total_valid;
    for (auto& [name, t] : va.grads)
        if (is_outer(name)) out.grads.emplace(name, std::move(t));

    if (xi > 0.0) {
        double sq = 0.0;
        for (const auto& [name, t] : va.grads)
            if (!is_outer(name)) sq += sum_squares(t.data());
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NonFiniteError("arch_gradient: non-finite weight gradient");
        if (norm == 0.0) {
            out.skipped = true;
        } else {
            const double eps = cfg.fd_scale / norm;
            ParamSet wp = params, wm = params;
            for (const auto& [name, gv] : va.grads) {
                if (is_outer(name)) continue;
                Tensor& a = wp.at(name);
                Tensor& b = wm.at(name);
                for (std::size_t i = 0; i < gv.size(); ++i) {
                    a[i] += eps * gv[i];
                    b[i] -= eps * gv[i];
                }
            }
            const ParamSet gp = prob.train(wp, train_seed).grads;
            const ParamSet gm = prob.train(wm, train_seed).grads;
            const double c = xi / (2.0 * eps);
            for (auto& [name, t] : out.grads) {
                const Tensor& p = gp.at(name);
                const Tensor& m = gm.at(name);
                for (std::size_t i = 0; i < t.size(); ++i) t[i] -= c * (p[i] - m[i]);
            }
            out.second_order = true;
            out.eps = eps;
        }
    }
    for (const auto& [name, t] : out.grads)
        if (!t.all_finite()) throw NonFiniteError("arch_gradient: non-finite result for '" + name + "'");
    return out;
}

// ---------------------------------------------------------------------------
// Optimisers

/// SGD with heavy-ball momentum and L2 weight decay, in the form
/// buf = m*buf + (g + wd*w); w -= lr*buf.
struct SgdMomentum {
    ParamSet buffers;

    void step(ParamSet& params, const ParamSet& grads, double lr, double momentum, double weight_decay,
              const std::function<bool(std::string_view)>& select,
              const std::function<double(std::string_view)>& decay_for = nullptr) {
        for (auto& [name, w] : params) {
            if (!select(name)) continue;
            const Tensor& g = grads.at(name);
            if (!g.all_finite()) throw NonFiniteError("sgd: non-finite gradient for '" + name + "'");
            const double wd = decay_for ? decay_for(name) : weight_decay;
            auto [it, fresh] = buffers.try_emplace(name, Tensor::zeros(w.shape()));
            Tensor& buf = it->second;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double d = g[i] + wd * w[i];
                buf[i] = fresh ? d : momentum * buf[i] + d;
                w[i] -= lr * buf[i];
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Search loop

struct SearchSettings {
    BilevelConfig bilevel;
    LossSettings loss;
    std::size_t batch_size = 16;
};

struct SearchState {
    ParamSet params;
    Buffers buffers;
    SgdMomentum optimizer;
    std::size_t epoch = 0;
    std::mt19937_64 rng;
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t batches = 0;
    LossReport mean;                 // averaged over the epoch's batches
    std::size_t clamped = 0;         // clamped dropout logits, summed
    std::size_t skipped_second = 0;  // batches where the correction was dropped
};

inline Batch gather(const Tensor& x, const std::vector<int>& y, std::span<const std::size_t> idx) {
    Shape s = x.shape();
    const std::size_t row = x.size() / s[0];
    s[0] = idx.size();
    Tensor out(s);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(x.raw().begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                    out.raw().begin() + static_cast<std::ptrdiff_t>(i * row));
        labels.push_back(y.at(idx[i]));
    }
    return {std::move(out), std::move(labels)};
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

/// One epoch of alternating updates over paired (train, valid) batches:
/// outer variables take a plain gradient step along arch_gradient, then
/// weights and dropout logits take an SGD-with-momentum step on the inner
/// objective at the updated architecture. Dropout logits receive no weight
/// decay.
inline EpochRecord search_epoch(SearchState& st, const Network& net, const Batch& train, const Batch& valid,
                                const SearchSettings& s) {
    s.bilevel.validate();
    if (s.batch_size < 2) throw ConfigError("batch_size must be at least 2");
    detail::require_batch(train, "search_epoch");
    detail::require_batch(valid, "search_epoch");
    const std::vector<std::size_t> ti = shuffled_indices(train.size(), st.rng);
    const std::vector<std::size_t> vi = shuffled_indices(valid.size(), st.rng);
    const std::size_t usable = std::min(ti.size(), vi.size());
    const std::size_t bs = std::min(s.batch_size, usable);
    const std::size_t n_batches = usable / bs;

    EpochRecord rec;
    rec.epoch = st.epoch + 1;
    for (std::size_t b = 0; b < n_batches; ++b) {
        const Batch tb = gather(train.x, train.y, std::span(ti).subspan(b * bs, bs));
        const Batch vb = gather(valid.x, valid.y, std::span(vi).subspan(b * bs, bs));
        const std::uint64_t train_seed = st.rng();
        const std::uint64_t valid_seed = st.rng();
        const std::uint64_t step_seed = st.rng();

        NetworkProblem prob(net, s.loss, tb, vb);
        ArchGradient ag = arch_gradient(prob, st.params, s.bilevel, train_seed, valid_seed);
        for (const auto& [name, g] : ag.grads) {
            Tensor& p = st.params.at(name);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= s.bilevel.alpha_lr * g[i];
        }
        Evaluation ev = train_loss(net, st.params, tb, s.loss, step_seed, &st.buffers);
        st.optimizer.step(
            st.params, ev.grads, s.bilevel.w_lr, s.bilevel.w_momentum, s.bilevel.w_weight_decay,
            [](std::string_view n) { return param_role(n) != ParamRole::Alpha; },
            [&](std::string_view n) { return param_role(n) == ParamRole::Dropout ? 0.0 : s.bilevel.w_weight_decay; });

        rec.mean.ce_train += ag.report.ce_train;
        rec.mean.l_mc += ag.report.l_mc;
        rec.mean.ce_valid += ag.report.ce_valid;
        rec.mean.pred_var += ag.report.pred_var;
        rec.mean.total_train += ag.report.total_train;
        rec.mean.total_valid += ag.report.total_valid;
        rec.clamped += ag.clamped;
        rec.skipped_second += ag.skipped ? 1 : 0;
    }
    rec.batches = n_batches;
    const double k = static_cast<double>(std::max<std::size_t>(n_batches, 1));
    for (double* v : {&rec.mean.ce_train, &rec.mean.l_mc, &rec.mean.ce_valid, &rec.mean.pred_var, &rec.mean.total_train,
                      &rec.mean.total_valid})
        *v /= k;
    ++st.epoch;
    return rec;
}

}  // namespace udarts
