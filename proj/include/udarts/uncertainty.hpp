// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "udarts/autodiff.hpp"

namespace udarts {

/// Call counters for the uncertainty paths. A plain-DARTS run must leave the
/// variance and regulariser counters at zero.
struct Instrumentation {
    std::atomic<std::uint64_t> variance_calls{0};
    std::atomic<std::uint64_t> regularizer_calls{0};
    std::atomic<std::uint64_t> dropout_samples{0};

    void reset() {
        variance_calls = 0;
        regularizer_calls = 0;
        dropout_samples = 0;
    }
};

inline Instrumentation& instrumentation() {
    static Instrumentation counters;
    return counters;
}

/// Concrete-dropout settings shared by every site. Per-site logits live in the
/// parameter set under the "drop/" prefix.
struct DropoutConfig {
    double temperature = 0.1;
    double init_p = 0.1;
    double length_scale = 0.1;  // prior length scale l
    double tau_inverse = 0.0;   // model precision term added to the variance
};

/// Flat view of the dropout parameters: one logit per site, p = sigmoid(logit).
struct DropoutParams {
    std::vector<double> logits;
    DropoutConfig config;

    double p(std::size_t site) const { return ops::sigmoid_scalar(logits.at(site)); }
};

inline double logit_of(double p) { return std::log(p) - std::log1p(-p); }

namespace detail {
constexpr double kUniformClamp = 1e-7;

inline double clamp_uniform(double u) { return std::clamp(u, kUniformClamp, 1.0 - kUniformClamp); }

/// Relaxed keep-mask entry for one uniform draw.
inline double concrete_keep(double logit, double temperature, double u) {
    const double z = (logit + std::log(u) - std::log1p(-u)) / temperature;
    return 1.0 - ops::sigmoid_scalar(z);
}
}  // namespace detail

/// Uniform draws for a mask of the given shape.
inline Tensor draw_uniforms(const Shape& shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Tensor u(shape);
    for (auto& v : u.raw()) v = detail::clamp_uniform(unif(rng));
    instrumentation().dropout_samples.fetch_add(1, std::memory_order_relaxed);
    return u;
}

/// Concrete relaxation of a Bernoulli keep mask:
///   mask = 1 - sigmoid((logit(p) + log u - log(1 - u)) / temperature)
/// Entries lie in (0, 1) and average to about 1 - p for small temperature.
inline Tensor concrete_mask(double site_logit, double temperature, std::mt19937_64& rng, const Shape& shape) {
    if (!(temperature > 0.0)) throw ConfigError("concrete_mask: temperature must be positive");
    if (!std::isfinite(site_logit)) throw NonFiniteError("concrete_mask: non-finite dropout logit");
    Tensor m = draw_uniforms(shape, rng);
    for (auto& v : m.raw()) v = detail::concrete_keep(site_logit, temperature, v);
    return m;
}

namespace ops {

/// x * mask / (1 - p) with the mask built from fixed uniform draws, so the
/// output is differentiable in both x and the site logit.
inline Var concrete_dropout(Var x, Var logit, double temperature, const Tensor& uniforms) {
    Graph& g = detail::graph_of(x);
    if (logit.value().size() != 1) throw ShapeError("concrete_dropout: logit must be a scalar");
    x.value().require_same(uniforms, "concrete_dropout uniforms");
    if (!(temperature > 0.0)) throw ConfigError("concrete_dropout: temperature must be positive");
    const double a = logit.value()[0];
    const double p = sigmoid_scalar(a);
    const double keep = 1.0 - p;
    Tensor mask(uniforms.shape());
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = udarts::detail::concrete_keep(a, temperature, uniforms[i]);
        out[i] *= mask[i] / keep;
    }
    return g.record(std::move(out), {x, logit},
                    [mask = std::move(mask), temperature, p, keep](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const auto& ps = g.parents(self);
        const Tensor& xv = g.value(ps[0]);
        if (Tensor* dx = g.accum(ps[0]))
            for (std::size_t i = 0; i < go.size(); ++i) (*dx)[i] += go[i] * mask[i] / keep;
        if (Tensor* dl = g.accum(ps[1])) {
            // mask = 1 - s  =>  dmask/dlogit = -s (1 - s) / temperature;  d(1/(1-p))/dlogit = p / (1-p)
            double acc = 0.0;
            for (std::size_t i = 0; i < go.size(); ++i) {
                const double s = 1.0 - mask[i];
                const double dm = -s * (1.0 - s) / temperature;
                acc += go[i] * xv[i] * (dm / keep + mask[i] * p / keep);
            }
            (*dl)[0] += acc;
        }
    }, "concrete_dropout");
}

}  // namespace ops

/// T stochastic forward passes, each a [batch, classes] probability tensor.
struct McPrediction {
    std::vector<Tensor> samples;

    std::size_t T() const noexcept { return samples.size(); }

    Tensor mean() const {
        if (samples.empty()) throw StateError("mean of an empty MC prediction");
        Tensor m = Tensor::zeros(samples.front().shape());
        for (const auto& s : samples) m += s;
        for (auto& v : m.raw()) v /= static_cast<double>(samples.size());
        return m;
    }
};

/// Seed for MC sample t of a prediction drawn with `base_seed`. Sample t always
/// uses the same stream regardless of evaluation order.
inline std::uint64_t mc_stream_seed(std::uint64_t base_seed, std::size_t t) {
    std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                      static_cast<std::uint32_t>(t), 0x6d63u};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Runs T passes of `model.predict_probs(x, rng)`. The model type only needs
/// that member; networks without dropout sites return identical samples.
template <class Model>
McPrediction mc_predict(const Model& model, const Tensor& x, std::size_t T, std::mt19937_64& rng) {
    if (T < 1) throw ConfigError("mc_predict: T must be at least 1");
    const std::uint64_t base = rng();
    McPrediction mc;
    mc.samples.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        std::mt19937_64 stream(mc_stream_seed(base, t));
        Tensor probs = model.predict_probs(x, stream);
        if (!probs.all_finite()) throw NonFiniteError("mc_predict: non-finite sample " + std::to_string(t));
        mc.samples.push_back(std::move(probs));
    }
    return mc;
}

/// Sum over output dimensions of the population variance (divisor T) of the MC
/// samples, plus tau_inverse * D, averaged over the batch.
inline double predictive_variance(const McPrediction& mc, double tau_inverse = 0.0) {
    instrumentation().variance_calls.fetch_add(1, std::memory_order_relaxed);
    if (mc.T() < 2) throw ConfigError("predictive_variance needs T >= 2 samples");
    const Shape& s = mc.samples.front().shape();
    for (const auto& y : mc.samples) y.require_same(mc.samples.front(), "predictive_variance");
    if (s.size() != 2) throw ShapeError("predictive_variance expects [batch, D] samples");
    const std::size_t b = s[0], d = s[1];
    const Tensor m = mc.mean();
    double total = 0.0;
    for (const auto& y : mc.samples)
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double r = y[i] - m[i];
            total += r * r;
        }
    return total / (static_cast<double>(mc.T()) * static_cast<double>(b)) + tau_inverse * static_cast<double>(d);
}

struct McStatsVars {
    Var mean_probs;
    Var variance;
};

/// Differentiable counterpart of predictive_variance over sample nodes.
inline McStatsVars predictive_variance(const std::vector<Var>& samples, double tau_inverse = 0.0) {
    instrumentation().variance_calls.fetch_add(1, std::memory_order_relaxed);
    if (samples.size() < 2) throw ConfigError("predictive_variance needs T >= 2 samples");
    const Shape s = samples.front().shape();
    if (s.size() != 2) throw ShapeError("predictive_variance expects [batch, D] samples");
    const double T = static_cast<double>(samples.size());
    Var acc = samples.front();
    for (std::size_t t = 1; t < samples.size(); ++t) acc = ops::add(acc, samples[t]);
    Var mean = ops::scale(acc, 1.0 / T);
    Var spread = ops::sum(ops::square(ops::sub(samples.front(), mean)));
    for (std::size_t t = 1; t < samples.size(); ++t)
        spread = ops::add(spread, ops::sum(ops::square(ops::sub(samples[t], mean))));
    Var var = ops::scale(spread, 1.0 / (T * static_cast<double>(s[0])));
    if (tau_inverse != 0.0) {
        Graph& g = *mean.graph;
        var = ops::add(var, g.constant(Tensor::scalar(tau_inverse * static_cast<double>(s[1]))));
    }
    return {mean, var};
}

inline double binary_entropy(double p) {
    double h = 0.0;
    if (p > 0.0) h -= p * std::log(p);
    if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
    return h;
}

/// One dropout site as seen by the KL regulariser.
struct SiteTerm {
    double logit = 0.0;
    double weight_sqnorm = 0.0;  // ||M||^2 of the weights consuming the site
    double units = 1.0;          // K, the number of units feeding the site
};

struct McRegularizerResult {
    double value = 0.0;
    std::size_t clamped = 0;  // sites whose logit had to be clamped
};

/// Logits beyond this magnitude put p within ~1e-13 of 0 or 1; they are
/// clamped before the entropy is evaluated.
inline constexpr double kMaxDropoutLogit = 30.0;

/// (1/N) sum_sites [ l^2 (1-p)/2 ||M||^2 - K H(p) ],  H the binary entropy.
inline McRegularizerResult mc_regularizer(const std::vector<SiteTerm>& sites, double length_scale,
                                          double dataset_size) {
    instrumentation().regularizer_calls.fetch_add(1, std::memory_order_relaxed);
    if (!(dataset_size > 0.0)) throw ConfigError("mc_regularizer: dataset size must be positive");
    McRegularizerResult r;
    const double l2 = length_scale * length_scale;
    for (const auto& s : sites) {
        double a = s.logit;
        if (!std::isfinite(a)) throw NonFiniteError("mc_regularizer: non-finite dropout logit");
        if (std::abs(a) > kMaxDropoutLogit) {
            a = std::clamp(a, -kMaxDropoutLogit, kMaxDropoutLogit);
            ++r.clamped;
        }
        const double p = ops::sigmoid_scalar(a);
        r.value += l2 * (1.0 - p) / 2.0 * s.weight_sqnorm - s.units * binary_entropy(p);
    }
    r.value /= dataset_size;
    return r;
}

struct SiteVars {
    Var logit;
    Var weight_sqnorm;
    double units = 1.0;
};

namespace ops {

/// Single-site KL term l^2 (1-p)/2 * S - K H(p) with S a scalar node.
inline Var kl_site(Var logit, Var sqnorm, double length_scale, double units) {
    Graph& g = detail::graph_of(logit);
    double a = logit.value()[0];
    const bool clamped = std::abs(a) > kMaxDropoutLogit;
    a = std::clamp(a, -kMaxDropoutLogit, kMaxDropoutLogit);
    const double p = sigmoid_scalar(a);
    const double l2 = length_scale * length_scale;
    const double S = sqnorm.value()[0];
    const double v = l2 * (1.0 - p) / 2.0 * S - units * binary_entropy(p);
    return g.record(Tensor::scalar(v), {logit, sqnorm}, [p, l2, S, units, clamped](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0];
        const auto& ps = g.parents(self);
        if (Tensor* dl = g.accum(ps[0]); dl && !clamped) {
            // dH/dp = log((1-p)/p), dp/dlogit = p(1-p)
            const double dp = -l2 * S / 2.0 - units * (std::log1p(-p) - std::log(p));
            (*dl)[0] += go * dp * p * (1.0 - p);
        }
        if (Tensor* ds = g.accum(ps[1])) (*ds)[0] += go * l2 * (1.0 - p) / 2.0;
    }, "kl_site");
}

}  // namespace ops

/// Differentiable regulariser over site nodes.
inline Var mc_regularizer(Graph& g, const std::vector<SiteVars>& sites, double length_scale, double dataset_size) {
    instrumentation().regularizer_calls.fetch_add(1, std::memory_order_relaxed);
    if (!(dataset_size > 0.0)) throw ConfigError("mc_regularizer: dataset size must be positive");
    if (sites.empty()) return g.constant(Tensor::scalar(0.0));
    Var acc = ops::kl_site(sites.front().logit, sites.front().weight_sqnorm, length_scale, sites.front().units);
    for (std::size_t i = 1; i < sites.size(); ++i)
        acc = ops::add(acc, ops::kl_site(sites[i].logit, sites[i].weight_sqnorm, length_scale, sites[i].units));
    return ops::scale(acc, 1.0 / dataset_size);
}

}  // namespace udarts
