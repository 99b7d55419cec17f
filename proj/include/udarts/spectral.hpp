// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "udarts/bilevel.hpp"
#include "udarts/linalg.hpp"

namespace udarts {

using GradientFn = std::function<std::vector<double>(const std::vector<double>&)>;

inline double norm2(std::span<const double> v) { return std::sqrt(sum_squares(v)); }

/// Central-difference Hessian-vector product (g(p + h v) - g(p - h v)) / 2h
/// with h = eps / ||v||.
inline std::vector<double> hvp(const GradientFn& grad, const std::vector<double>& p, const std::vector<double>& v,
                               double eps = 1e-3) {
    if (p.size() != v.size()) throw ShapeError("hvp: point has " + std::to_string(p.size()) + " entries, direction " +
                                               std::to_string(v.size()));
    const double nv = norm2(v);
    if (!(nv > 0.0)) throw ConfigError("hvp: direction must be nonzero");
    if (!(eps > 0.0)) throw ConfigError("hvp: eps must be positive");
    const double h = eps / nv;
    std::vector<double> a = p, b = p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        a[i] += h * v[i];
        b[i] -= h * v[i];
    }
    const std::vector<double> ga = grad(a), gb = grad(b);
    if (ga.size() != p.size() || gb.size() != p.size()) throw ShapeError("hvp: gradient size mismatch");
    std::vector<double> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        out[i] = (ga[i] - gb[i]) / (2.0 * h);
        if (!std::isfinite(out[i])) throw NonFiniteError("hvp: non-finite gradient at perturbed point");
    }
    return out;
}

struct PowerSettings {
    std::size_t iters = 20;
    double tol = 1e-3;          // residual threshold for convergence
    double eps = 1e-3;          // hvp step scale
    std::uint64_t seed = 0;     // start vector
};

/// Result of one power iteration. `rayleigh` is the Rayleigh quotient of the
/// final unit vector (the signed dominant eigenvalue), `lambda` its magnitude.
struct PowerResult {
    double lambda = 0.0;
    double rayleigh = 0.0;
    std::size_t iterations = 0;
    double residual = 0.0;  // ||Hv - lambda v|| / ||v||
    bool converged = false;
    bool degenerate = false;
    std::vector<double> vector;
};

inline constexpr double kDegenerateNorm = 1e-12;

/// Power iteration on the operator `apply`: v <- Hv/||Hv||. Stops once the
/// residual drops below tol or after `iters` products.
inline PowerResult power_iteration(const std::function<std::vector<double>(const std::vector<double>&)>& apply,
                                   std::size_t n, const PowerSettings& s) {
    if (s.iters < 1) throw ConfigError("lambda_max: iters must be at least 1");
    if (n == 0) throw ShapeError("lambda_max: empty parameter vector");
    std::mt19937_64 rng(s.seed);
    std::normal_distribution<double> nd;
    auto random_unit = [&] {
        std::vector<double> v(n);
        for (auto& x : v) x = nd(rng);
        const double nv = norm2(v);
        for (auto& x : v) x /= nv;
        return v;
    };
    PowerResult r;
    std::vector<double> v = random_unit();
    std::size_t zero_streak = 0;
    while (r.iterations < s.iters) {
        std::vector<double> hv = apply(v);
        ++r.iterations;
        const double nh = norm2(hv);
        if (nh < kDegenerateNorm) {
            if (++zero_streak >= 3) {
                r.lambda = r.rayleigh = 0.0;
                r.degenerate = true;
                r.residual = nh;
                r.vector = v;
                return r;
            }
            v = random_unit();
            continue;
        }
        zero_streak = 0;
        r.rayleigh = dot(v, hv);
        r.lambda = std::abs(r.rayleigh);
        double res = 0.0;
        for (std::size_t i = 0; i < n; ++i) res += std::pow(hv[i] - r.rayleigh * v[i], 2);
        r.residual = std::sqrt(res);
        r.vector = v;
        if (r.residual < s.tol) {
            r.converged = true;
            return r;
        }
        for (std::size_t i = 0; i < n; ++i) v[i] = hv[i] / nh;
    }
    return r;
}

inline PowerResult lambda_max(const GradientFn& grad, const std::vector<double>& p, const PowerSettings& s) {
    return power_iteration([&](const std::vector<double>& v) { return hvp(grad, p, v, s.eps); }, p.size(), s);
}

// ---------------------------------------------------------------------------
// Parameter-set plumbing

/// A fixed ordered subset of a parameter set viewed as one flat vector.
class ParamSlice {
public:
    ParamSlice(const ParamSet& params, const std::function<bool(std::string_view)>& select) {
        for (const auto& [name, t] : params)
            if (select(name)) {
                names_.push_back(name);
                total_ += t.size();
            }
    }

    std::size_t size() const noexcept { return total_; }
    const std::vector<std::string>& names() const noexcept { return names_; }

    std::vector<double> flatten(const ParamSet& p) const {
        std::vector<double> out;
        out.reserve(total_);
        for (const auto& n : names_) {
            const auto d = p.at(n).data();
            out.insert(out.end(), d.begin(), d.end());
        }
        return out;
    }

    void write(ParamSet& p, std::span<const double> flat) const {
        if (flat.size() != total_) throw ShapeError("param slice size mismatch");
        std::size_t k = 0;
        for (const auto& n : names_)
            for (auto& v : p.at(n).raw()) v = flat[k++];
    }

private:
    std::vector<std::string> names_;
    std::size_t total_ = 0;
};

/// Gradient of `objective` restricted to `slice`, with the other entries of
/// `base` held fixed.
inline GradientFn slice_gradient(const ParamSet& base, const ParamSlice& slice,
                                 std::function<Evaluation(const ParamSet&)> objective) {
    return [base, slice, objective = std::move(objective)](const std::vector<double>& flat) {
        ParamSet p = base;
        slice.write(p, flat);
        return slice.flatten(objective(p).grads);
    };
}

struct SpectralReport {
    std::size_t epoch = 0;
    PowerResult alpha;    // outer objective, architecture parameters
    PowerResult w;        // inner objective, weights
    PowerResult w_valid;  // outer objective, weights
};

struct SpectralProbe {
    const Batch* train = nullptr;
    const Batch* valid = nullptr;
    std::uint64_t seed = 0;  // frozen MC seed for every evaluation
    PowerSettings power;
};

/// Dominant Hessian eigenvalues at a frozen (w, alpha) snapshot: of the
/// mode's outer objective with respect to alpha and to the weights, and of
/// the inner objective with respect to the weights.
inline SpectralReport spectral_snapshot(const Network& net, const ParamSet& params, const LossSettings& loss,
                                        const SpectralProbe& probe, std::size_t epoch) {
    if (!probe.train || !probe.valid) throw StateError("spectral probe batches not set");
    SpectralReport rep;
    rep.epoch = epoch;
    auto valid_obj = [&](const ParamSet& p) { return valid_loss(net, p, *probe.valid, loss, probe.seed); };
    auto train_obj = [&](const ParamSet& p) { return train_loss(net, p, *probe.train, loss, probe.seed); };
    const ParamSlice alpha(params, [](std::string_view n) { return param_role(n) == ParamRole::Alpha; });
    const ParamSlice weights(params, [](std::string_view n) { return param_role(n) == ParamRole::Weight; });
    if (alpha.size() > 0) rep.alpha = lambda_max(slice_gradient(params, alpha, valid_obj), alpha.flatten(params), probe.power);
    rep.w = lambda_max(slice_gradient(params, weights, train_obj), weights.flatten(params), probe.power);
    rep.w_valid = lambda_max(slice_gradient(params, weights, valid_obj), weights.flatten(params), probe.power);
    return rep;
}

}  // namespace udarts
