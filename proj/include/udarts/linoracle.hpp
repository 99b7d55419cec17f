// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "udarts/linalg.hpp"
#include "udarts/tensor.hpp"

// Exact checks on a linear (logistic) model: closed-form Hessians, the
// extremal constants of the sigmoid polynomials and the eigenvalue
// comparison between the plain and variance-regularised validation losses.

namespace udarts::lin {

inline double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

struct LogisticInstance {
    std::size_t N = 0, d = 0;
    std::vector<double> X;  // N x d, row i is x_i
    std::vector<int> y;     // {0, 1}
    std::vector<double> alpha;

    std::span<const double> x(std::size_t i) const { return std::span(X).subspan(i * d, d); }
    double margin(std::size_t i, std::span<const double> a) const { return dot(x(i), a); }
    double alpha_sq() const { return sum_squares(alpha); }

    void validate() const {
        if (N == 0 || d == 0) throw ShapeError("logistic instance: N and d must be positive");
        if (X.size() != N * d || y.size() != N || alpha.size() != d)
            throw ShapeError("logistic instance: inconsistent sizes");
        for (int v : y)
            if (v != 0 && v != 1) throw ConfigError("logistic instance: labels must be 0 or 1");
        if (!(alpha_sq() < 1.0)) throw ConfigError("logistic instance: requires alpha^T alpha < 1");
    }
};

/// x_i ~ N(0, I), ||alpha|| uniform in [0, max_norm] along a random
/// direction, y_i ~ Bernoulli(sigmoid(x_i^T alpha)).
inline LogisticInstance random_instance(std::mt19937_64& rng, std::size_t max_d = 8, std::size_t max_n = 64,
                                        double max_norm = 0.95) {
    std::uniform_int_distribution<std::size_t> dd(1, max_d), nn(1, max_n);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    LogisticInstance in;
    in.d = dd(rng);
    in.N = nn(rng);
    in.X.resize(in.N * in.d);
    for (auto& v : in.X) v = nd(rng);
    in.alpha.resize(in.d);
    for (auto& v : in.alpha) v = nd(rng);
    const double dir = std::sqrt(sum_squares(in.alpha));
    const double radius = max_norm * ud(rng);
    for (auto& v : in.alpha) v *= dir > 0 ? radius / dir : 0.0;
    for (std::size_t i = 0; i < in.N; ++i) in.y.push_back(ud(rng) < sigmoid(in.margin(i, in.alpha)) ? 1 : 0);
    return in;
}

/// Mean binary cross-entropy of sigmoid(x_i^T a).
inline double ce_loss(const LogisticInstance& in, std::span<const double> a) {
    double s = 0.0;
    for (std::size_t i = 0; i < in.N; ++i) {
        const double z = in.margin(i, a);
        // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
        const double sp = [](double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }(
            in.y[i] ? -z : z);
        s += sp;
    }
    return s / static_cast<double>(in.N);
}

/// (1/T) sum sigmoid((x_i^T a)^2) - ((1/T) sum sigmoid(x_i^T a))^2 with T = N.
inline double variance_term(const LogisticInstance& in, std::span<const double> a) {
    double sq = 0.0, m = 0.0;
    for (std::size_t i = 0; i < in.N; ++i) {
        const double z = in.margin(i, a);
        sq += sigmoid(z * z);
        m += sigmoid(z);
    }
    const double T = static_cast<double>(in.N);
    return sq / T - (m / T) * (m / T);
}

inline double mudarts_valid_loss(const LogisticInstance& in, std::span<const double> a) {
    return ce_loss(in, a) + variance_term(in, a);
}
inline double mudarts_valid_loss(const LogisticInstance& in) { return mudarts_valid_loss(in, in.alpha); }

/// (1/N) sum sigmoid(x_i^T a)(1 - sigmoid(x_i^T a)) x_i x_i^T.
inline Matrix darts_hessian(const LogisticInstance& in) {
    Matrix h(in.d);
    for (std::size_t i = 0; i < in.N; ++i) {
        const double p = sigmoid(in.margin(i, in.alpha));
        const double w = p * (1.0 - p) / static_cast<double>(in.N);
        const auto xi = in.x(i);
        for (std::size_t r = 0; r < in.d; ++r)
            for (std::size_t c = 0; c < in.d; ++c) h(r, c) += w * xi[r] * xi[c];
    }
    return h;
}

/// sum_i x_i x_i^T
inline Matrix gram(const LogisticInstance& in) {
    Matrix g(in.d);
    for (std::size_t i = 0; i < in.N; ++i) {
        const auto xi = in.x(i);
        for (std::size_t r = 0; r < in.d; ++r)
            for (std::size_t c = 0; c < in.d; ++c) g(r, c) += xi[r] * xi[c];
    }
    return g;
}

/// Symmetrised Hessian from central differences of central-difference
/// gradients, step h in both stages.
inline Matrix numeric_hessian(const std::function<double(std::span<const double>)>& f, std::vector<double> a,
                              double h = 1e-4) {
    const std::size_t d = a.size();
    auto grad = [&](std::vector<double>& p) {
        std::vector<double> g(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double keep = p[j];
            p[j] = keep + h;
            const double fp = f(p);
            p[j] = keep - h;
            const double fm = f(p);
            p[j] = keep;
            g[j] = (fp - fm) / (2.0 * h);
        }
        return g;
    };
    Matrix H(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double keep = a[i];
        a[i] = keep + h;
        const auto gp = grad(a);
        a[i] = keep - h;
        const auto gm = grad(a);
        a[i] = keep;
        for (std::size_t j = 0; j < d; ++j) H(i, j) = (gp[j] - gm[j]) / (2.0 * h);
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) H(i, j) = H(j, i) = 0.5 * (H(i, j) + H(j, i));
    for (double v : H.a)
        if (!std::isfinite(v)) throw NonFiniteError("numeric Hessian is not finite");
    return H;
}

inline Matrix mudarts_hessian(const LogisticInstance& in, double h = 1e-4) {
    return numeric_hessian([&](std::span<const double> a) { return mudarts_valid_loss(in, a); }, in.alpha, h);
}

// ---------------------------------------------------------------------------
// Sigmoid polynomials

inline double sigma_d(double p) { return p * (1.0 - p); }

/// p(1-p) - 2p^2(1-p) = p(1-p)(1-2p)
inline double sigma_cubic(double p) { return p * (1.0 - p) * (1.0 - 2.0 * p); }

/// Variants of the sigma_ud polynomial in q = sigmoid(alpha x x^T alpha^T)
/// and a2 = alpha^T alpha.
///   Final:      sqrt(q)(1-sqrt(q)) + 4 a2 [q(1-q) - 2q^2(1-q)] + 2q(1-q) - 2(sqrt(q)(1-sqrt(q)) + sqrt(q))
///   DraftMinus: 1/2 sqrt(q)(1-sqrt(q)) + 4 a2 [q(1-q) - 2q^2(1-q)] - 2q(1-q) - 0.1924 sqrt(q)
///   DraftPlus:  as DraftMinus with +2q(1-q)
enum class SigmaUdVariant { Final, DraftMinus, DraftPlus };

inline std::string_view variant_name(SigmaUdVariant v) {
    switch (v) {
        case SigmaUdVariant::Final: return "final";
        case SigmaUdVariant::DraftMinus: return "draft_minus";
        case SigmaUdVariant::DraftPlus: return "draft_plus";
    }
    return "?";
}

inline double sigma_ud(double q, double a2, SigmaUdVariant v = SigmaUdVariant::Final) {
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("sigma_ud: q must lie in [0, 1]");
    const double r = std::sqrt(q);
    const double poly = 4.0 * a2 * (q * (1.0 - q) - 2.0 * q * q * (1.0 - q));
    switch (v) {
        case SigmaUdVariant::Final: return r * (1.0 - r) + poly + 2.0 * q * (1.0 - q) - 2.0 * (r * (1.0 - r) + r);
        case SigmaUdVariant::DraftMinus: return 0.5 * r * (1.0 - r) + poly - 2.0 * q * (1.0 - q) - 0.1924 * r;
        case SigmaUdVariant::DraftPlus: return 0.5 * r * (1.0 - r) + poly + 2.0 * q * (1.0 - q) - 0.1924 * r;
    }
    throw ConfigError("sigma_ud: unknown variant");
}

struct Extremum {
    double argmax = 0.0;
    double max = 0.0;
};

/// Grid search at `step` followed by golden-section refinement around the
/// best grid point.
inline Extremum maximize(const std::function<double(double)>& f, double lo, double hi, double step = 1e-4) {
    Extremum best{lo, f(lo)};
    const std::size_t n = static_cast<std::size_t>(std::ceil((hi - lo) / step));
    for (std::size_t k = 1; k <= n; ++k) {
        const double x = std::min(hi, lo + static_cast<double>(k) * step);
        const double v = f(x);
        if (v > best.max) best = {x, v};
    }
    double a = std::max(lo, best.argmax - step), b = std::min(hi, best.argmax + step);
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < 200 && b - a > 1e-15; ++it) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    const double x = 0.5 * (a + b);
    if (f(x) > best.max) best = {x, f(x)};
    return best;
}

/// Root of 1 - 6p + 6p^2 in [0, 1/2] by bisection: the stationary point of
/// the cubic.
inline double cubic_argmax_bisection() {
    auto g = [](double p) { return 1.0 - 6.0 * p + 6.0 * p * p; };
    double a = 0.0, b = 0.5;
    for (int it = 0; it < 200; ++it) {
        const double m = 0.5 * (a + b);
        (g(m) > 0 ? a : b) = m;
    }
    return 0.5 * (a + b);
}

struct SigmaExtrema {
    Extremum sigma_d;
    Extremum cubic;
    double cubic_root = 0.0;
};

inline SigmaExtrema sigma_extrema() {
    return {maximize(sigma_d, 0.0, 1.0), maximize(sigma_cubic, 0.0, 1.0), cubic_argmax_bisection()};
}

/// Maximum of sigma_ud over the q grid {0, step, 2 step, ..., 1}.
inline Extremum sigma_ud_grid_max(double a2, SigmaUdVariant v, double step = 1e-4) {
    Extremum best{0.0, sigma_ud(0.0, a2, v)};
    const std::size_t n = static_cast<std::size_t>(std::llround(1.0 / step));
    for (std::size_t k = 1; k <= n; ++k) {
        const double q = std::min(1.0, static_cast<double>(k) * step);
        const double s = sigma_ud(q, a2, v);
        if (s > best.max) best = {q, s};
    }
    return best;
}

// ---------------------------------------------------------------------------
// Lemma checks

struct Lemma1Report {
    double lambda_max = 0.0;
    double lambda_min = 0.0;
    double bound = 0.0;  // (1/4N) lambda_max(sum x x^T)
    bool bound_ok = false;
    bool convex_ok = false;
};

inline Lemma1Report verify_lemma1(const LogisticInstance& in) {
    in.validate();
    const auto h = jacobi_eigen(darts_hessian(in));
    const auto g = jacobi_eigen(gram(in));
    Lemma1Report r;
    r.lambda_max = h.values.back();
    r.lambda_min = h.values.front();
    r.bound = 0.25 / static_cast<double>(in.N) * g.values.back();
    r.bound_ok = r.lambda_max <= r.bound + 1e-9;
    r.convex_ok = r.lambda_min >= -1e-10;
    return r;
}

struct Lemma3Instance {
    std::size_t N = 0, d = 0;
    double alpha_sq = 0.0;
    double lambda_darts = 0.0;
    double lambda_mudarts = 0.0;
    bool inequality_ok = false;       // lambda_mudarts <= lambda_darts
    double sigma_ud_max = 0.0;        // over the q grid at this alpha^T alpha
    bool sigma_ud_positive = false;   // regime of the bound
    double sigma_ud_bound = 0.0;      // (sigma_ud_max / N) lambda_max(sum x x^T)
    bool sigma_ud_bound_ok = false;   // lambda_mudarts <= bound (positive regime only)
};

inline Lemma3Instance verify_lemma3(const LogisticInstance& in, SigmaUdVariant v = SigmaUdVariant::Final,
                                    double grid_step = 1e-4) {
    in.validate();
    Lemma3Instance r;
    r.N = in.N;
    r.d = in.d;
    r.alpha_sq = in.alpha_sq();
    r.lambda_darts = jacobi_eigen(darts_hessian(in)).values.back();
    r.lambda_mudarts = jacobi_eigen(mudarts_hessian(in)).values.back();
    r.inequality_ok = r.lambda_mudarts <= r.lambda_darts;
    r.sigma_ud_max = sigma_ud_grid_max(r.alpha_sq, v, grid_step).max;
    r.sigma_ud_positive = r.sigma_ud_max > 0.0;
    r.sigma_ud_bound = r.sigma_ud_max / static_cast<double>(in.N) * jacobi_eigen(gram(in)).values.back();
    r.sigma_ud_bound_ok = r.sigma_ud_positive && r.lambda_mudarts <= r.sigma_ud_bound;
    return r;
}

struct Lemma3Census {
    std::vector<Lemma3Instance> instances;
    std::size_t inequality_passes = 0;
    std::size_t positive_regime = 0;
    std::size_t bound_passes = 0;
};

inline Lemma3Census lemma3_census(std::uint64_t seed, std::size_t count, SigmaUdVariant v = SigmaUdVariant::Final,
                                  double max_norm = std::sqrt(0.9)) {
    std::mt19937_64 rng(seed);
    Lemma3Census c;
    for (std::size_t k = 0; k < count; ++k) {
        auto r = verify_lemma3(random_instance(rng, 8, 64, max_norm), v);
        c.inequality_passes += r.inequality_ok;
        c.positive_regime += r.sigma_ud_positive;
        c.bound_passes += r.sigma_ud_bound_ok;
        c.instances.push_back(r);
    }
    return c;
}

}  // namespace udarts::lin
