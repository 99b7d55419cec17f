// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "udarts/tensor.hpp"

namespace udarts {

/// Dense row-major square matrix.
struct Matrix {
    std::size_t n = 0;
    std::vector<double> a;

    Matrix() = default;
    explicit Matrix(std::size_t n_, double fill = 0.0) : n(n_), a(n_ * n_, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) noexcept { return a[i * n + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return a[i * n + j]; }

    std::vector<double> apply(std::span<const double> v) const {
        if (v.size() != n) throw ShapeError("matrix-vector size mismatch");
        std::vector<double> out(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j] * v[j];
        return out;
    }

    double asymmetry() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) s += std::pow((*this)(i, j) - (*this)(j, i), 2);
        return std::sqrt(s);
    }
};

struct EigenResult {
    std::vector<double> values;   // ascending
    Matrix vectors;               // column k pairs with values[k]
    std::size_t sweeps = 0;
    double off_norm = 0.0;
};

/// Cyclic Jacobi rotations on a symmetric matrix until the off-diagonal
/// Frobenius norm falls below `tol`.
inline EigenResult jacobi_eigen(Matrix m, double tol = 1e-12, std::size_t max_sweeps = 100) {
    const std::size_t n = m.n;
    if (n == 0) throw ShapeError("jacobi_eigen: empty matrix");
    if (m.asymmetry() > 1e-9 * (1.0 + std::sqrt(sum_squares(m.a)))) throw ShapeError("jacobi_eigen: matrix is not symmetric");
    Matrix v = Matrix::identity(n);
    auto off = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += m(i, j) * m(i, j);
        return std::sqrt(s);
    };
    EigenResult r;
    double o = off();
    while (o > tol && r.sweeps < max_sweeps) {
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (apq == 0.0) continue;
                const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        ++r.sweeps;
        o = off();
    }
    r.off_norm = o;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return m(x, x) < m(y, y); });
    r.vectors = Matrix(n);
    for (std::size_t k = 0; k < n; ++k) {
        r.values.push_back(m(order[k], order[k]));
        for (std::size_t i = 0; i < n; ++i) r.vectors(i, k) = v(i, order[k]);
    }
    return r;
}

inline double max_abs_eigenvalue(const Matrix& m) {
    const auto r = jacobi_eigen(m);
    return std::max(std::abs(r.values.front()), std::abs(r.values.back()));
}

}  // namespace udarts
