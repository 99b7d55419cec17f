// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "udarts/linoracle.hpp"

using namespace udarts;
using namespace udarts::lin;

namespace {

Matrix random_symmetric(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Matrix m(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = nd(rng);
    return m;
}

LogisticInstance hand_instance() {
    LogisticInstance in;
    in.N = 3;
    in.d = 2;
    in.X = {1.0, 0.5, -0.3, 2.0, 0.7, -1.1};
    in.y = {1, 0, 1};
    in.alpha = {0.4, -0.2};
    return in;
}

}  // namespace

TEST(Jacobi, AgreesWithEigen) {
    std::mt19937_64 rng(1);
    for (std::size_t n = 1; n <= 20; ++n) {
        const Matrix m = random_symmetric(n, rng);
        Eigen::MatrixXd e(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) e(i, j) = m(i, j);
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ref(e);
        const auto r = jacobi_eigen(m);
        ASSERT_EQ(r.values.size(), n);
        for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(r.values[k], ref.eigenvalues()(k), 1e-10) << n;
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<double> v(n);
            for (std::size_t i = 0; i < n; ++i) v[i] = r.vectors(i, k);
            const auto mv = m.apply(v);
            for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(mv[i], r.values[k] * v[i], 1e-9);
        }
        EXPECT_NEAR(max_abs_eigenvalue(m), ref.eigenvalues().cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Jacobi, Errors) {
    Matrix m(2);
    m(0, 1) = 1.0;
    EXPECT_THROW(jacobi_eigen(m), ShapeError);
    EXPECT_THROW(jacobi_eigen(Matrix{}), ShapeError);
    EXPECT_THROW(m.apply(std::vector<double>(3)), ShapeError);
}

TEST(Logistic, SigmoidStable) {
    EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
    EXPECT_EQ(sigmoid(-800.0), 0.0);
    EXPECT_EQ(sigmoid(800.0), 1.0);
    EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}

TEST(Logistic, LossesByHand) {
    const auto in = hand_instance();
    double ce = 0.0, sq = 0.0, m = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double z = in.X[2 * i] * 0.4 + in.X[2 * i + 1] * -0.2;
        const double p = 1.0 / (1.0 + std::exp(-z));
        ce -= in.y[i] ? std::log(p) : std::log(1.0 - p);
        sq += 1.0 / (1.0 + std::exp(-z * z));
        m += p;
    }
    EXPECT_NEAR(ce_loss(in, in.alpha), ce / 3.0, 1e-14);
    EXPECT_NEAR(variance_term(in, in.alpha), sq / 3.0 - (m / 3.0) * (m / 3.0), 1e-14);
    EXPECT_NEAR(mudarts_valid_loss(in), ce / 3.0 + sq / 3.0 - (m / 3.0) * (m / 3.0), 1e-14);
    // large margins stay finite
    LogisticInstance far = in;
    far.X = {900.0, 0.0, -900.0, 0.0, 900.0, 0.0};
    EXPECT_TRUE(std::isfinite(ce_loss(far, far.alpha)));
}

TEST(Logistic, ClosedFormHessianMatchesNumeric) {
    std::mt19937_64 rng(4);
    for (int k = 0; k < 20; ++k) {
        const auto in = random_instance(rng);
        const Matrix h = darts_hessian(in);
        const Matrix n = numeric_hessian([&](std::span<const double> a) { return ce_loss(in, a); }, in.alpha);
        for (std::size_t i = 0; i < h.a.size(); ++i) EXPECT_NEAR(h.a[i], n.a[i], 1e-6);
    }
}

TEST(Logistic, GramAndInstanceChecks) {
    const auto in = hand_instance();
    const Matrix g = gram(in);
    EXPECT_NEAR(g(0, 0), 1.0 + 0.09 + 0.49, 1e-15);
    EXPECT_NEAR(g(0, 1), 0.5 - 0.6 - 0.77, 1e-15);
    EXPECT_EQ(g(0, 1), g(1, 0));
    EXPECT_NO_THROW(in.validate());

    LogisticInstance bad = in;
    bad.alpha = {1.0, 0.0};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = in;
    bad.y[1] = 2;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = in;
    bad.X.pop_back();
    EXPECT_THROW(bad.validate(), ShapeError);
}

TEST(Logistic, RandomInstanceRanges) {
    std::mt19937_64 rng(8);
    for (int k = 0; k < 200; ++k) {
        const auto in = random_instance(rng, 8, 64, std::sqrt(0.9));
        EXPECT_GE(in.d, 1u);
        EXPECT_LE(in.d, 8u);
        EXPECT_GE(in.N, 1u);
        EXPECT_LE(in.N, 64u);
        EXPECT_LT(in.alpha_sq(), 0.9);
        EXPECT_NO_THROW(in.validate());
    }
}

TEST(Constants, SigmaExtrema) {
    const auto e = sigma_extrema();
    EXPECT_NEAR(e.sigma_d.max, 0.25, 1e-12);
    EXPECT_NEAR(e.sigma_d.argmax, 0.5, 1e-6);
    const double root = (3.0 - std::sqrt(3.0)) / 6.0;
    EXPECT_NEAR(e.cubic.max, 0.0962, 1e-4);
    EXPECT_NEAR(e.cubic.max, std::sqrt(3.0) / 18.0, 1e-12);
    EXPECT_NEAR(e.cubic.argmax, root, 1e-6);
    EXPECT_NEAR(e.cubic_root, root, 1e-12);
}

TEST(Constants, MaximizeRefines) {
    // grid alone would land on 0.3 or 0.31
    const auto e = maximize([](double x) { return -(x - 0.3047) * (x - 0.3047); }, 0.0, 1.0, 0.01);
    EXPECT_NEAR(e.argmax, 0.3047, 1e-7);
    EXPECT_NEAR(e.max, 0.0, 1e-14);
}

TEST(SigmaUd, HandValues) {
    // q = 1/4 so sqrt(q) = 1/2; a2 = 1/2
    EXPECT_NEAR(sigma_ud(0.25, 0.5), 0.25 + 0.1875 + 0.375 - 1.5, 1e-15);
    EXPECT_NEAR(sigma_ud(0.25, 0.5, SigmaUdVariant::DraftMinus), 0.125 + 0.1875 - 0.375 - 0.0962, 1e-15);
    EXPECT_NEAR(sigma_ud(0.25, 0.5, SigmaUdVariant::DraftPlus), 0.125 + 0.1875 + 0.375 - 0.0962, 1e-15);
    EXPECT_EQ(sigma_ud(0.0, 0.7), 0.0);
    EXPECT_THROW(sigma_ud(1.5, 0.1), ConfigError);
    EXPECT_THROW(sigma_ud(-0.1, 0.1), ConfigError);
    EXPECT_EQ(variant_name(SigmaUdVariant::DraftPlus), "draft_plus");
}

TEST(SigmaUd, GridMaxNonPositiveForFinal) {
    for (double a2 = 0.0; a2 < 1.0; a2 += 0.01) {
        const auto m = sigma_ud_grid_max(a2, SigmaUdVariant::Final, 1e-3);
        EXPECT_LE(m.max, 0.0) << a2;
        EXPECT_EQ(m.argmax, 0.0);
    }
    // the plus draft is positive somewhere
    EXPECT_GT(sigma_ud_grid_max(0.5, SigmaUdVariant::DraftPlus, 1e-3).max, 0.0);
}

TEST(Lemma1, RandomInstances) {
    std::mt19937_64 rng(2);
    for (int k = 0; k < 50; ++k) {
        const auto in = random_instance(rng);
        const auto r = verify_lemma1(in);
        EXPECT_TRUE(r.bound_ok) << r.lambda_max << " > " << r.bound;
        EXPECT_TRUE(r.convex_ok) << r.lambda_min;
        EXPECT_LE(r.lambda_min, r.lambda_max);
    }
}

TEST(Lemma3, InstanceFields) {
    const auto in = hand_instance();
    const auto r = verify_lemma3(in, SigmaUdVariant::Final, 1e-3);
    EXPECT_EQ(r.N, 3u);
    EXPECT_EQ(r.d, 2u);
    EXPECT_DOUBLE_EQ(r.alpha_sq, 0.2);
    EXPECT_NEAR(r.lambda_darts, jacobi_eigen(darts_hessian(in)).values.back(), 1e-15);
    EXPECT_EQ(r.inequality_ok, r.lambda_mudarts <= r.lambda_darts);
    EXPECT_FALSE(r.sigma_ud_positive);
    EXPECT_FALSE(r.sigma_ud_bound_ok);
    const Matrix h = mudarts_hessian(in);
    EXPECT_LT(h.asymmetry(), 1e-15);
}

TEST(Lemma3, CensusCounts) {
    const auto c = lemma3_census(5, 10);
    ASSERT_EQ(c.instances.size(), 10u);
    std::size_t passes = 0;
    for (const auto& r : c.instances) {
        passes += r.inequality_ok;
        EXPECT_LT(r.alpha_sq, 0.9);
    }
    EXPECT_EQ(passes, c.inequality_passes);
    EXPECT_EQ(c.positive_regime, 0u);
    const auto again = lemma3_census(5, 10);
    EXPECT_EQ(again.instances.back().lambda_mudarts, c.instances.back().lambda_mudarts);
}
