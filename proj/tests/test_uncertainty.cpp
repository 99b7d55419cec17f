// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_util.hpp"
#include "udarts/searchspace.hpp"
#include "udarts/uncertainty.hpp"

using namespace udarts;
using udarts::testing::random_tensor;

namespace {

// Rows on the probability simplex.
Tensor random_probs(std::size_t b, std::size_t d, std::mt19937_64& rng) {
    std::gamma_distribution<double> gd(1.0, 1.0);
    Tensor t({b, d});
    for (std::size_t i = 0; i < b; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (t[i * d + j] = gd(rng));
        for (std::size_t j = 0; j < d; ++j) t[i * d + j] /= s;
    }
    return t;
}

// Sum over dims of (1/T) sum_t (y_t - ybar)^2, averaged over rows; written
// out without the library's helpers.
double brute_variance(const std::vector<Tensor>& ys, double tau_inv) {
    const std::size_t b = ys[0].dim(0), d = ys[0].dim(1), T = ys.size();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0.0;
            for (const auto& y : ys) m += y[i * d + j];
            m /= static_cast<double>(T);
            double v = 0.0;
            for (const auto& y : ys) v += (y[i * d + j] - m) * (y[i * d + j] - m);
            total += v / static_cast<double>(T);
        }
    return total / static_cast<double>(b) + tau_inv * static_cast<double>(d);
}

struct FixedModel {
    Tensor probs;
    Tensor predict_probs(const Tensor&, std::mt19937_64&) const { return probs; }
};

struct NoisyModel {
    Tensor predict_probs(const Tensor&, std::mt19937_64& rng) const { return random_probs(2, 3, rng); }
};

}  // namespace

TEST(ConcreteMask, Limits) {
    std::mt19937_64 rng(1);
    const Tensor keep_all = concrete_mask(-60.0, 0.1, rng, {1000});
    const Tensor drop_all = concrete_mask(60.0, 0.1, rng, {1000});
    for (std::size_t i = 0; i < 1000; ++i) {
        EXPECT_NEAR(keep_all[i], 1.0, 1e-9);
        EXPECT_NEAR(drop_all[i], 0.0, 1e-9);
    }
}

TEST(ConcreteMask, MeanNearKeepProbability) {
    std::mt19937_64 rng(2);
    const Tensor m = concrete_mask(logit_of(0.3), 0.1, rng, {100000});
    double mean = 0.0;
    for (double v : m.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        mean += v;
    }
    mean /= static_cast<double>(m.size());
    EXPECT_NEAR(mean, 0.7, 0.01);
}

TEST(ConcreteMask, Errors) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(concrete_mask(0.0, 0.0, rng, {2}), ConfigError);
    EXPECT_THROW(concrete_mask(std::nan(""), 0.1, rng, {2}), NonFiniteError);
}

TEST(ConcreteDropout, ReparameterisedGradientMatchesFiniteDifference) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        const Tensor u = draw_uniforms({3, 4}, rng);
        const Tensor r = random_tensor({3, 4}, rng);
        ParamSet p{{"x", random_tensor({3, 4}, rng)}, {"logit", Tensor::vector({logit_of(0.2 + 0.1 * seed)})}};
        auto loss = [&](const ParamSet& ps, ParamSet* grads) {
            Graph g(&ps);
            Var l = ops::sum(ops::mul(ops::concrete_dropout(g.param("x"), g.param("logit"), 0.5, u), g.constant(r)));
            if (grads) *grads = g.backward(l);
            return l.value()[0];
        };
        ParamSet analytic;
        loss(p, &analytic);
        const ParamSet numeric = finite_diff_grad([&](const ParamSet& ps) { return loss(ps, nullptr); }, p, 1e-6);
        EXPECT_LT(udarts::testing::max_rel_err(analytic, numeric), 1e-4) << "seed " << seed;
    }
}

TEST(PredictiveVariance, IdenticalSamplesGiveTauTerm) {
    std::mt19937_64 rng(4);
    const Tensor y = random_probs(5, 4, rng);
    McPrediction mc{{y, y, y, y}};
    EXPECT_EQ(predictive_variance(mc, 0.0), 0.0);
    EXPECT_EQ(predictive_variance(mc, 0.25), 0.25 * 4);
}

TEST(PredictiveVariance, OppositeOneHotSamples) {
    McPrediction mc{{Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.0, 1.0})}};
    EXPECT_DOUBLE_EQ(predictive_variance(mc, 0.0), 0.5);
}

TEST(PredictiveVariance, MatchesDirectFormula) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> T(2, 12), B(1, 6), D(2, 7);
    for (int k = 0; k < 100; ++k) {
        const std::size_t t = T(rng), b = B(rng), d = D(rng);
        McPrediction mc;
        for (std::size_t i = 0; i < t; ++i) mc.samples.push_back(random_probs(b, d, rng));
        const double tau = (k % 3) * 0.05;
        const double v = predictive_variance(mc, tau);
        EXPECT_NEAR(v, brute_variance(mc.samples, tau), 1e-12);
        EXPECT_GE(v, tau * static_cast<double>(d));
        std::shuffle(mc.samples.begin(), mc.samples.end(), rng);
        EXPECT_NEAR(predictive_variance(mc, tau), v, 1e-15);
    }
}

TEST(PredictiveVariance, GraphFormAgreesAndDifferentiates) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        ParamSet p;
        for (int t = 0; t < 4; ++t) p.emplace("y" + std::to_string(t), random_probs(3, 3, rng));
        auto loss = [&](const ParamSet& ps, ParamSet* grads) {
            Graph g(&ps);
            std::vector<Var> ys;
            for (int t = 0; t < 4; ++t) ys.push_back(g.param("y" + std::to_string(t)));
            Var v = predictive_variance(ys, 0.1).variance;
            if (grads) *grads = g.backward(v);
            return v.value()[0];
        };
        McPrediction mc;
        for (int t = 0; t < 4; ++t) mc.samples.push_back(p.at("y" + std::to_string(t)));
        ParamSet analytic;
        EXPECT_NEAR(loss(p, &analytic), predictive_variance(mc, 0.1), 1e-14);
        const ParamSet numeric = finite_diff_grad([&](const ParamSet& ps) { return loss(ps, nullptr); }, p, 1e-6);
        EXPECT_LT(udarts::testing::max_rel_err(analytic, numeric), 1e-4);
    }
}

TEST(PredictiveVariance, Errors) {
    McPrediction one{{Tensor({1, 2}, {0.5, 0.5})}};
    EXPECT_THROW(predictive_variance(one), ConfigError);
    McPrediction ragged{{Tensor({1, 2}), Tensor({2, 2})}};
    EXPECT_THROW(predictive_variance(ragged), ShapeError);
}

TEST(McPredict, DeterministicModelGivesIdenticalSamples) {
    std::mt19937_64 rng(6);
    const FixedModel m{random_probs(2, 3, rng)};
    const McPrediction mc = mc_predict(m, Tensor({2, 1}), 5, rng);
    ASSERT_EQ(mc.T(), 5u);
    for (const auto& s : mc.samples) EXPECT_EQ(s, m.probs);
    EXPECT_EQ(mc.mean(), m.probs);
}

TEST(McPredict, SeedReproducesSamples) {
    std::mt19937_64 a(7), b(7);
    const auto ma = mc_predict(NoisyModel{}, Tensor({2, 1}), 4, a);
    const auto mb = mc_predict(NoisyModel{}, Tensor({2, 1}), 4, b);
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(ma.samples[t], mb.samples[t]);
    EXPECT_NE(ma.samples[0], ma.samples[1]);
    EXPECT_NE(mc_stream_seed(1, 0), mc_stream_seed(1, 1));
    EXPECT_NE(mc_stream_seed(1, 0), mc_stream_seed(2, 0));
}

TEST(McPredict, NetworkWithoutSitesIsDeterministic) {
    NetworkSpec s = NetworkSpec::desk(2);
    s.n_nodes = 2;
    s.channels = 2;
    s.classes = 2;
    s.input_channels = 2;
    s.input_height = s.input_width = 1;
    s.dropout_in_ops = s.dropout_before_classifier = false;
    const Network net(s);
    std::mt19937_64 rng(8);
    const ParamSet params = net.init_params(rng);
    const BoundNetwork bound{&net, &params, nullptr, BnMode::Train, true, 0.1};
    const McPrediction mc = mc_predict(bound, random_tensor({4, 2, 1, 1}, rng), 5, rng);
    for (const auto& y : mc.samples) EXPECT_EQ(y, mc.samples.front());
}

TEST(McRegularizer, HandEvaluatedExample) {
    const double h02 = -(0.2 * std::log(0.2) + 0.8 * std::log(0.8));
    EXPECT_NEAR(h02, 0.500402, 1e-6);
    const auto r = mc_regularizer({{logit_of(0.2), 4.0, 10.0}}, 1.0, 100.0);
    EXPECT_NEAR(r.value, (0.8 / 2 * 4 - 10 * h02) / 100, 1e-14);
    EXPECT_NEAR(r.value, -0.03404, 1e-5);
    EXPECT_EQ(r.clamped, 0u);
}

TEST(McRegularizer, EntropyTermAlone) {
    EXPECT_NEAR(binary_entropy(0.5), std::log(2.0), 1e-15);
    for (double p : {0.05, 0.3, 0.5, 0.9}) {
        const auto r = mc_regularizer({{logit_of(p), 0.0, 7.0}}, 0.3, 50.0);
        EXPECT_NEAR(r.value, -7.0 / 50.0 * binary_entropy(p), 1e-14);
    }
}

TEST(McRegularizer, ClampsSaturatedLogits) {
    const auto r = mc_regularizer({{45.0, 1.0, 2.0}, {-45.0, 1.0, 2.0}, {0.0, 1.0, 2.0}}, 0.1, 10.0);
    EXPECT_EQ(r.clamped, 2u);
    EXPECT_TRUE(std::isfinite(r.value));
    EXPECT_THROW(mc_regularizer({{std::nan(""), 1.0, 1.0}}, 0.1, 10.0), NonFiniteError);
    EXPECT_THROW(mc_regularizer({}, 0.1, 0.0), ConfigError);
}

TEST(McRegularizer, GraphFormAgreesAndDifferentiates) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> ud(-3.0, 3.0);
        ParamSet p{{"a", Tensor::vector({ud(rng)})}, {"b", Tensor::vector({ud(rng)})},
                   {"w", random_tensor({3, 2}, rng)}, {"v", random_tensor({4}, rng)}};
        auto loss = [&](const ParamSet& ps, ParamSet* grads) {
            Graph g(&ps);
            std::vector<SiteVars> sites{{g.param("a"), ops::sum_squares(g.param("w")), 6.0},
                                        {g.param("b"), ops::sum_squares(g.param("v")), 4.0}};
            Var r = mc_regularizer(g, sites, 0.7, 32.0);
            if (grads) *grads = g.backward(r);
            return r.value()[0];
        };
        ParamSet analytic;
        const double v = loss(p, &analytic);
        const auto plain = mc_regularizer({{p.at("a")[0], sum_squares(p.at("w").data()), 6.0},
                                           {p.at("b")[0], sum_squares(p.at("v").data()), 4.0}},
                                          0.7, 32.0);
        EXPECT_NEAR(v, plain.value, 1e-14);
        const ParamSet numeric = finite_diff_grad([&](const ParamSet& ps) { return loss(ps, nullptr); }, p, 1e-6);
        EXPECT_LT(udarts::testing::max_rel_err(analytic, numeric), 1e-4) << "seed " << seed;
    }
}

TEST(Instrumentation, CountsCalls) {
    auto& c = instrumentation();
    const auto v0 = c.variance_calls.load(), r0 = c.regularizer_calls.load(), d0 = c.dropout_samples.load();
    McPrediction mc{{Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.0, 1.0})}};
    predictive_variance(mc);
    mc_regularizer({{0.0, 1.0, 1.0}}, 0.1, 1.0);
    std::mt19937_64 rng(9);
    draw_uniforms({2}, rng);
    EXPECT_EQ(c.variance_calls.load(), v0 + 1);
    EXPECT_EQ(c.regularizer_calls.load(), r0 + 1);
    EXPECT_EQ(c.dropout_samples.load(), d0 + 1);
}
