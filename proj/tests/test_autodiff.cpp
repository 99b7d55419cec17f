// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "gradient_cases.hpp"
#include "test_util.hpp"
#include "udarts/autodiff.hpp"
#include "udarts/uncertainty.hpp"

using namespace udarts;
using udarts::testing::max_rel_err;
using udarts::testing::random_tensor;

using udarts::testing::primitive_check;

TEST(Forward, IdentityGraph) {
    Program id({{"x", {3}}}, [](Graph&, const std::map<std::string, Var>& in) { return in; });
    Graph g;
    auto out = id.forward(g, {{"x", Tensor::vector({1, 2, 3})}});
    EXPECT_EQ(out.at("x").value().raw(), (std::vector<double>{1, 2, 3}));
}

TEST(Forward, SigmoidAtZero) {
    Graph g;
    EXPECT_DOUBLE_EQ(ops::sigmoid(g.input(Tensor::scalar(0.0))).value()[0], 0.5);
}

TEST(Forward, SoftmaxSymmetric) {
    Graph g;
    Var y = ops::softmax(g.input(Tensor::vector({0.0, 0.0})));
    EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Forward, ShapeMismatchRejected) {
    Program p({{"x", {0, 3}}}, [](Graph&, const std::map<std::string, Var>& in) { return in; });
    Graph g;
    EXPECT_THROW(p.forward(g, {{"x", Tensor({2, 4})}}), ShapeError);
    EXPECT_THROW(p.forward(g, {}), ShapeError);
    EXPECT_NO_THROW(p.forward(g, {{"x", Tensor({5, 3})}}));
}

TEST(Forward, NonFiniteIntermediateRejected) {
    Graph g;
    Var x = g.input(Tensor::vector({0.0, 1.0}));
    EXPECT_THROW(ops::log(x), NonFiniteError);
}

TEST(Backward, SquareAtThree) {
    ParamSet p{{"w", Tensor::scalar(3.0)}};
    Graph g(&p);
    Var w = g.param("w");
    auto grads = g.backward(ops::mul(w, w));
    EXPECT_DOUBLE_EQ(grads.at("w")[0], 6.0);
}

TEST(Backward, SigmoidSlopeAtZero) {
    ParamSet p{{"w", Tensor::scalar(0.0)}};
    Graph g(&p);
    auto grads = g.backward(ops::sigmoid(g.param("w")));
    EXPECT_DOUBLE_EQ(grads.at("w")[0], 0.25);
}

TEST(Backward, BeforeForwardAndBadSeed) {
    Graph empty;
    EXPECT_THROW(empty.backward(Var{&empty, 0}, Tensor::scalar(1.0)), StateError);
    ParamSet p{{"w", Tensor::vector({1.0, 2.0})}};
    Graph g(&p);
    Var w = g.param("w");
    EXPECT_THROW(g.backward(w, Tensor::scalar(1.0)), ShapeError);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
    ParamSet p{{"a", Tensor::scalar(2.0)}, {"b", Tensor::vector({1.0, 1.0})}};
    Graph g(&p);
    auto grads = g.backward(ops::square(g.param("a")));
    EXPECT_DOUBLE_EQ(grads.at("a")[0], 4.0);
    EXPECT_EQ(grads.at("b"), Tensor::zeros({2}));
}

TEST(Backward, FanOutAccumulates) {
    ParamSet p{{"w", Tensor::scalar(1.5)}};
    Graph g(&p);
    Var w = g.param("w");
    auto grads = g.backward(ops::add(ops::add(w, w), ops::mul(w, w)));  // 2w + w^2
    EXPECT_DOUBLE_EQ(grads.at("w")[0], 2.0 + 3.0);
}

TEST(Backward, RandomTwoLayerNetMatchesFiniteDifference) {
    std::mt19937_64 rng(11);
    ParamSet p{{"w1", random_tensor({4, 6}, rng, 0.5)},
               {"b1", random_tensor({6}, rng, 0.1)},
               {"w2", random_tensor({6, 3}, rng, 0.5)},
               {"b2", random_tensor({3}, rng, 0.1)}};
    Tensor x = random_tensor({5, 4}, rng);
    std::vector<int> y{0, 2, 1, 1, 0};
    auto net = [&](const ParamSet& ps, ParamSet* grads) {
        Graph g(&ps);
        Var h = ops::sigmoid(ops::add_bias(ops::matmul(g.input(x), g.param("w1")), g.param("b1")));
        Var l = ops::cross_entropy(ops::add_bias(ops::matmul(h, g.param("w2")), g.param("b2")), y);
        if (grads) *grads = g.backward(l);
        return l.value()[0];
    };
    ParamSet analytic;
    net(p, &analytic);
    auto numeric = finite_diff_grad([&](const ParamSet& ps) { return net(ps, nullptr); }, p, 1e-5);
    EXPECT_LT(max_rel_err(analytic, numeric), 1e-4);
}

TEST(FiniteDiff, LinearAndCubic) {
    ParamSet lin{{"w", Tensor::scalar(0.7)}};
    auto g1 = finite_diff_grad([](const ParamSet& p) { return 3.0 * p.at("w")[0]; }, lin, 1e-5);
    EXPECT_NEAR(g1.at("w")[0], 3.0, 1e-8);
    ParamSet cub{{"w", Tensor::scalar(2.0)}};
    auto g2 = finite_diff_grad([](const ParamSet& p) { return std::pow(p.at("w")[0], 3); }, cub, 1e-5);
    EXPECT_NEAR(g2.at("w")[0], 12.0, 1e-4);
}

TEST(FiniteDiff, RejectsBadStepAndNonFiniteLoss) {
    ParamSet p{{"w", Tensor::scalar(0.0)}};
    EXPECT_THROW(finite_diff_grad([](const ParamSet&) { return 0.0; }, p, 0.0), ConfigError);
    EXPECT_THROW(finite_diff_grad([](const ParamSet& q) { return std::log(q.at("w")[0]); }, p, 1e-5), NonFiniteError);
}

TEST(Softmax, SumsToOneAndPositive) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Graph g;
        Var y = ops::softmax(g.input(random_tensor({4, 7}, rng, 10.0)));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t i = 0; i < 7; ++i) {
                EXPECT_GT(y.value()[r * 7 + i], 0.0);
                s += y.value()[r * 7 + i];
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(ZeroOp, ZeroOutputAndZeroGradient) {
    ParamSet p{{"x", Tensor({1, 2, 3, 3}, 1.5)}};
    Graph g(&p);
    Var z = ops::zero(g.param("x"), {1, 2, 3, 3});
    for (double v : z.value().data()) EXPECT_EQ(v, 0.0);
    auto grads = g.backward(ops::sum(z));
    for (double v : grads.at("x").data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv, PaddingPreservesResolution) {
    std::mt19937_64 rng(5);
    Graph g;
    Var x = g.input(random_tensor({2, 4, 7, 5}, rng));
    for (std::size_t k : {3u, 5u}) {
        Var w = g.constant(random_tensor({4, 4, k, k}, rng));
        EXPECT_EQ(ops::conv2d(x, w, {1, (k - 1) / 2, 1, 1}).shape(), (Shape{2, 4, 7, 5}));
        Var dw = g.constant(random_tensor({4, 1, k, k}, rng));
        EXPECT_EQ(ops::conv2d(x, dw, {1, k - 1, 2, 4}).shape(), (Shape{2, 4, 7, 5}));
    }
}

TEST(Conv, ChannelMismatchRejected) {
    Graph g;
    Var x = g.input(Tensor({1, 3, 4, 4}));
    EXPECT_THROW(ops::conv2d(x, g.constant(Tensor({2, 4, 3, 3})), {1, 1, 1, 1}), ShapeError);
}

// Every primitive against central differences over ten seeds.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifference) {
    const std::uint64_t seed = 100 + GetParam();
    std::mt19937_64 rng(seed);
    udarts::testing::CaseFixtures fx;
    const auto cases = udarts::testing::primitive_cases(rng, fx);
    for (const auto& c : cases) {
        std::string where;
        const double err = primitive_check(c.params, c.op, seed, &where);
        EXPECT_LT(err, 1e-4) << c.name << " seed " << seed << " worst at " << where;
    }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, PrimitiveGradient, ::testing::Range(0, 10));
