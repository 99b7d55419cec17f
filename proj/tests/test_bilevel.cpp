// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "udarts/bilevel.hpp"

using namespace udarts;
using udarts::testing::random_tensor;
using udarts::testing::rel_err;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Five-parameter problem: outer a0, a1 (architecture) and t (a dropout
// logit), weights w0, w1. Written twice: once as plain doubles with the
// inner gradient derived by hand, once as graphs for the library.
struct Toy {
    double a0, a1, t, w0, w1;

    double train() const {
        return 0.5 * sig(a0) * w0 * w0 + 0.5 * sig(a1) * w1 * w1 + a0 * a1 * w0 * w1 - std::log(sig(w0 + a1)) +
               0.3 * t * w0;
    }
    double dtrain_w0() const { return sig(a0) * w0 + a0 * a1 * w1 - (1.0 - sig(w0 + a1)) + 0.3 * t; }
    double dtrain_w1() const { return sig(a1) * w1 + a0 * a1 * w0; }
    double valid() const {
        return (w0 - 1.0) * (w0 - 1.0) * sig(a1) + (w1 + 0.5) * (w1 + 0.5) + a0 * a0 * w1 + t * t + sig(t) * w0;
    }

    /// L_val(outer, w - xi grad_w L_train(outer, w)), the one-step unrolled
    /// outer objective.
    double unrolled(double xi) const {
        Toy s = *this;
        s.w0 = w0 - xi * dtrain_w0();
        s.w1 = w1 - xi * dtrain_w1();
        return s.valid();
    }
};

ParamSet toy_params(const Toy& v) {
    return {{"alpha/a0", Tensor::vector({v.a0})}, {"alpha/a1", Tensor::vector({v.a1})},
            {"drop/t", Tensor::vector({v.t})},    {"w0", Tensor::vector({v.w0})},
            {"w1", Tensor::vector({v.w1})}};
}

FunctionProblem toy_problem() {
    auto c = [](Graph& g, double v) { return g.constant(Tensor::vector({v})); };
    auto train = [](Graph& g) {
        Var a0 = g.param("alpha/a0"), a1 = g.param("alpha/a1"), t = g.param("drop/t");
        Var w0 = g.param("w0"), w1 = g.param("w1");
        Var l = ops::scale(ops::mul(ops::sigmoid(a0), ops::square(w0)), 0.5);
        l = ops::add(l, ops::scale(ops::mul(ops::sigmoid(a1), ops::square(w1)), 0.5));
        l = ops::add(l, ops::mul(ops::mul(a0, a1), ops::mul(w0, w1)));
        l = ops::sub(l, ops::log(ops::sigmoid(ops::add(w0, a1))));
        l = ops::add(l, ops::scale(ops::mul(t, w0), 0.3));
        return ops::sum(l);
    };
    auto valid = [c](Graph& g) {
        Var a0 = g.param("alpha/a0"), a1 = g.param("alpha/a1"), t = g.param("drop/t");
        Var w0 = g.param("w0"), w1 = g.param("w1");
        Var l = ops::mul(ops::square(ops::sub(w0, c(g, 1.0))), ops::sigmoid(a1));
        l = ops::add(l, ops::square(ops::add(w1, c(g, 0.5))));
        l = ops::add(l, ops::mul(ops::square(a0), w1));
        l = ops::add(l, ops::square(t));
        l = ops::add(l, ops::mul(ops::sigmoid(t), w0));
        return ops::sum(l);
    };
    return FunctionProblem(train, valid);
}

NetworkSpec tiny_spec() {
    NetworkSpec s = NetworkSpec::desk(2);
    s.n_nodes = 2;
    s.channels = 2;
    s.stem_multiplier = 1;
    s.classes = 2;
    s.input_channels = 2;
    s.input_height = s.input_width = 1;
    return s;
}

Batch random_batch(std::size_t n, std::mt19937_64& rng) {
    Batch b{random_tensor({n, 2, 1, 1}, rng), {}};
    for (std::size_t i = 0; i < n; ++i) b.y.push_back(b.x[2 * i] + b.x[2 * i + 1] > 0 ? 1 : 0);
    return b;
}

}  // namespace

TEST(Modes, FlagsAndNames) {
    EXPECT_FALSE(flags_of(Mode::Darts).dropout);
    EXPECT_FALSE(flags_of(Mode::Darts).pred_var);
    EXPECT_FALSE(flags_of(Mode::Darts).l_mc);
    EXPECT_TRUE(flags_of(Mode::DartsCd).dropout);
    EXPECT_FALSE(flags_of(Mode::DartsCd).pred_var);
    EXPECT_TRUE(flags_of(Mode::DartsCd).l_mc);
    EXPECT_TRUE(flags_of(Mode::Mudarts).pred_var);
    for (Mode m : {Mode::Darts, Mode::DartsCd, Mode::Mudarts}) EXPECT_EQ(mode_from_name(mode_name(m)), m);
    EXPECT_THROW(mode_from_name("darts-cd"), ConfigError);
    EXPECT_FALSE(spec_for_mode(tiny_spec(), Mode::Darts).has_dropout());
    EXPECT_TRUE(spec_for_mode(tiny_spec(), Mode::DartsCd).has_dropout());
}

TEST(BilevelConfig, ValidationNamesField) {
    BilevelConfig c;
    c.w_momentum = 1.0;
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("bilevel.w_momentum"), std::string::npos);
    }
    c = {};
    c.fd_scale = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.order = Order::First;
    EXPECT_EQ(c.effective_xi(), 0.0);
}

TEST(VirtualStep, MovesWeightsOnly) {
    const ParamSet p = toy_params({0.1, 0.2, 0.3, 0.4, 0.5});
    ParamSet g = p;
    for (auto& [n, t] : g) t[0] = 1.0;
    const ParamSet q = virtual_step(p, g, 0.5);
    EXPECT_EQ(q.at("alpha/a0")[0], 0.1);
    EXPECT_EQ(q.at("drop/t")[0], 0.3);
    EXPECT_DOUBLE_EQ(q.at("w0")[0], 0.4 - 0.5);
    EXPECT_EQ(virtual_step(p, g, 0.0), p);
    g.at("w1")[0] = std::nan("");
    EXPECT_THROW(virtual_step(p, g, 0.5), NonFiniteError);
    EXPECT_THROW(virtual_step(p, g, -1.0), ConfigError);
}

TEST(ArchGradient, MatchesUnrolledOracle) {
    const FunctionProblem prob = toy_problem();
    std::mt19937_64 rng(100);
    std::normal_distribution<double> nd;
    for (int seed = 0; seed < 20; ++seed) {
        const Toy v{nd(rng), nd(rng), nd(rng), nd(rng), nd(rng)};
        // the graph objectives agree with the hand-written ones
        const Evaluation tr = prob.train(toy_params(v), 0);
        ASSERT_NEAR(tr.value, v.train(), 1e-12);
        ASSERT_NEAR(tr.grads.at("w0")[0], v.dtrain_w0(), 1e-12);
        ASSERT_NEAR(tr.grads.at("w1")[0], v.dtrain_w1(), 1e-12);
        ASSERT_NEAR(prob.valid(toy_params(v), 0).value, v.valid(), 1e-12);

        BilevelConfig cfg;
        cfg.xi = 0.1;
        const ArchGradient ag = arch_gradient(prob, toy_params(v), cfg, 1, 2);
        ASSERT_TRUE(ag.second_order);
        const double h = 1e-5;
        auto fd = [&](double Toy::*field) {
            Toy p = v, m = v;
            p.*field += h;
            m.*field -= h;
            return (p.unrolled(cfg.xi) - m.unrolled(cfg.xi)) / (2 * h);
        };
        EXPECT_LT(rel_err(ag.grads.at("alpha/a0")[0], fd(&Toy::a0), 1e-9), 1e-3) << "seed " << seed;
        EXPECT_LT(rel_err(ag.grads.at("alpha/a1")[0], fd(&Toy::a1), 1e-9), 1e-3) << "seed " << seed;
        EXPECT_LT(rel_err(ag.grads.at("drop/t")[0], fd(&Toy::t), 1e-9), 1e-3) << "seed " << seed;
        EXPECT_EQ(ag.grads.count("w0"), 0u);
    }
}

TEST(ArchGradient, FirstOrderIsPlainOuterGradient) {
    const FunctionProblem prob = toy_problem();
    const Toy v{0.3, -0.7, 0.2, 1.1, -0.4};
    BilevelConfig cfg;
    cfg.order = Order::First;
    const ArchGradient ag = arch_gradient(prob, toy_params(v), cfg, 1, 2);
    EXPECT_FALSE(ag.second_order);
    const Evaluation va = prob.valid(toy_params(v), 0);
    EXPECT_EQ(ag.grads.at("alpha/a0"), va.grads.at("alpha/a0"));
    // and it differs from the unrolled derivative at xi > 0
    const double h = 1e-5;
    Toy p = v, m = v;
    p.a1 += h;
    m.a1 -= h;
    EXPECT_GT(rel_err(ag.grads.at("alpha/a1")[0], (p.unrolled(0.1) - m.unrolled(0.1)) / (2 * h)), 1e-3);
}

TEST(ArchGradient, BilinearClosedForm) {
    // L_train = 1/2 |w - A a|^2, L_val = 1/2 |w - b|^2:
    // d/da L_val(w - xi (w - A a)) = xi A^T ((1 - xi) w + xi A a - b)
    std::mt19937_64 rng(7);
    for (int seed = 0; seed < 10; ++seed) {
        const Tensor A = random_tensor({3, 2}, rng), b = random_tensor({3, 1}, rng);
        ParamSet p{{"alpha/a", random_tensor({2, 1}, rng)}, {"w", random_tensor({3, 1}, rng)}};
        FunctionProblem prob(
            [&](Graph& g) {
                Var r = ops::sub(g.param("w"), ops::matmul(g.constant(A), g.param("alpha/a")));
                return ops::scale(ops::sum_squares(r), 0.5);
            },
            [&](Graph& g) { return ops::scale(ops::sum_squares(ops::sub(g.param("w"), g.constant(b))), 0.5); });
        BilevelConfig cfg;
        cfg.xi = 0.3;
        const ArchGradient ag = arch_gradient(prob, p, cfg, 0, 0);
        const Tensor& a = p.at("alpha/a");
        const Tensor& w = p.at("w");
        for (std::size_t k = 0; k < 2; ++k) {
            double want = 0.0;
            for (std::size_t i = 0; i < 3; ++i) {
                const double Aa = A[i * 2] * a[0] + A[i * 2 + 1] * a[1];
                want += A[i * 2 + k] * ((1 - cfg.xi) * w[i] + cfg.xi * Aa - b[i]);
            }
            want *= cfg.xi;
            EXPECT_NEAR(ag.grads.at("alpha/a")[k], want, 1e-9);
        }
    }
}

TEST(ArchGradient, ZeroWeightGradientSkipsCorrection) {
    FunctionProblem prob([](Graph& g) { return ops::sum(ops::mul(g.param("alpha/a"), g.param("w"))); },
                         [](Graph& g) { return ops::sum_squares(g.param("alpha/a")); });
    ParamSet p{{"alpha/a", Tensor::vector({0.5})}, {"w", Tensor::vector({1.0})}};
    const ArchGradient ag = arch_gradient(prob, p, BilevelConfig{}, 0, 0);
    EXPECT_TRUE(ag.skipped);
    EXPECT_FALSE(ag.second_order);
    EXPECT_DOUBLE_EQ(ag.grads.at("alpha/a")[0], 1.0);
}

TEST(Sgd, MomentumAndDecayByHand) {
    ParamSet w{{"w", Tensor::vector({1.0})}, {"drop/x", Tensor::vector({1.0})}, {"alpha/a", Tensor::vector({1.0})}};
    const ParamSet g{{"w", Tensor::vector({0.5})}, {"drop/x", Tensor::vector({0.5})}, {"alpha/a", Tensor::vector({0.5})}};
    SgdMomentum opt;
    auto sel = [](std::string_view n) { return param_role(n) != ParamRole::Alpha; };
    auto wd = [](std::string_view n) { return param_role(n) == ParamRole::Dropout ? 0.0 : 0.1; };
    opt.step(w, g, 0.2, 0.9, 0.1, sel, wd);
    // buf = 0.5 + 0.1 * 1 = 0.6; w = 1 - 0.2 * 0.6 = 0.88
    EXPECT_DOUBLE_EQ(w.at("w")[0], 0.88);
    EXPECT_DOUBLE_EQ(w.at("drop/x")[0], 0.9);
    EXPECT_EQ(w.at("alpha/a")[0], 1.0);
    opt.step(w, g, 0.2, 0.9, 0.1, sel, wd);
    // buf = 0.9 * 0.6 + 0.5 + 0.1 * 0.88 = 1.128; w = 0.88 - 0.2 * 1.128
    EXPECT_DOUBLE_EQ(w.at("w")[0], 0.88 - 0.2 * 1.128);
    // no decay: buf = 0.9 * 0.5 + 0.5 = 0.95
    EXPECT_DOUBLE_EQ(w.at("drop/x")[0], 0.9 - 0.2 * 0.95);
}

TEST(Losses, ReportsAddUp) {
    const Network net(tiny_spec());
    std::mt19937_64 rng(11);
    const ParamSet p = net.init_params(rng);
    const Batch b = random_batch(8, rng);
    LossSettings s;
    s.T = 4;
    s.dataset_size = 64;
    const Evaluation tr = train_loss(net, p, b, s, 5);
    const Evaluation va = valid_loss(net, p, b, s, 6);
    EXPECT_NEAR(tr.report.total_train, tr.report.ce_train + tr.report.l_mc, 1e-12);
    EXPECT_NEAR(va.report.total_valid, va.report.ce_valid + va.report.pred_var, 1e-12);
    EXPECT_GT(va.report.pred_var, 0.0);
    EXPECT_NE(tr.report.l_mc, 0.0);
    // fixed seeds make both objectives deterministic
    EXPECT_EQ(train_loss(net, p, b, s, 5).grads, tr.grads);
    EXPECT_EQ(valid_loss(net, p, b, s, 6).grads, va.grads);
}

TEST(Losses, CompositeGradientsMatchFiniteDifference) {
    for (Mode m : {Mode::Mudarts, Mode::DartsCd, Mode::Darts}) {
        const Network net(spec_for_mode(tiny_spec(), m));
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            std::mt19937_64 rng(seed);
            ParamSet p = net.init_params(rng);
            for (auto& [n, t] : p)
                if (param_role(n) == ParamRole::Alpha) t = random_tensor(t.shape(), rng, 0.5);
            const Batch b = random_batch(6, rng);
            LossSettings s;
            s.mode = m;
            s.T = 3;
            s.dataset_size = 32;
            s.dropout.temperature = 0.5;  // smoother masks for the difference quotient
            for (int which = 0; which < 2; ++which) {
                auto f = [&](const ParamSet& ps) {
                    return which == 0 ? train_loss(net, ps, b, s, 9) : valid_loss(net, ps, b, s, 9);
                };
                const ParamSet analytic = f(p).grads;
                std::string where;
                std::mt19937_64 pick(seed + 17);
                const double err = udarts::testing::sampled_fd_err(
                    [&](const ParamSet& ps) { return f(ps).value; }, p, analytic,
                    [](const std::string& n) { return is_outer(n); }, 60, pick, &where);
                EXPECT_LT(err, 1e-4)
                    << mode_name(m) << (which ? " valid " : " train ") << where;
            }
        }
    }
}

TEST(Losses, DartsModeNeverTouchesUncertaintyPaths) {
    const Network net(spec_for_mode(tiny_spec(), Mode::Darts));
    std::mt19937_64 rng(12);
    const ParamSet p = net.init_params(rng);
    const Batch b = random_batch(8, rng);
    LossSettings s;
    s.mode = Mode::Darts;
    auto& c = instrumentation();
    const auto v0 = c.variance_calls.load(), r0 = c.regularizer_calls.load(), d0 = c.dropout_samples.load();
    const Evaluation tr = train_loss(net, p, b, s, 1);
    const Evaluation va = valid_loss(net, p, b, s, 2);
    EXPECT_EQ(c.variance_calls.load(), v0);
    EXPECT_EQ(c.regularizer_calls.load(), r0);
    EXPECT_EQ(c.dropout_samples.load(), d0);
    EXPECT_EQ(tr.report.l_mc, 0.0);
    EXPECT_EQ(va.report.pred_var, 0.0);
}

TEST(Losses, DartsCdSkipsVarianceOnly) {
    const Network net(tiny_spec());
    std::mt19937_64 rng(13);
    const ParamSet p = net.init_params(rng);
    const Batch b = random_batch(8, rng);
    LossSettings s;
    s.mode = Mode::DartsCd;
    s.T = 3;
    auto& c = instrumentation();
    const auto v0 = c.variance_calls.load(), r0 = c.regularizer_calls.load();
    const Evaluation va = valid_loss(net, p, b, s, 2);
    train_loss(net, p, b, s, 1);
    EXPECT_EQ(c.variance_calls.load(), v0);
    EXPECT_EQ(c.regularizer_calls.load(), r0 + 1);
    EXPECT_EQ(va.report.pred_var, 0.0);
    EXPECT_EQ(va.report.total_valid, va.report.ce_valid);
}

TEST(Losses, EmptyOrMismatchedBatchRejected) {
    const Network net(tiny_spec());
    std::mt19937_64 rng(14);
    const ParamSet p = net.init_params(rng);
    Batch b = random_batch(4, rng);
    b.y.pop_back();
    EXPECT_THROW(train_loss(net, p, b, LossSettings{}, 0), ShapeError);
    EXPECT_THROW(valid_loss(net, p, Batch{}, LossSettings{}, 0), ShapeError);
}

TEST(SearchEpoch, ZeroRatesKeepParameters) {
    const Network net(tiny_spec());
    SearchState st;
    st.rng.seed(3);
    st.params = net.init_params(st.rng);
    st.buffers = net.init_buffers();
    const ParamSet before = st.params;
    const Buffers bn_before = st.buffers;
    std::mt19937_64 rng(4);
    const Batch tr = random_batch(16, rng), va = random_batch(16, rng);
    SearchSettings s;
    s.batch_size = 8;
    s.loss.T = 2;
    s.bilevel.w_lr = s.bilevel.xi = s.bilevel.alpha_lr = 0.0;
    const EpochRecord rec = search_epoch(st, net, tr, va, s);
    EXPECT_EQ(rec.batches, 2u);
    EXPECT_EQ(st.epoch, 1u);
    EXPECT_EQ(st.params, before);
    EXPECT_NE(st.buffers.begin()->second.mean, bn_before.begin()->second.mean);
}

TEST(SearchEpoch, SeedDeterministicAndMovesOuterVariables) {
    const Network net(tiny_spec());
    std::mt19937_64 rng(5);
    const Batch tr = random_batch(24, rng), va = random_batch(24, rng);
    SearchSettings s;
    s.batch_size = 8;
    s.loss.T = 2;
    s.loss.dataset_size = 24;
    auto run = [&] {
        SearchState st;
        st.rng.seed(9);
        st.params = net.init_params(st.rng);
        st.buffers = net.init_buffers();
        const ParamSet init = st.params;
        search_epoch(st, net, tr, va, s);
        EXPECT_NE(st.params.at("alpha/normal"), init.at("alpha/normal"));
        EXPECT_NE(st.params.at("drop/classifier"), init.at("drop/classifier"));
        return st.params;
    };
    EXPECT_EQ(run(), run());
}

TEST(Gather, PicksRowsInOrder) {
    Tensor x({3, 2, 1, 1}, {0, 1, 2, 3, 4, 5});
    const std::vector<std::size_t> idx{2, 0};
    const Batch b = gather(x, {7, 8, 9}, idx);
    EXPECT_EQ(b.x.raw(), (std::vector<double>{4, 5, 0, 1}));
    EXPECT_EQ(b.y, (std::vector<int>{9, 7}));
}
