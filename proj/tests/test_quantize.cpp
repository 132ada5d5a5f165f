#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lance/quantize.hpp"
#include "oracles.hpp"

using namespace lance;

TEST(Round, TiesAwayFromZero) {
    EXPECT_EQ(quant::round(0.5), 1);
    EXPECT_EQ(quant::round(-0.5), -1);
    EXPECT_EQ(quant::round(1.49), 1);
    EXPECT_EQ(quant::round(-2.5), -3);
    EXPECT_THROW(quant::round(std::nan("")), ContractError);
}

TEST(SoftRound, FixesHalfIntegersAndApproachesRounding) {
    for (double x : {-2.5, -0.5, 0.5, 3.5}) EXPECT_NEAR(quant::softround(x, 0.3), x, 1e-12);
    for (double x : {-1.3, -0.2, 0.1, 0.7, 2.3}) EXPECT_NEAR(quant::softround(x, 0.01), std::round(x), 1e-6);
    EXPECT_THROW(quant::softround(0.2, 0.0), ContractError);
}

TEST(SoftRound, IsMonotoneAndContinuousAcrossIntegers) {
    double prev = quant::softround(-3.0, 0.2);
    for (int i = 1; i <= 6000; ++i) {
        const double x = -3.0 + i * 1e-3;
        const double y = quant::softround(x, 0.2);
        EXPECT_GE(y, prev - 1e-12);
        prev = y;
    }
    for (int k = -2; k <= 2; ++k) EXPECT_NEAR(quant::softround(k - 1e-9, 0.2), quant::softround(k + 1e-9, 0.2), 1e-6);
}

TEST(SoftRound, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const double t = 0.1 + 0.3 * (trial % 5) / 4.0;
        const auto res = oracle::check_gradients({oracle::random_tensor({6}, rng, -3.0, 3.0)},
                                                 [t](oracle::Graph& g, const std::vector<oracle::Var>& v) {
                                                     return oracle::weighted_sum(g, quant::softround(g, v[0], t));
                                                 });
        EXPECT_LT(res.max_rel_error, 1e-4);
    }
}

TEST(NoisySoftRound, ZeroNoiseIsDoubleSoftRound) {
    std::mt19937_64 rng(1);
    for (double x : {-1.7, -0.3, 0.0, 0.4, 2.2}) {
        EXPECT_NEAR(quant::noisy_softround(x, 0.3, 0.0, rng), quant::softround(quant::softround(x, 0.3), 0.3), 1e-15);
    }
    EXPECT_NEAR(quant::noisy_softround(3.0, 0.3, 0.0, rng), 3.0, 1e-12);
}

TEST(NoisySoftRound, MonteCarloMeanMatchesQuadrature) {
    // E[softround(softround(x) + n)] with n ~ N(0, s^2), by Gauss-Hermite-free
    // midpoint quadrature over +-8 s.
    const double t = 0.3, s = 0.25;
    for (double x : {-0.8, 0.1, 0.45, 1.3}) {
        const double inner = quant::softround(x, t);
        double ref = 0.0, mass = 0.0;
        const int steps = 20000;
        for (int i = 0; i < steps; ++i) {
            const double n = -8.0 * s + (i + 0.5) * 16.0 * s / steps;
            const double w = std::exp(-0.5 * n * n / (s * s));
            ref += w * quant::softround(inner + n, t);
            mass += w;
        }
        ref /= mass;
        std::mt19937_64 rng(99);
        double mc = 0.0;
        const int samples = 200000;
        for (int i = 0; i < samples; ++i) mc += quant::noisy_softround(x, t, s, rng);
        mc /= samples;
        EXPECT_NEAR(mc, ref, 5e-3) << "x=" << x;
    }
}

TEST(SteRound, ForwardRoundsBackwardIsIdentity) {
    oracle::Graph g;
    const auto x = g.leaf(oracle::Tensor({4}, {-1.6, -0.4, 0.5, 2.49}));
    const auto y = quant::ste_round(g, x);
    EXPECT_EQ(g.value(y).data, (std::vector<double>{-2.0, 0.0, 1.0, 2.0}));
    g.backward(oracle::weighted_sum(g, y));
    const auto& gx = g.grad(x);
    oracle::Graph g2;
    const auto x2 = g2.leaf(oracle::Tensor({4}, 0.0));
    g2.backward(oracle::weighted_sum(g2, x2));
    EXPECT_EQ(gx.data, g2.grad(x2).data);
}

TEST(Schedule, AnnealsLinearlyOverPhaseOne) {
    quant::QuantSchedule s;
    s.phase1_iters = 101;
    s.phase2_iters = 10;
    EXPECT_DOUBLE_EQ(s.temperature(0), 0.3);
    EXPECT_DOUBLE_EQ(s.temperature(100), 0.1);
    EXPECT_NEAR(s.temperature(50), 0.2, 1e-12);
    EXPECT_DOUBLE_EQ(s.noise_std(0), 0.25);
    EXPECT_DOUBLE_EQ(s.noise_std(100), 0.1);
    EXPECT_TRUE(s.in_phase1(100));
    EXPECT_FALSE(s.in_phase1(101));
    EXPECT_EQ(s.total_iters(), 111u);
}

TEST(Schedule, RejectsNonPositiveTemperature) {
    quant::QuantSchedule s;
    s.temperature_end = 0.0;
    EXPECT_THROW(s.validate(), ConfigError);
}
