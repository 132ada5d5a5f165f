#include <gtest/gtest.h>

#include <random>

#include "lance/diffgraph.hpp"
#include "lance/errors.hpp"
#include "oracles.hpp"

using namespace lance;
using diff::Graph;
using diff::Tensor;
using diff::Var;

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

void expect_gradients(const std::vector<Tensor>& inputs, const oracle::GraphFn& fn) {
    const auto res = oracle::check_gradients(inputs, fn, kStep);
    EXPECT_GT(res.checked, 0u);
    EXPECT_LT(res.max_rel_error, kTol);
}

}  // namespace

TEST(Graph, GradBeforeBackwardIsStateError) {
    Graph g;
    const Var x = g.leaf(Tensor({2}, {1.0, 2.0}));
    EXPECT_THROW(g.grad(x), StateError);
}

TEST(Graph, BackwardRequiresScalar) {
    Graph g;
    const Var x = g.leaf(Tensor({2}, {1.0, 2.0}));
    EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Graph, SumOfSquaresGradient) {
    Graph g;
    const Var x = g.leaf(Tensor({3}, {1.0, -2.0, 3.0}));
    g.backward(diff::sum(g, diff::mul(g, x, x)));
    EXPECT_EQ(g.grad(x).data, (std::vector<double>{2.0, -4.0, 6.0}));
}

TEST(Graph, SharedSubexpressionAccumulates) {
    Graph g;
    const Var x = g.leaf(Tensor({1}, {3.0}));
    const Var y = diff::add(g, x, x);
    g.backward(diff::sum(g, diff::mul(g, y, x)));  // 2x^2
    EXPECT_DOUBLE_EQ(g.grad(x)[0], 12.0);
}

TEST(Graph, ConstantsReceiveNoGradient) {
    Graph g;
    const Var c = g.constant(Tensor({1}, {2.0}));
    const Var x = g.leaf(Tensor({1}, {5.0}));
    g.backward(diff::sum(g, diff::mul(g, c, x)));
    EXPECT_DOUBLE_EQ(g.grad(x)[0], 2.0);
    EXPECT_DOUBLE_EQ(g.grad(c)[0], 0.0);
}

TEST(Graph, ShapeMismatchRejected) {
    Graph g;
    const Var a = g.leaf(Tensor({2}));
    const Var b = g.leaf(Tensor({3}));
    EXPECT_THROW(diff::add(g, a, b), ContractError);
}

TEST(Graph, ForwardIsDeterministic) {
    std::mt19937_64 rng(3);
    const Tensor x = oracle::random_tensor({4, 6, 5}, rng);
    const Tensor k = oracle::random_tensor({2, 4, 3, 3}, rng);
    const Tensor b = oracle::random_tensor({2}, rng);
    auto run = [&] {
        Graph g;
        return g.value(diff::conv2d(g, g.leaf(x), g.leaf(k), g.leaf(b))).data;
    };
    EXPECT_EQ(run(), run());
}

TEST(Graph, DenseIsLinearInInput) {
    std::mt19937_64 rng(4);
    const Tensor w = oracle::random_tensor({3, 5}, rng);
    const Tensor zero({3}, 0.0);
    const Tensor a = oracle::random_tensor({4, 5}, rng);
    const Tensor b = oracle::random_tensor({4, 5}, rng);
    Tensor ab({4, 5});
    for (std::size_t i = 0; i < ab.size(); ++i) ab[i] = 2.0 * a[i] - 3.0 * b[i];
    Graph g;
    const Tensor ya = g.value(diff::dense(g, g.leaf(a), g.leaf(w), g.leaf(zero)));
    const Tensor yb = g.value(diff::dense(g, g.leaf(b), g.leaf(w), g.leaf(zero)));
    const Tensor yab = g.value(diff::dense(g, g.leaf(ab), g.leaf(w), g.leaf(zero)));
    for (std::size_t i = 0; i < yab.size(); ++i) EXPECT_NEAR(yab[i], 2.0 * ya[i] - 3.0 * yb[i], 1e-12);
}

TEST(Kernels, ConvMatchesDirectSummation) {
    std::mt19937_64 rng(5);
    for (std::size_t ks : {1u, 3u}) {
        const Tensor x = oracle::random_tensor({3, 7, 6}, rng);
        const Tensor k = oracle::random_tensor({4, 3, ks, ks}, rng);
        const Tensor b = oracle::random_tensor({4}, rng);
        Graph g;
        const auto& y = g.value(diff::conv2d(g, g.leaf(x), g.leaf(k), g.leaf(b)));
        const auto ref = oracle::conv2d(x.data, 3, 7, 6, k.data, 4, ks, b.data);
        ASSERT_EQ(y.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(Kernels, ConvRejectsOtherKernelSizes) {
    Graph g;
    const Var x = g.leaf(Tensor({1, 4, 4}));
    const Var k = g.leaf(Tensor({1, 1, 5, 5}));
    const Var b = g.leaf(Tensor({1}));
    EXPECT_THROW(diff::conv2d(g, x, k, b), ConfigError);
}

// Finite-difference checks: 100 random trials per op family.

TEST(GradientCheck, Dense) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 1 + rng() % 4, n = 1 + rng() % 5, m = 1 + rng() % 4;
        expect_gradients({oracle::random_tensor({rows, n}, rng), oracle::random_tensor({m, n}, rng),
                          oracle::random_tensor({m}, rng)},
                         [](Graph& g, const std::vector<Var>& v) {
                             return oracle::weighted_sum(g, diff::dense(g, v[0], v[1], v[2]));
                         });
    }
}

TEST(GradientCheck, Conv) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t ks = trial % 2 ? 3 : 1;
        const std::size_t cin = 1 + rng() % 3, cout = 1 + rng() % 3, h = 2 + rng() % 4, w = 2 + rng() % 4;
        expect_gradients({oracle::random_tensor({cin, h, w}, rng), oracle::random_tensor({cout, cin, ks, ks}, rng),
                          oracle::random_tensor({cout}, rng)},
                         [](Graph& g, const std::vector<Var>& v) {
                             return oracle::weighted_sum(g, diff::conv2d(g, v[0], v[1], v[2]));
                         });
    }
}

TEST(GradientCheck, ElementwiseOps) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = oracle::random_tensor({5}, rng);
        const Tensor b = oracle::random_tensor({5}, rng);
        expect_gradients({a, b}, [](Graph& g, const std::vector<Var>& v) {
            const Var s = diff::sub(g, diff::mul(g, v[0], v[1]), diff::scale(g, v[1], 0.7));
            const Var e = diff::exp(g, diff::add_scalar(g, v[0], 0.1));
            const Var r = diff::relu(g, diff::add(g, s, e));
            return oracle::weighted_sum(g, diff::add(g, r, diff::clamp(g, v[1], -0.5, 0.5)));
        });
    }
}

TEST(GradientCheck, Mse) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = oracle::random_tensor({2, 3, 4}, rng);
        const Tensor t = oracle::random_tensor({2, 3, 4}, rng);
        expect_gradients({a}, [t](Graph& g, const std::vector<Var>& v) { return diff::mse(g, v[0], t); });
    }
}

TEST(GradientCheck, StructuralOps) {
    std::mt19937_64 rng(15);
    const std::vector<std::pair<int, int>> offsets = {{0, -1}, {-1, 0}, {-1, -1}, {-1, 1}, {0, -2}};
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = 2 + rng() % 4, w = 2 + rng() % 4;
        expect_gradients({oracle::random_tensor({h, w}, rng), oracle::random_tensor({h * w}, rng)},
                         [&](Graph& g, const std::vector<Var>& v) {
                             const Var ctx = diff::gather_context(g, v[0], offsets);
                             const Var wide = diff::concat_cols(g, {ctx, v[1]});
                             const Var part = diff::slice_cols(g, wide, 1, 4);
                             const Var flat = diff::reshape(g, part, {h * w * 3});
                             return oracle::weighted_sum(g, diff::concat(g, {flat, v[1]}, {h * w * 4}));
                         });
    }
}

TEST(GradientCheck, Upsample) {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = 1 + rng() % 4, w = 1 + rng() % 4;
        const std::size_t oh = 2 * h - (rng() % 2), ow = 2 * w - (rng() % 2);
        expect_gradients({oracle::random_tensor({h, w}, rng), oracle::random_tensor({4}, rng)},
                         [oh, ow](Graph& g, const std::vector<Var>& v) {
                             return oracle::weighted_sum(g, diff::upsample2x(g, v[0], v[1], oh, ow));
                         });
    }
}

TEST(Kernels, UpsampleMatchesFirstPrinciplesOracle) {
    std::mt19937_64 rng(17);
    const std::array<double, 4> taps = {0.8, 0.25, -0.05, -0.02};
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = 1 + rng() % 6, w = 1 + rng() % 6;
        const std::size_t oh = 2 * h - (rng() % 2), ow = 2 * w - (rng() % 2);
        const Tensor x = oracle::random_tensor({h, w}, rng);
        Graph g;
        const auto& y = g.value(diff::upsample2x(g, g.leaf(x), g.leaf(Tensor({4}, {taps.begin(), taps.end()})), oh, ow));
        const auto ref = oracle::upsample_2d(x.data, h, w, oh, ow, taps);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(Kernels, UpsampleRejectsNonDyadicShapes) {
    Graph g;
    const Var x = g.leaf(Tensor({3, 3}));
    const Var t = g.leaf(Tensor({4}));
    EXPECT_THROW(diff::upsample2x(g, x, t, 8, 6), ContractError);
}
