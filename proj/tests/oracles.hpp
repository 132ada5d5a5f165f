#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library's numerical kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "lance/diffgraph.hpp"
#include "lance/image.hpp"

namespace oracle {

using lance::diff::Graph;
using lance::diff::Tensor;
using lance::diff::Var;

// Finite differences ----------------------------------------------------------

/// Scalar function of the leaves built on a fresh graph.
using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output element contributes.
inline Var weighted_sum(Graph& g, Var out, std::uint64_t seed = 7) {
    const Tensor& v = g.value(out);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    Tensor w(v.shape);
    for (double& x : w.data) x = u(rng);
    return lance::diff::sum(g, lance::diff::mul(g, out, g.constant(std::move(w))));
}

/// Compares analytic gradients against central differences with step h.
/// The error is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheck check_gradients(const std::vector<Tensor>& inputs, const GraphFn& fn, double h = 1e-4) {
    auto eval = [&](const std::vector<Tensor>& in) {
        Graph g;
        std::vector<Var> leaves;
        for (const auto& t : in) leaves.push_back(g.leaf(t));
        return g.value(fn(g, leaves))[0];
    };
    Graph g;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t));
    const Var out = fn(g, leaves);
    g.backward(out);
    GradCheck res;
    std::vector<Tensor> work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& analytic = g.grad(leaves[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = work[k][i];
            work[k][i] = orig + h;
            const double fp = eval(work);
            work[k][i] = orig - h;
            const double fm = eval(work);
            work[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) /
                               std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            res.max_rel_error = std::max(res.max_rel_error, err);
            ++res.checked;
        }
    }
    return res;
}

inline Tensor random_tensor(lance::diff::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.data) v = u(rng);
    return t;
}

// MED --------------------------------------------------------------------------

/// Median edge detector written out case by case.
inline int med_cases(int a, int b, int c) {
    if (c >= a && c >= b) return a < b ? a : b;
    if (c <= a && c <= b) return a > b ? a : b;
    return a + b - c;
}

// Laplace ------------------------------------------------------------------------

inline double laplace_cdf(double x, double mu, double b) {
    return x < mu ? 0.5 * std::exp((x - mu) / b) : 1.0 - 0.5 * std::exp(-(x - mu) / b);
}

inline double laplace_bin(double v, double mu, double b) {
    return laplace_cdf(v + 0.5, mu, b) - laplace_cdf(v - 0.5, mu, b);
}

// Convolution / dense -------------------------------------------------------------

/// Zero-padded same-size convolution by direct summation.
inline std::vector<double> conv2d(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                                  const std::vector<double>& k, std::size_t cout, std::size_t ks,
                                  const std::vector<double>& bias) {
    std::vector<double> y(cout * h * w);
    const long r = static_cast<long>(ks / 2);
    for (std::size_t o = 0; o < cout; ++o)
        for (long i = 0; i < static_cast<long>(h); ++i)
            for (long j = 0; j < static_cast<long>(w); ++j) {
                double acc = bias[o];
                for (std::size_t c = 0; c < cin; ++c)
                    for (long di = -r; di <= r; ++di)
                        for (long dj = -r; dj <= r; ++dj) {
                            const long ii = i + di, jj = j + dj;
                            if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
                            acc += k[((o * cin + c) * ks + static_cast<std::size_t>(di + r)) * ks +
                                     static_cast<std::size_t>(dj + r)] *
                                   x[(c * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)];
                        }
                y[(o * h + static_cast<std::size_t>(i)) * w + static_cast<std::size_t>(j)] = acc;
            }
    return y;
}

// Resampling ------------------------------------------------------------------------

inline double keys_cubic(double x) {
    const double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
    if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
    return 0.0;
}

/// 1-D x2 upsampling by evaluating the symmetric 8-tap filter at each output
/// position from first principles: output o sits at input coordinate
/// (o + 0.5) / 2 - 0.5; the four nearest inputs get the tap matching their
/// distance (1/4, 3/4, 5/4, 7/4). Inputs are edge-replicated.
inline std::vector<double> upsample_1d(const std::vector<double>& x, std::size_t out,
                                       const std::array<double, 4>& taps) {
    std::vector<double> y(out, 0.0);
    const long n = static_cast<long>(x.size());
    for (std::size_t o = 0; o < out; ++o) {
        const double pos = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        const long base = static_cast<long>(std::floor(pos));
        for (long i = base - 1; i <= base + 2; ++i) {
            const double dist = std::abs(pos - static_cast<double>(i));
            const int which = static_cast<int>(std::lround(dist * 2.0 - 0.5));  // 1/4->0, 3/4->1, 5/4->2, 7/4->3
            const long src = std::clamp(i, 0L, n - 1);
            y[o] += taps[static_cast<std::size_t>(which)] * x[static_cast<std::size_t>(src)];
        }
    }
    return y;
}

inline std::vector<double> upsample_2d(const std::vector<double>& x, std::size_t h, std::size_t w, std::size_t oh,
                                       std::size_t ow, const std::array<double, 4>& taps) {
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t i = 0; i < h; ++i) {
        std::vector<double> row(x.begin() + static_cast<long>(i * w), x.begin() + static_cast<long>((i + 1) * w));
        const auto r = upsample_1d(row, ow, taps);
        std::copy(r.begin(), r.end(), tmp.begin() + static_cast<long>(i * ow));
    }
    for (std::size_t j = 0; j < ow; ++j) {
        std::vector<double> col(h);
        for (std::size_t i = 0; i < h; ++i) col[i] = tmp[i * ow + j];
        const auto c = upsample_1d(col, oh, taps);
        for (std::size_t i = 0; i < oh; ++i) out[i * ow + j] = c[i];
    }
    return out;
}

// Akima / BD-rate -----------------------------------------------------------------------

/// Akima derivative estimates written directly from the slope definition.
inline std::vector<double> akima_derivatives(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    auto slope = [&](long k) -> double {
        // k indexes segments; extend two on each side linearly in the slope sequence
        const long last = static_cast<long>(n) - 2;
        auto base = [&](long s) { return (y[static_cast<std::size_t>(s + 1)] - y[static_cast<std::size_t>(s)]) /
                                         (x[static_cast<std::size_t>(s + 1)] - x[static_cast<std::size_t>(s)]); };
        if (k >= 0 && k <= last) return base(k);
        if (k == -1) return 2.0 * base(0) - base(1);
        if (k == -2) return 3.0 * base(0) - 2.0 * base(1);
        if (k == last + 1) return 2.0 * base(last) - base(last - 1);
        return 3.0 * base(last) - 2.0 * base(last - 1);
    };
    std::vector<double> t(n);
    for (long i = 0; i < static_cast<long>(n); ++i) {
        const double m0 = slope(i - 2), m1 = slope(i - 1), m2 = slope(i), m3 = slope(i + 1);
        const double w1 = std::abs(m3 - m2), w2 = std::abs(m1 - m0);
        t[static_cast<std::size_t>(i)] = (w1 + w2 == 0.0) ? 0.5 * (m1 + m2) : (w1 * m1 + w2 * m2) / (w1 + w2);
    }
    return t;
}

/// Hermite evaluation of the Akima interpolant.
inline double akima_eval(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& t,
                         double xv) {
    std::size_t k = 0;
    while (k + 2 < x.size() && xv > x[k + 1]) ++k;
    const double hh = x[k + 1] - x[k];
    const double s = (xv - x[k]) / hh;
    const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
    const double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
    return h00 * y[k] + h10 * hh * t[k] + h01 * y[k + 1] + h11 * hh * t[k + 1];
}

/// BD-rate by trapezoid integration of both Akima interpolants on a fine grid.
inline double bd_rate_trapezoid(std::vector<std::pair<double, double>> ref, std::vector<std::pair<double, double>> test,
                                std::size_t steps = 200000) {
    auto prep = [](std::vector<std::pair<double, double>> c, std::vector<double>& x, std::vector<double>& y) {
        std::sort(c.begin(), c.end(), [](auto a, auto b) { return a.second < b.second; });
        for (auto [rate, q] : c) {
            x.push_back(q);
            y.push_back(std::log10(rate));
        }
    };
    std::vector<double> xr, yr, xt, yt;
    prep(std::move(ref), xr, yr);
    prep(std::move(test), xt, yt);
    const auto tr = akima_derivatives(xr, yr), tt = akima_derivatives(xt, yt);
    const double lo = std::max(xr.front(), xt.front()), hi = std::min(xr.back(), xt.back());
    const double dx = (hi - lo) / static_cast<double>(steps);
    double acc = 0.0;
    for (std::size_t i = 0; i <= steps; ++i) {
        const double xv = lo + dx * static_cast<double>(i);
        const double d = akima_eval(xt, yt, tt, xv) - akima_eval(xr, yr, tr, xv);
        acc += (i == 0 || i == steps) ? 0.5 * d : d;
    }
    const double avg = acc * dx / (hi - lo);
    return (std::pow(10.0, avg) - 1.0) * 100.0;
}

// Images ---------------------------------------------------------------------------------

inline lance::Image random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    lance::Image img(w, h);
    // smooth random field plus noise so the codec has structure to learn
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double fx = 0.05 + 0.2 * u(rng), fy = 0.05 + 0.2 * u(rng), ph = 6.28 * u(rng);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = 128.0 + 80.0 * std::sin(fx * static_cast<double>(j) + ph + static_cast<double>(c)) *
                                              std::cos(fy * static_cast<double>(i)) +
                                 20.0 * (u(rng) - 0.5);
                img.at(i, j, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
    return img;
}

/// Left half a smooth gradient, right half seeded high-frequency texture.
inline lance::Image two_region_image(std::size_t w, std::size_t h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, 255);
    std::uniform_real_distribution<double> phase(0.0, 6.283185307179586);
    double ph[6];
    for (double& p : ph) p = phase(rng);
    lance::Image img(w, h);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                if (j < w / 2) {
                    const double v = 40.0 + 150.0 * static_cast<double>(i + j) / static_cast<double>(h + w / 2) +
                                     10.0 * static_cast<double>(c);
                    img.at(i, j, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
                } else {
                    const double v = 128.0 + 60.0 * std::sin(1.3 * static_cast<double>(j) + ph[c]) +
                                     50.0 * std::sin(1.7 * static_cast<double>(i) + ph[c + 3]) + 0.15 * (u(rng) - 127.5);
                    img.at(i, j, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
                }
            }
    return img;
}

/// FNV-1a 64-bit hash, used to pin golden outputs.
inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (auto b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace oracle
