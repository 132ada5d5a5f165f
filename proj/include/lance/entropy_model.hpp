#pragma once

// Discretized Laplace probability model, rate estimation and quantized CDF
// tables for the range coder.
//
// Everything the decoder evaluates here uses only IEEE-754 basic operations
// (including the exponential, see repro_exp), so encoder and decoder derive
// bit-identical tables on any conforming platform.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "lance/diffgraph.hpp"
#include "lance/errors.hpp"

namespace lance::entropy {

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kSigmaMax = 1e3;
inline constexpr int kDefaultPrecision = 16;

/// exp(x) from range reduction and a fixed Horner polynomial. Uses only
/// +, -, *, floor and ldexp, so results do not depend on the platform libm.
inline double repro_exp(double x) {
    if (std::isnan(x)) return x;
    if (x > 709.0) return std::numeric_limits<double>::infinity();
    if (x < -745.0) return 0.0;
    constexpr double ln2_hi = 6.93147180369123816490e-01;
    constexpr double ln2_lo = 1.90821492927058770002e-10;
    constexpr double inv_ln2 = 1.44269504088896338700e+00;
    const double kd = std::floor(x * inv_ln2 + 0.5);
    const double r = (x - kd * ln2_hi) - kd * ln2_lo;  // |r| <= 0.35
    double p = 1.0 / 6227020800.0;                        // 1/13!
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    return std::ldexp(p, static_cast<int>(kd));
}

/// Location and scale of a Laplace density.
struct LaplaceParams {
    double mu = 0.0;
    double sigma = 1.0;
};

/// Scale from the raw network output: exp(raw) clamped to [kSigmaMin, kSigmaMax].
inline double sigma_from_raw(double raw) { return std::clamp(repro_exp(raw), kSigmaMin, kSigmaMax); }

/// Probability mass of the unit bin centred on v. Tails are evaluated on the
/// side of the mean they lie on to avoid cancellation.
inline double laplace_pmf(double v, LaplaceParams p) {
    if (!(p.sigma > 0.0)) throw ContractError("laplace_pmf: sigma must be > 0");
    const double lo = v - 0.5 - p.mu;
    const double hi = v + 0.5 - p.mu;
    const double b = p.sigma;
    if (lo >= 0.0) return 0.5 * (repro_exp(-lo / b) - repro_exp(-hi / b));
    if (hi <= 0.0) return 0.5 * (repro_exp(hi / b) - repro_exp(lo / b));
    return 1.0 - 0.5 * repro_exp(lo / b) - 0.5 * repro_exp(-hi / b);
}

struct PmfPartials {
    double pmf;
    double d_value;
    double d_mu;
    double d_sigma;
};

inline PmfPartials laplace_pmf_partials(double v, LaplaceParams p) {
    const double pmf = laplace_pmf(v, p);
    const double b = p.sigma;
    const double lo = v - 0.5 - p.mu;
    const double hi = v + 0.5 - p.mu;
    const double f_lo = 0.5 / b * repro_exp(-std::abs(lo) / b);
    const double f_hi = 0.5 / b * repro_exp(-std::abs(hi) / b);
    PmfPartials out{};
    out.pmf = pmf;
    out.d_value = f_hi - f_lo;
    out.d_mu = -(f_hi - f_lo);
    out.d_sigma = -(hi / b) * f_hi + (lo / b) * f_lo;
    return out;
}

inline double probability_floor(int precision) { return std::ldexp(1.0, -precision); }

/// Estimated code length in bits: sum of -log2 pmf, with pmf floored at 2^-precision.
inline double rate_bits(std::span<const std::int64_t> symbols, std::span<const LaplaceParams> params,
                        int precision = kDefaultPrecision) {
    if (symbols.size() != params.size()) throw ContractError("rate_bits: shape mismatch");
    const double floor_p = probability_floor(precision);
    double bits = 0.0;
    for (std::size_t i = 0; i < symbols.size(); ++i)
        bits -= std::log2(std::max(laplace_pmf(static_cast<double>(symbols[i]), params[i]), floor_p));
    return bits;
}

/// Quantized cumulative frequency table over [support_min, support_max].
/// cumulative has (max - min + 2) entries, starting at 0 and ending at 2^precision.
struct CdfTable {
    std::int32_t support_min = 0;
    std::int32_t support_max = 0;
    int precision = kDefaultPrecision;
    std::vector<std::uint32_t> cumulative;

    std::size_t alphabet_size() const { return cumulative.size() - 1; }
    bool contains(std::int64_t symbol) const { return symbol >= support_min && symbol <= support_max; }
    std::uint32_t low(std::int64_t symbol) const { return cumulative[static_cast<std::size_t>(symbol - support_min)]; }
    std::uint32_t freq(std::int64_t symbol) const {
        const auto k = static_cast<std::size_t>(symbol - support_min);
        return cumulative[k + 1] - cumulative[k];
    }
    double probability(std::int64_t symbol) const { return std::ldexp(static_cast<double>(freq(symbol)), -precision); }
    /// Ideal code length of `symbol` under this table.
    double bits(std::int64_t symbol) const { return precision - std::log2(static_cast<double>(freq(symbol))); }
};

/// Quantizes the Laplace pmf over the support to integer counts summing to
/// 2^precision, every symbol getting at least one count. Counts start at
/// floor(p * 2^precision); the remaining slack goes one count at a time to
/// the largest fractional remainders (or is taken from the smallest ones).
inline CdfTable build_cdf(LaplaceParams p, std::int32_t support_min, std::int32_t support_max,
                          int precision = kDefaultPrecision) {
    if (support_min > support_max) throw ContractError("build_cdf: empty support");
    if (precision < 12 || precision > 16) throw ContractError("build_cdf: precision must be in [12, 16]");
    if (!(p.sigma > 0.0)) throw ContractError("build_cdf: sigma must be > 0");
    const auto n = static_cast<std::size_t>(static_cast<std::int64_t>(support_max) - support_min + 1);
    const std::int64_t total = std::int64_t{1} << precision;
    if (n > static_cast<std::size_t>(total)) throw ContractError("build_cdf: support larger than 2^precision");

    std::vector<double> mass(n);
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        mass[k] = laplace_pmf(static_cast<double>(support_min + static_cast<std::int64_t>(k)), p);
        sum += mass[k];
    }
    if (!(sum > 0.0)) {
        // Every bin underflowed: put the mass on the symbol nearest the mean.
        const double m = std::clamp(std::round(p.mu), static_cast<double>(support_min), static_cast<double>(support_max));
        std::fill(mass.begin(), mass.end(), 0.0);
        mass[static_cast<std::size_t>(static_cast<std::int64_t>(m) - support_min)] = 1.0;
        sum = 1.0;
    }

    std::vector<std::int64_t> freq(n);
    std::vector<double> frac(n);
    std::int64_t assigned = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double target = mass[k] / sum * static_cast<double>(total);
        const double fl = std::floor(target);
        if (fl < 1.0) {
            freq[k] = 1;
            frac[k] = -1.0;
        } else {
            freq[k] = static_cast<std::int64_t>(fl);
            frac[k] = target - fl;
        }
        assigned += freq[k];
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::int64_t deficit = total - assigned;
    if (deficit > 0) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
        for (std::int64_t i = 0; i < deficit; ++i) ++freq[order[static_cast<std::size_t>(i) % n]];
    } else if (deficit < 0) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] < frac[b]; });
        while (deficit < 0) {
            for (std::size_t k : order) {
                if (deficit == 0) break;
                if (freq[k] > 1) {
                    --freq[k];
                    ++deficit;
                }
            }
        }
    }

    CdfTable table;
    table.support_min = support_min;
    table.support_max = support_max;
    table.precision = precision;
    table.cumulative.resize(n + 1);
    table.cumulative[0] = 0;
    for (std::size_t k = 0; k < n; ++k)
        table.cumulative[k + 1] = table.cumulative[k] + static_cast<std::uint32_t>(freq[k]);
    return table;
}

/// Differentiable rate in bits: sum_i -log2 pmf(v_i; mu_i, sigma_i).
/// Elements whose pmf falls under the coder floor cost `precision` bits and
/// pass no gradient.
inline diff::Var laplace_rate(diff::Graph& g, diff::Var v, diff::Var mu, diff::Var sigma,
                              int precision = kDefaultPrecision) {
    const auto& vv = g.value(v).data;
    const auto& mv = g.value(mu).data;
    const auto& sv = g.value(sigma).data;
    if (vv.size() != mv.size() || vv.size() != sv.size()) throw ContractError("laplace_rate: size mismatch");
    const double floor_p = probability_floor(precision);
    std::vector<double> dv(vv.size()), dm(vv.size()), ds(vv.size());
    double bits = 0.0;
    constexpr double inv_ln2 = 1.44269504088896338700;
    for (std::size_t i = 0; i < vv.size(); ++i) {
        const PmfPartials pp = laplace_pmf_partials(vv[i], LaplaceParams{mv[i], sv[i]});
        if (pp.pmf < floor_p) {
            bits += static_cast<double>(precision);
            dv[i] = dm[i] = ds[i] = 0.0;
            continue;
        }
        bits -= std::log2(pp.pmf);
        const double scale = -inv_ln2 / pp.pmf;
        dv[i] = scale * pp.d_value;
        dm[i] = scale * pp.d_mu;
        ds[i] = scale * pp.d_sigma;
    }
    return g.record(diff::OpKind::LaplaceRate, {v, mu, sigma}, diff::Tensor({1}, {bits}),
                    [v, mu, sigma, dv = std::move(dv), dm = std::move(dm), ds = std::move(ds)](diff::Graph& gr,
                                                                                                std::size_t self) {
                        const double go = gr.grad_of(self)[0];
                        auto push = [&](diff::Var t, const std::vector<double>& d) {
                            if (!gr.requires_grad(t.id)) return;
                            diff::Tensor& gt = gr.grad_buffer(t.id);
                            for (std::size_t i = 0; i < d.size(); ++i) gt[i] += go * d[i];
                        };
                        push(v, dv);
                        push(mu, dm);
                        push(sigma, ds);
                    });
}

}  // namespace lance::entropy
