#pragma once

// Hard quantization and its training-time relaxations.

#include <cmath>
#include <cstdint>
#include <random>

#include "lance/diffgraph.hpp"
#include "lance/errors.hpp"

namespace lance::quant {

/// Annealing schedule for the relaxed quantizer. Phase 1 uses noisy soft
/// rounding with linearly decaying temperature and noise; phase 2 uses the
/// straight-through estimator.
struct QuantSchedule {
    std::uint32_t phase1_iters = 9000;
    std::uint32_t phase2_iters = 1000;
    double temperature_start = 0.3;
    double temperature_end = 0.1;
    double noise_std_start = 0.25;
    double noise_std_end = 0.1;

    void validate() const {
        if (phase1_iters < 1 || phase2_iters < 1) throw ConfigError("schedule: phase counts must be >= 1");
        if (!(temperature_start > 0.0) || !(temperature_end > 0.0))
            throw ConfigError("schedule: temperatures must be strictly positive");
        if (noise_std_start < 0.0 || noise_std_end < 0.0) throw ConfigError("schedule: noise std must be >= 0");
    }

    /// Fraction of phase 1 completed at `iter` (0 at the first iteration, 1 at the last).
    double progress(std::uint32_t iter) const {
        if (phase1_iters <= 1) return 1.0;
        const double p = static_cast<double>(iter) / static_cast<double>(phase1_iters - 1);
        return p > 1.0 ? 1.0 : p;
    }
    double temperature(std::uint32_t iter) const {
        return temperature_start + (temperature_end - temperature_start) * progress(iter);
    }
    double noise_std(std::uint32_t iter) const {
        return noise_std_start + (noise_std_end - noise_std_start) * progress(iter);
    }
    bool in_phase1(std::uint32_t iter) const { return iter < phase1_iters; }
    std::uint32_t total_iters() const { return phase1_iters + phase2_iters; }
};

/// Nearest integer, ties away from zero.
inline std::int64_t round(double v) {
    if (!std::isfinite(v)) throw ContractError("round: non-finite input");
    return static_cast<std::int64_t>(std::round(v));
}

inline double softround(double x, double t) {
    if (!(t > 0.0)) throw ContractError("softround: temperature must be > 0");
    const double fl = std::floor(x);
    const double delta = x - fl - 0.5;
    return fl + std::tanh(delta / t) / (2.0 * std::tanh(1.0 / (2.0 * t))) + 0.5;
}

inline double softround_derivative(double x, double t) {
    const double delta = x - std::floor(x) - 0.5;
    const double th = std::tanh(delta / t);
    return (1.0 - th * th) / (t * 2.0 * std::tanh(1.0 / (2.0 * t)));
}

/// softround(softround(x, t) + n, t) with n ~ N(0, noise_std^2).
template <class Rng>
double noisy_softround(double x, double t, double noise_std, Rng& rng) {
    double n = 0.0;
    if (noise_std > 0.0) n = std::normal_distribution<double>(0.0, noise_std)(rng);
    return softround(softround(x, t) + n, t);
}

// Graph ops ------------------------------------------------------------------

inline diff::Var softround(diff::Graph& g, diff::Var x, double t) {
    if (!(t > 0.0)) throw ContractError("softround: temperature must be > 0");
    diff::Tensor out = g.value(x);
    for (double& v : out.data) v = softround(v, t);
    return g.record(diff::OpKind::SoftRound, {x}, std::move(out), [x, t](diff::Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& xv = gr.value(x.id).data;
        diff::Tensor& gx = gr.grad_buffer(x.id);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * softround_derivative(xv[i], t);
    });
}

/// Forward: hard rounding. Backward: identity.
inline diff::Var ste_round(diff::Graph& g, diff::Var x) {
    diff::Tensor out = g.value(x);
    for (double& v : out.data) v = static_cast<double>(round(v));
    return g.record(diff::OpKind::SteRound, {x}, std::move(out), [x](diff::Graph& gr, std::size_t self) {
        diff::detail::accumulate(gr, x.id, gr.grad_of(self).data);
    });
}

/// Noisy soft quantization with one noise sample per element drawn from `rng`.
template <class Rng>
diff::Var noisy_softround(diff::Graph& g, diff::Var x, double t, double noise_std, Rng& rng) {
    diff::Tensor noise(g.value(x).shape, 0.0);
    if (noise_std > 0.0) {
        std::normal_distribution<double> nd(0.0, noise_std);
        for (double& v : noise.data) v = nd(rng);
    }
    const diff::Var first = softround(g, x, t);
    return softround(g, diff::add(g, first, g.constant(std::move(noise))), t);
}

}  // namespace lance::quant
