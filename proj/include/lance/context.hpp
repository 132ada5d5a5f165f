#pragma once

// Causal context windows, the median edge detector (MED) predictor, and the
// two autoregressive context models:
//   * the hyperprior model, MED prediction plus a 20-parameter learned correction;
//   * the latent model, a residual 3-layer MLP over N causal neighbours with
//     the co-located hyperprior sample and the normalized layer index appended
//     to its first-layer input.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lance/diffgraph.hpp"
#include "lance/entropy_model.hpp"
#include "lance/errors.hpp"

namespace lance::ctx {

using Offset = std::pair<int, int>;  // (row, col) relative to the current position

inline bool is_causal(Offset o) { return o.first < 0 || (o.first == 0 && o.second < 0); }

/// Ordered list of strictly causal taps.
class ContextWindow {
public:
    ContextWindow() = default;
    explicit ContextWindow(std::vector<Offset> taps) : taps_(std::move(taps)) {
        for (Offset o : taps_)
            if (!is_causal(o)) throw ConfigError("context window: tap is not causal in raster order");
    }

    /// Window of the given size. N = 3 is (left, top, top-left), the MED
    /// neighbourhood. Larger windows take causal positions in order of
    /// Chebyshev distance, then Euclidean distance, then raster order.
    static ContextWindow make(std::size_t n) {
        if (n == 3) return ContextWindow({{0, -1}, {-1, 0}, {-1, -1}});
        if (n != 5 && n != 8 && n != 16) throw ConfigError("context window: size must be 3, 5, 8 or 16");
        std::vector<Offset> cand;
        for (int dr = -4; dr <= 0; ++dr)
            for (int dc = -4; dc <= 4; ++dc)
                if (is_causal({dr, dc})) cand.emplace_back(dr, dc);
        std::stable_sort(cand.begin(), cand.end(), [](Offset a, Offset b) {
            const int ca = std::max(std::abs(a.first), std::abs(a.second));
            const int cb = std::max(std::abs(b.first), std::abs(b.second));
            if (ca != cb) return ca < cb;
            const int ea = a.first * a.first + a.second * a.second;
            const int eb = b.first * b.first + b.second * b.second;
            if (ea != eb) return ea < eb;
            return a < b;
        });
        cand.resize(n);
        return ContextWindow(std::move(cand));
    }

    std::size_t size() const { return taps_.size(); }
    const std::vector<Offset>& taps() const { return taps_; }

private:
    std::vector<Offset> taps_;
};

/// Neighbour values at (i, j) for a row-major h x w grid; out-of-bounds reads 0.
template <class T>
void gather_context(std::span<const T> grid, std::size_t h, std::size_t w, std::size_t i, std::size_t j,
                    const ContextWindow& window, std::span<double> out) {
    const auto& taps = window.taps();
    for (std::size_t k = 0; k < taps.size(); ++k) {
        const long r = static_cast<long>(i) + taps[k].first;
        const long c = static_cast<long>(j) + taps[k].second;
        if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w))
            out[k] = 0.0;
        else
            out[k] = static_cast<double>(grid[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)]);
    }
}

template <class T>
std::vector<double> gather_context(std::span<const T> grid, std::size_t h, std::size_t w, std::size_t i,
                                   std::size_t j, const ContextWindow& window) {
    std::vector<double> out(window.size());
    gather_context(grid, h, w, i, j, window, std::span<double>(out));
    return out;
}

// MED predictor ---------------------------------------------------------------

/// a = left, b = top, c = top-left.
template <class T>
T med_predict(T a, T b, T c) {
    const T mn = std::min(a, b);
    const T mx = std::max(a, b);
    if (c >= mx) return mn;
    if (c <= mn) return mx;
    return a + b - c;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Differentiable MED: blends the three cases with sigmoid gates of temperature t.
inline double med_predict_soft(double a, double b, double c, double t) {
    if (!(t > 0.0)) throw ContractError("med_predict_soft: temperature must be > 0");
    const double mn = std::min(a, b), mx = std::max(a, b);
    const double s_max = sigmoid((c - mx) / t);
    const double s_min = sigmoid((mn - c) / t);
    return mn * s_max + mx * s_min + (a + b - c) * (1.0 - s_max - s_min);
}

/// Gradient of med_predict_soft with respect to (a, b, c).
inline std::array<double, 3> med_predict_soft_grad(double a, double b, double c, double t) {
    const bool a_is_min = a <= b;
    const double mn = a_is_min ? a : b, mx = a_is_min ? b : a;
    const double u = (c - mx) / t, v = (mn - c) / t;
    const double s_max = sigmoid(u), s_min = sigmoid(v);
    const double ds_max = s_max * (1.0 - s_max) / t;
    const double ds_min = s_min * (1.0 - s_min) / t;
    const double q = a + b - c;
    const double rest = 1.0 - s_max - s_min;
    const double d_mn = s_max + rest + (mx - q) * ds_min;
    const double d_mx = s_min + rest - (mn - q) * ds_max;
    const double d_c = -rest + (mn - q) * ds_max - (mx - q) * ds_min;
    return a_is_min ? std::array<double, 3>{d_mn, d_mx, d_c} : std::array<double, 3>{d_mx, d_mn, d_c};
}

/// Soft MED over rows of a [P x 3] (left, top, top-left) matrix -> [P].
inline diff::Var med_soft(diff::Graph& g, diff::Var ctx3, double t) {
    const diff::Tensor& cv = g.value(ctx3);
    if (cv.rank() != 2 || cv.shape[1] != 3) throw ContractError("med_soft: expected [P,3] context");
    const std::size_t rows = cv.shape[0];
    diff::Tensor out({rows});
    for (std::size_t p = 0; p < rows; ++p) out[p] = med_predict_soft(cv[3 * p], cv[3 * p + 1], cv[3 * p + 2], t);
    return g.record(diff::OpKind::MedSoft, {ctx3}, std::move(out), [ctx3, rows, t](diff::Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& c = gr.value(ctx3.id).data;
        diff::Tensor& gc = gr.grad_buffer(ctx3.id);
        for (std::size_t p = 0; p < rows; ++p) {
            const auto d = med_predict_soft_grad(c[3 * p], c[3 * p + 1], c[3 * p + 2], t);
            for (int k = 0; k < 3; ++k) gc[3 * p + k] += go[p] * d[k];
        }
    });
}

/// Hard MED forward; backward follows the selected linear branch.
inline diff::Var med_hard_ste(diff::Graph& g, diff::Var ctx3) {
    const diff::Tensor& cv = g.value(ctx3);
    if (cv.rank() != 2 || cv.shape[1] != 3) throw ContractError("med_hard_ste: expected [P,3] context");
    const std::size_t rows = cv.shape[0];
    diff::Tensor out({rows});
    std::vector<std::array<double, 3>> jac(rows);
    for (std::size_t p = 0; p < rows; ++p) {
        const double a = cv[3 * p], b = cv[3 * p + 1], c = cv[3 * p + 2];
        out[p] = med_predict(a, b, c);
        const double mx = std::max(a, b), mn = std::min(a, b);
        if (c >= mx)
            jac[p] = a <= b ? std::array<double, 3>{1, 0, 0} : std::array<double, 3>{0, 1, 0};
        else if (c <= mn)
            jac[p] = a <= b ? std::array<double, 3>{0, 1, 0} : std::array<double, 3>{1, 0, 0};
        else
            jac[p] = {1, 1, -1};
    }
    return g.record(diff::OpKind::MedHardSte, {ctx3}, std::move(out),
                    [ctx3, jac = std::move(jac)](diff::Graph& gr, std::size_t self) {
                        const auto& go = gr.grad_of(self).data;
                        diff::Tensor& gc = gr.grad_buffer(ctx3.id);
                        for (std::size_t p = 0; p < jac.size(); ++p)
                            for (int k = 0; k < 3; ++k) gc[3 * p + k] += go[p] * jac[p][k];
                    });
}

// Parameter containers --------------------------------------------------------

/// Latent context model: residual MLP mapping N neighbours (+ conditioning) to (mu, sigma).
struct LatentContextModel {
    std::size_t n = 16;           // context taps
    bool use_hyperprior = true;   // co-located hyperprior sample as extra input
    bool use_layer_index = true;  // normalized layer index as extra input
    diff::Tensor w1, b1, w2, b2, w3, b3;

    LatentContextModel() = default;
    LatentContextModel(std::size_t taps, bool hyperprior, bool layer_index)
        : n(taps), use_hyperprior(hyperprior), use_layer_index(layer_index) {
        w1 = diff::Tensor({n, inputs()});
        b1 = diff::Tensor({n});
        w2 = diff::Tensor({n, n});
        b2 = diff::Tensor({n});
        w3 = diff::Tensor({2, n});
        b3 = diff::Tensor({2});
    }

    std::size_t conditioning() const { return (use_hyperprior ? 1 : 0) + (use_layer_index ? 1 : 0); }
    std::size_t inputs() const { return n + conditioning(); }

    std::vector<diff::Tensor*> tensors() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
    std::vector<const diff::Tensor*> tensors() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

/// Hyperprior entropy model. With the learned part enabled it is a 3->3
/// residual layer followed by a 3->2 layer (20 parameters); otherwise a single
/// signaled log-scale is used for every position.
struct HyperpriorContextModel {
    bool use_med = true;
    bool use_cphi = true;
    diff::Tensor w1, b1, w2, b2;  // learned part
    diff::Tensor log_sigma;       // used when use_cphi is false

    HyperpriorContextModel() : HyperpriorContextModel(true, true) {}
    HyperpriorContextModel(bool med, bool cphi) : use_med(med), use_cphi(cphi) {
        if (use_cphi) {
            w1 = diff::Tensor({3, 3});
            b1 = diff::Tensor({3});
            w2 = diff::Tensor({2, 3});
            b2 = diff::Tensor({2});
        } else {
            log_sigma = diff::Tensor({1});
        }
    }

    std::vector<diff::Tensor*> tensors() {
        if (use_cphi) return {&w1, &b1, &w2, &b2};
        return {&log_sigma};
    }
    std::vector<const diff::Tensor*> tensors() const {
        if (use_cphi) return {&w1, &b1, &w2, &b2};
        return {&log_sigma};
    }
};

template <class Model>
std::size_t parameter_count(const Model& m) {
    std::size_t total = 0;
    for (const diff::Tensor* t : m.tensors()) total += t->size();
    return total;
}

// Inference (shared by the encoder's final pass and the decoder) -------------

/// Scratch buffers for latent_params, reused across positions.
struct LatentScratch {
    std::vector<double> input, h1, h2;
};

/// (mu, sigma) for one latent element. `context` holds N neighbour values.
inline entropy::LaplaceParams cxi_forward(std::span<const double> context, double s_r, double lbar,
                                          const LatentContextModel& m, LatentScratch& scratch) {
    const std::size_t n = m.n;
    if (context.size() != n) throw ContractError("cxi_forward: context size mismatch");
    scratch.input.assign(context.begin(), context.end());
    if (m.use_hyperprior) scratch.input.push_back(s_r);
    if (m.use_layer_index) scratch.input.push_back(lbar);
    scratch.h1.resize(n);
    scratch.h2.resize(n);
    diff::kernel::dense(scratch.input, 1, m.inputs(), m.w1.data, m.b1.data, n, scratch.h1);
    for (std::size_t i = 0; i < n; ++i) scratch.h1[i] = std::max(0.0, scratch.h1[i] + context[i]);
    diff::kernel::dense(scratch.h1, 1, n, m.w2.data, m.b2.data, n, scratch.h2);
    for (std::size_t i = 0; i < n; ++i) scratch.h2[i] = std::max(0.0, scratch.h2[i] + scratch.h1[i]);
    double out[2];
    diff::kernel::dense(scratch.h2, 1, n, m.w3.data, m.b3.data, 2, std::span<double>(out, 2));
    return {out[0], entropy::sigma_from_raw(out[1])};
}

inline entropy::LaplaceParams cxi_forward(std::span<const double> context, double s_r, double lbar,
                                          const LatentContextModel& m) {
    LatentScratch scratch;
    return cxi_forward(context, s_r, lbar, m, scratch);
}

struct CphiOutput {
    double s_tilde = 0.0;  // learned correction added to the MED prediction
    double sigma = 1.0;
};

/// Learned part of the hyperprior model on the (left, top, top-left) triple.
inline CphiOutput cphi_forward(std::span<const double> ctx3, const HyperpriorContextModel& m) {
    if (ctx3.size() != 3) throw ContractError("cphi_forward: expected 3 context values");
    if (!m.use_cphi) return {0.0, entropy::sigma_from_raw(m.log_sigma[0])};
    double h[3];
    diff::kernel::dense(ctx3, 1, 3, m.w1.data, m.b1.data, 3, std::span<double>(h, 3));
    for (int i = 0; i < 3; ++i) h[i] = std::max(0.0, h[i] + ctx3[static_cast<std::size_t>(i)]);
    double out[2];
    diff::kernel::dense(std::span<const double>(h, 3), 1, 3, m.w2.data, m.b2.data, 2, std::span<double>(out, 2));
    return {out[0], entropy::sigma_from_raw(out[1])};
}

/// Full hyperprior distribution: mu = learned correction + MED prediction.
inline entropy::LaplaceParams hyperprior_params(std::span<const double> ctx3, const HyperpriorContextModel& m) {
    const CphiOutput c = cphi_forward(ctx3, m);
    const double med = m.use_med ? med_predict(ctx3[0], ctx3[1], ctx3[2]) : 0.0;
    return {c.s_tilde + med, c.sigma};
}

// Graph builders (training) ---------------------------------------------------

struct LatentModelVars {
    diff::Var w1, b1, w2, b2, w3, b3;
};

struct HyperpriorModelVars {
    diff::Var w1, b1, w2, b2, log_sigma;
};

struct DistributionVars {
    diff::Var mu;
    diff::Var sigma;
};

inline diff::Var sigma_from_raw(diff::Graph& g, diff::Var raw) {
    return diff::clamp(g, diff::exp(g, raw), entropy::kSigmaMin, entropy::kSigmaMax);
}

/// Batched latent model: `input` is [P x (N + conditioning)] with the N context
/// columns first.
inline DistributionVars cxi_graph(diff::Graph& g, diff::Var input, const LatentContextModel& m,
                                  const LatentModelVars& v) {
    const diff::Var ctx = m.conditioning() == 0 ? input : diff::slice_cols(g, input, 0, m.n);
    const diff::Var h1 = diff::relu(g, diff::add(g, diff::dense(g, input, v.w1, v.b1), ctx));
    const diff::Var h2 = diff::relu(g, diff::add(g, diff::dense(g, h1, v.w2, v.b2), h1));
    const diff::Var out = diff::dense(g, h2, v.w3, v.b3);
    return {diff::slice_cols(g, out, 0, 1), sigma_from_raw(g, diff::slice_cols(g, out, 1, 2))};
}

/// Batched hyperprior model on a [P x 3] context. `soft_med_t` > 0 selects the
/// soft MED with that temperature; otherwise the hard MED with branch gradients.
inline DistributionVars hyperprior_graph(diff::Graph& g, diff::Var ctx3, const HyperpriorContextModel& m,
                                         const HyperpriorModelVars& v, double soft_med_t) {
    const std::size_t rows = g.value(ctx3).shape[0];
    diff::Var mu, sigma;
    if (m.use_cphi) {
        const diff::Var h = diff::relu(g, diff::add(g, diff::dense(g, ctx3, v.w1, v.b1), ctx3));
        const diff::Var out = diff::dense(g, h, v.w2, v.b2);
        mu = diff::slice_cols(g, out, 0, 1);
        sigma = sigma_from_raw(g, diff::slice_cols(g, out, 1, 2));
    } else {
        mu = g.constant(diff::Tensor({rows}, 0.0));
        // Broadcast the single log-scale to every row through a [P x 1] dense layer.
        const diff::Var ones = g.constant(diff::Tensor({rows, 1}, 1.0));
        const diff::Var zero_bias = g.constant(diff::Tensor({1}, 0.0));
        const diff::Var w = diff::reshape(g, v.log_sigma, {1, 1});
        sigma = sigma_from_raw(g, diff::reshape(g, diff::dense(g, ones, w, zero_bias), {rows}));
    }
    if (m.use_med) {
        const diff::Var med = soft_med_t > 0.0 ? med_soft(g, ctx3, soft_med_t) : med_hard_ste(g, ctx3);
        mu = diff::add(g, mu, med);
    }
    return {mu, sigma};
}

}  // namespace lance::ctx
