#pragma once

// Latent pyramid geometry, the hyperprior resampler, the learned x2
// upsampling cascade and the synthesis network.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lance/diffgraph.hpp"
#include "lance/errors.hpp"

namespace lance::pyr {

struct GridShape {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t size() const { return h * w; }
    bool operator==(const GridShape&) const = default;
};

inline std::size_t ceil_div_pow2(std::size_t v, std::size_t e) { return (v + (std::size_t{1} << e) - 1) >> e; }

/// Shape of latent layer i for an h x w image: ceil(h / 2^i) x ceil(w / 2^i).
inline GridShape layer_shape(std::size_t h, std::size_t w, std::size_t i) {
    return {ceil_div_pow2(h, i), ceil_div_pow2(w, i)};
}

inline std::vector<GridShape> layer_shapes(std::size_t h, std::size_t w, std::size_t layers) {
    std::vector<GridShape> out;
    for (std::size_t i = 0; i < layers; ++i) out.push_back(layer_shape(h, w, i));
    return out;
}

inline GridShape hyperprior_shape(std::size_t h, std::size_t w, std::size_t d) { return layer_shape(h, w, d); }

/// Latent pyramid: one integer grid per layer, finest first.
struct LatentPyramid {
    std::vector<GridShape> shapes;
    std::vector<std::vector<std::int32_t>> layers;
    bool operator==(const LatentPyramid&) const = default;
};

struct SpatialHyperprior {
    GridShape shape;
    std::size_t d = 4;
    std::vector<std::int32_t> grid;
    bool operator==(const SpatialHyperprior&) const = default;
};

// Resampler ------------------------------------------------------------------

enum class ResampleMode { Bicubic, Area };

inline std::string to_string(ResampleMode m) { return m == ResampleMode::Bicubic ? "bicubic" : "area"; }

/// Cubic convolution kernel with a = -0.5.
inline double bicubic_kernel(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

namespace detail {

inline void add_tap(std::vector<diff::kernel::Contribution>& row, std::size_t index, double w) {
    for (auto& c : row)
        if (c.index == index) {
            c.weight += w;
            return;
        }
    row.push_back({index, w});
}

inline void normalize(std::vector<diff::kernel::Contribution>& row) {
    double s = 0.0;
    for (const auto& c : row) s += c.weight;
    for (auto& c : row) c.weight /= s;
    std::erase_if(row, [](const diff::kernel::Contribution& c) { return c.weight == 0.0; });
}

}  // namespace detail

/// 1-D polyphase resampling operator between sample grids of `in` and `out`
/// points with aligned pixel centres. Bicubic stretches the kernel by the
/// scale factor when downsampling; borders replicate the edge sample. Area
/// averages the input cells covered by each output cell.
inline diff::kernel::LinearOperator1d resample_operator(std::size_t in, std::size_t out, ResampleMode mode) {
    if (in == 0 || out == 0) throw ContractError("resample: empty axis");
    diff::kernel::LinearOperator1d op;
    op.in_size = in;
    op.out_size = out;
    op.rows.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const long last = static_cast<long>(in) - 1;
    for (std::size_t o = 0; o < out; ++o) {
        auto& row = op.rows[o];
        if (mode == ResampleMode::Bicubic) {
            const double center = (static_cast<double>(o) + 0.5) * scale - 0.5;
            const double stretch = std::max(1.0, scale);
            const double support = 2.0 * stretch;
            const long i0 = static_cast<long>(std::floor(center - support));
            const long i1 = static_cast<long>(std::ceil(center + support));
            for (long i = i0; i <= i1; ++i) {
                const double wv = bicubic_kernel((center - static_cast<double>(i)) / stretch);
                if (wv == 0.0) continue;
                detail::add_tap(row, static_cast<std::size_t>(std::clamp(i, 0L, last)), wv);
            }
        } else {
            const double a = static_cast<double>(o) * scale;
            const double b = a + scale;
            const long i0 = static_cast<long>(std::floor(a));
            const long i1 = std::min(static_cast<long>(std::ceil(b)) - 1, last);
            for (long i = i0; i <= i1; ++i) {
                const double overlap = std::min(b, static_cast<double>(i + 1)) - std::max(a, static_cast<double>(i));
                if (overlap > 0.0) detail::add_tap(row, static_cast<std::size_t>(i), overlap);
            }
        }
        detail::normalize(row);
    }
    return op;
}

/// Row and column operators for resampling a grid to `target`.
struct Resampler2d {
    diff::kernel::LinearOperator1d rows;
    diff::kernel::LinearOperator1d cols;
    bool identity = false;

    Resampler2d(GridShape from, GridShape target, ResampleMode mode)
        : rows(resample_operator(from.h, target.h, mode)),
          cols(resample_operator(from.w, target.w, mode)),
          identity(from == target) {}

    /// Multiply-accumulates of one application (horizontal pass, then vertical).
    std::size_t macs() const {
        if (identity) return 0;
        std::size_t horiz = 0, vert = 0;
        for (const auto& r : cols.rows) horiz += r.size();
        for (const auto& r : rows.rows) vert += r.size();
        return horiz * rows.in_size + vert * cols.out_size;
    }
};

/// Resamples the hyperprior grid to every target shape.
template <class T>
std::vector<std::vector<double>> resample_hyperprior(std::span<const T> grid, GridShape from,
                                                     const std::vector<GridShape>& targets, ResampleMode mode) {
    if (grid.size() != from.size()) throw ContractError("resample_hyperprior: grid size mismatch");
    std::vector<double> src(grid.begin(), grid.end());
    std::vector<std::vector<double>> out;
    std::vector<double> scratch;
    for (const GridShape& t : targets) {
        const Resampler2d r(from, t, mode);
        std::vector<double> layer(t.size());
        if (r.identity)
            layer = src;
        else
            diff::kernel::apply_separable(src, r.rows, r.cols, layer, scratch);
        out.push_back(std::move(layer));
    }
    return out;
}

// Learned upsampler ---------------------------------------------------------

/// Half-kernel of the x2 cubic-convolution upsampler at distances 1/4, 3/4, 5/4, 7/4.
inline std::array<double, 4> bicubic_upsampler_taps() {
    return {bicubic_kernel(0.25), bicubic_kernel(0.75), bicubic_kernel(1.25), bicubic_kernel(1.75)};
}

/// One symmetric 8-tap separable filter per x2 stage; stage k (1-based) maps
/// level k to level k - 1. Only the four distinct taps are stored.
struct UpsamplerParams {
    std::vector<diff::Tensor> stages;

    UpsamplerParams() = default;
    explicit UpsamplerParams(std::size_t layers) {
        const auto taps = bicubic_upsampler_taps();
        for (std::size_t k = 1; k < layers; ++k) stages.emplace_back(diff::Shape{4}, std::vector<double>(taps.begin(), taps.end()));
    }

    /// Rescales each stage so its taps sum to one (both output phases then have unit DC gain).
    void normalize() {
        for (diff::Tensor& s : stages) {
            const double sum = s[0] + s[1] + s[2] + s[3];
            if (std::abs(sum) < 1e-6) continue;
            for (double& v : s.data) v /= sum;
        }
    }

    std::vector<diff::Tensor*> tensors() {
        std::vector<diff::Tensor*> out;
        for (auto& s : stages) out.push_back(&s);
        return out;
    }
    std::vector<const diff::Tensor*> tensors() const {
        std::vector<const diff::Tensor*> out;
        for (const auto& s : stages) out.push_back(&s);
        return out;
    }
};

/// Upsamples every layer to full resolution and stacks them: [L x H x W].
/// Layer l passes through stages l, l-1, ..., 1, cropping to the layer shapes.
inline diff::Tensor upsample_pyramid(const std::vector<std::vector<double>>& layers,
                                     const std::vector<GridShape>& shapes, const UpsamplerParams& params) {
    if (layers.size() != shapes.size() || layers.empty()) throw ContractError("upsample_pyramid: layer count mismatch");
    if (params.stages.size() + 1 < layers.size()) throw ContractError("upsample_pyramid: not enough upsampler stages");
    const GridShape full = shapes[0];
    diff::Tensor out({layers.size(), full.h, full.w});
    std::vector<double> cur, next, scratch;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].size() != shapes[l].size()) throw ContractError("upsample_pyramid: layer size mismatch");
        cur = layers[l];
        for (std::size_t k = l; k >= 1; --k) {
            const GridShape from = shapes[k], to = shapes[k - 1];
            next.assign(to.size(), 0.0);
            diff::kernel::upsample2x(cur, from.h, from.w, params.stages[k - 1].data, to.h, to.w, next, scratch);
            cur.swap(next);
        }
        if (cur.size() != full.size()) throw std::logic_error("upsample_pyramid: shape drift");
        std::copy(cur.begin(), cur.end(), out.data.begin() + static_cast<long>(l * full.size()));
    }
    return out;
}

/// Multiply-accumulates of the cascade for the given layer shapes.
inline std::size_t upsampler_macs(const std::vector<GridShape>& shapes) {
    std::size_t macs = 0;
    for (std::size_t l = 1; l < shapes.size(); ++l)
        for (std::size_t k = l; k >= 1; --k) {
            const GridShape from = shapes[k], to = shapes[k - 1];
            macs += 4 * from.h * to.w + 4 * to.h * to.w;
        }
    return macs;
}

// Synthesis ------------------------------------------------------------------

/// 1x1 (L -> C), ReLU, 1x1 (C -> 3), then two 3x3 (3 -> 3) residual blocks:
/// x + relu(conv3(x)) followed by x + conv4(x).
struct SynthesisParams {
    std::size_t layers = 7;
    std::size_t channels = 16;
    diff::Tensor k1, b1, k2, b2, k3, b3, k4, b4;

    SynthesisParams() = default;
    SynthesisParams(std::size_t l, std::size_t c) : layers(l), channels(c) {
        k1 = diff::Tensor({c, l, 1, 1});
        b1 = diff::Tensor({c});
        k2 = diff::Tensor({3, c, 1, 1});
        b2 = diff::Tensor({3});
        k3 = diff::Tensor({3, 3, 3, 3});
        b3 = diff::Tensor({3});
        k4 = diff::Tensor({3, 3, 3, 3});
        b4 = diff::Tensor({3});
    }

    std::vector<diff::Tensor*> tensors() { return {&k1, &b1, &k2, &b2, &k3, &b3, &k4, &b4}; }
    std::vector<const diff::Tensor*> tensors() const { return {&k1, &b1, &k2, &b2, &k3, &b3, &k4, &b4}; }

    /// MACs per pixel: L*C + 3*C + 81 + 81.
    std::size_t macs_per_pixel() const { return layers * channels + 3 * channels + 81 + 81; }
};

/// Synthesis without the final clamp.
inline diff::Tensor synthesize_unclamped(const diff::Tensor& u, const SynthesisParams& p) {
    if (u.rank() != 3 || u.shape[0] != p.layers) throw ContractError("synthesize: channel count mismatch");
    const std::size_t h = u.shape[1], w = u.shape[2], plane = h * w, c = p.channels;
    diff::Tensor a({c, h, w}), b({3, h, w}), r({3, h, w});
    diff::kernel::conv2d(u.data, p.layers, h, w, p.k1.data, c, 1, p.b1.data, a.data);
    for (double& v : a.data) v = std::max(0.0, v);
    diff::kernel::conv2d(a.data, c, h, w, p.k2.data, 3, 1, p.b2.data, b.data);
    diff::kernel::conv2d(b.data, 3, h, w, p.k3.data, 3, 3, p.b3.data, r.data);
    for (std::size_t i = 0; i < 3 * plane; ++i) b[i] += std::max(0.0, r[i]);
    diff::kernel::conv2d(b.data, 3, h, w, p.k4.data, 3, 3, p.b4.data, r.data);
    for (std::size_t i = 0; i < 3 * plane; ++i) b[i] += r[i];
    return b;
}

/// Reconstructed image [3 x H x W] in [0, 1].
inline diff::Tensor synthesize(const diff::Tensor& u, const SynthesisParams& p) {
    diff::Tensor out = synthesize_unclamped(u, p);
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// Graph builders (training) ---------------------------------------------------

struct SynthesisVars {
    diff::Var k1, b1, k2, b2, k3, b3, k4, b4;
};

/// Differentiable cascade: returns the stacked [L x H x W] tensor.
inline diff::Var upsample_graph(diff::Graph& g, const std::vector<diff::Var>& layers,
                                const std::vector<GridShape>& shapes, const std::vector<diff::Var>& stages) {
    std::vector<diff::Var> full;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        diff::Var cur = layers[l];
        for (std::size_t k = l; k >= 1; --k) cur = diff::upsample2x(g, cur, stages[k - 1], shapes[k - 1].h, shapes[k - 1].w);
        full.push_back(cur);
    }
    return diff::concat(g, full, {layers.size(), shapes[0].h, shapes[0].w});
}

/// Differentiable synthesis (unclamped).
inline diff::Var synthesis_graph(diff::Graph& g, diff::Var u, const SynthesisVars& v) {
    const diff::Var a = diff::relu(g, diff::conv2d(g, u, v.k1, v.b1));
    const diff::Var b = diff::conv2d(g, a, v.k2, v.b2);
    const diff::Var c = diff::add(g, b, diff::relu(g, diff::conv2d(g, b, v.k3, v.b3)));
    return diff::add(g, c, diff::conv2d(g, c, v.k4, v.b4));
}

}  // namespace lance::pyr
