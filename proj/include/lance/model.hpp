#pragma once

// Codec geometry, the four parameter sets, and the inference steps shared by
// the encoder's final pass and the decoder.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lance/bitstream.hpp"
#include "lance/config.hpp"
#include "lance/context.hpp"
#include "lance/entropy_model.hpp"
#include "lance/expgolomb.hpp"
#include "lance/pyramid.hpp"

namespace lance {

/// Everything needed to lay out grids and networks; recoverable from the header.
struct CodecShape {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t layers = 7;
    std::size_t hyperprior_downscale = 4;
    std::size_t context_taps = 16;
    std::size_t synth_channels = 48;
    Ablation ablation;
    int precision = entropy::kDefaultPrecision;

    static CodecShape from_config(std::size_t h, std::size_t w, const EncodeConfig& c) {
        CodecShape s;
        s.height = h;
        s.width = w;
        s.layers = c.layers;
        s.hyperprior_downscale = c.hyperprior_downscale;
        s.context_taps = c.op.context_taps;
        s.synth_channels = c.op.synth_channels;
        s.ablation = c.ablation;
        s.precision = c.precision;
        return s;
    }

    static CodecShape from_header(const coder::BitstreamHeader& h) {
        namespace f = coder::flags;
        CodecShape s;
        s.height = h.height;
        s.width = h.width;
        s.layers = h.layers;
        s.hyperprior_downscale = h.hyperprior_downscale;
        s.context_taps = h.context_taps;
        s.synth_channels = h.synth_channels;
        s.ablation.use_hyperprior = h.has(f::kHyperprior);
        s.ablation.use_layer_index = h.has(f::kLayerIndex);
        s.ablation.resample = h.has(f::kAreaResample) ? pyr::ResampleMode::Area : pyr::ResampleMode::Bicubic;
        s.ablation.med = h.has(f::kMed);
        s.ablation.cphi = h.has(f::kCphi);
        s.precision = h.precision;
        return s;
    }

    void validate() const {
        if (height == 0 || width == 0) throw ContractError("codec shape: empty image");
        if (height > (1u << 16) || width > (1u << 16)) throw ContractError("codec shape: image larger than 65536");
        if (layers < 1 || layers > 16) throw ContractError("codec shape: layers must be in [1, 16]");
        if (hyperprior_downscale > 16) throw ContractError("codec shape: hyperprior downscale out of range");
        if (context_taps != 3 && context_taps != 5 && context_taps != 8 && context_taps != 16)
            throw ContractError("codec shape: context taps must be 3, 5, 8 or 16");
        if (synth_channels < 1) throw ContractError("codec shape: synthesis channels must be >= 1");
        if (precision < 12 || precision > 16) throw ContractError("codec shape: precision must be in [12, 16]");
    }

    std::vector<pyr::GridShape> latent_shapes() const { return pyr::layer_shapes(height, width, layers); }
    pyr::GridShape hyperprior_grid() const { return pyr::hyperprior_shape(height, width, hyperprior_downscale); }
    std::size_t pixels() const { return height * width; }

    std::uint8_t flag_bits(bool checksums) const {
        namespace f = coder::flags;
        std::uint8_t b = 0;
        if (ablation.use_hyperprior) b |= f::kHyperprior;
        if (ablation.use_layer_index) b |= f::kLayerIndex;
        if (ablation.resample == pyr::ResampleMode::Area) b |= f::kAreaResample;
        if (ablation.med) b |= f::kMed;
        if (ablation.cphi) b |= f::kCphi;
        if (checksums) b |= f::kChecksums;
        return b;
    }
};

/// Normalized position of layer l in the pyramid, in [0, 1].
inline double layer_position(std::size_t l, std::size_t layers) {
    return layers > 1 ? static_cast<double>(l) / static_cast<double>(layers - 1) : 0.0;
}

enum class ParamSet : std::size_t { Phi = 0, Xi = 1, Upsampler = 2, Synthesis = 3 };

inline constexpr std::array<ParamSet, 4> kAllParamSets = {ParamSet::Phi, ParamSet::Xi, ParamSet::Upsampler,
                                                          ParamSet::Synthesis};

inline std::string to_string(ParamSet s) {
    switch (s) {
        case ParamSet::Phi: return "phi";
        case ParamSet::Xi: return "xi";
        case ParamSet::Upsampler: return "upsampler";
        case ParamSet::Synthesis: return "synthesis";
    }
    return "unknown";
}

inline coder::SectionKind section_kind(ParamSet s) {
    switch (s) {
        case ParamSet::Phi: return coder::SectionKind::ParamsPhi;
        case ParamSet::Xi: return coder::SectionKind::ParamsXi;
        case ParamSet::Upsampler: return coder::SectionKind::ParamsUpsampler;
        case ParamSet::Synthesis: return coder::SectionKind::ParamsSynthesis;
    }
    return coder::SectionKind::ParamsPhi;
}

/// The signaled networks: hyperprior model phi, latent model xi, upsampler,
/// synthesis. phi is carried only when the hyperprior is enabled.
struct ModelParams {
    bool has_hyperprior = true;
    ctx::HyperpriorContextModel phi;
    ctx::LatentContextModel xi;
    pyr::UpsamplerParams ups;
    pyr::SynthesisParams synth;

    ModelParams() = default;
    explicit ModelParams(const CodecShape& s)
        : has_hyperprior(s.ablation.use_hyperprior),
          phi(s.ablation.med, s.ablation.cphi),
          xi(s.context_taps, s.ablation.use_hyperprior, s.ablation.use_layer_index),
          ups(s.layers),
          synth(s.layers, s.synth_channels) {}

    std::vector<diff::Tensor*> tensors(ParamSet set) {
        switch (set) {
            case ParamSet::Phi: return has_hyperprior ? phi.tensors() : std::vector<diff::Tensor*>{};
            case ParamSet::Xi: return xi.tensors();
            case ParamSet::Upsampler: return ups.tensors();
            case ParamSet::Synthesis: return synth.tensors();
        }
        return {};
    }
    std::vector<const diff::Tensor*> tensors(ParamSet set) const {
        std::vector<const diff::Tensor*> out;
        for (diff::Tensor* t : const_cast<ModelParams*>(this)->tensors(set)) out.push_back(t);
        return out;
    }

    std::size_t count(ParamSet set) const {
        std::size_t n = 0;
        for (const diff::Tensor* t : tensors(set)) n += t->size();
        return n;
    }

    std::vector<double> flatten(ParamSet set) const {
        std::vector<double> out;
        for (const diff::Tensor* t : tensors(set)) out.insert(out.end(), t->data.begin(), t->data.end());
        return out;
    }

    void assign(ParamSet set, std::span<const double> values) {
        if (values.size() != count(set)) throw ContractError("ModelParams::assign: size mismatch for " + to_string(set));
        std::size_t k = 0;
        for (diff::Tensor* t : tensors(set))
            for (double& v : t->data) v = values[k++];
    }

    /// Weights and biases uniform in +-1/sqrt(fan_in); upsampler keeps its bicubic taps.
    template <class Rng>
    void init_random(Rng& rng) {
        auto fill = [&rng](diff::Tensor& t, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (double& v : t.data) v = u(rng);
        };
        if (phi.use_cphi) {
            fill(phi.w1, 3);
            fill(phi.b1, 3);
            fill(phi.w2, 3);
            fill(phi.b2, 3);
        } else {
            phi.log_sigma[0] = 0.0;
        }
        fill(xi.w1, xi.inputs());
        fill(xi.b1, xi.inputs());
        fill(xi.w2, xi.n);
        fill(xi.b2, xi.n);
        fill(xi.w3, xi.n);
        fill(xi.b3, xi.n);
        fill(synth.k1, synth.layers);
        fill(synth.b1, synth.layers);
        fill(synth.k2, synth.channels);
        fill(synth.b2, synth.channels);
        fill(synth.k3, 27);
        fill(synth.b3, 27);
        fill(synth.k4, 27);
        fill(synth.b4, 27);
    }
};

// Shared inference ------------------------------------------------------------

/// Hyperprior distribution at (i, j) from the causal part of `grid`.
inline entropy::LaplaceParams hyperprior_distribution(std::span<const std::int32_t> grid, pyr::GridShape shape,
                                                      std::size_t i, std::size_t j,
                                                      const ctx::ContextWindow& med_window,
                                                      const ctx::HyperpriorContextModel& phi) {
    double c[3];
    ctx::gather_context(grid, shape.h, shape.w, i, j, med_window, std::span<double>(c, 3));
    return ctx::hyperprior_params(std::span<const double>(c, 3), phi);
}

/// Latent distribution at (i, j) of a layer from the causal part of `grid`.
inline entropy::LaplaceParams latent_distribution(std::span<const std::int32_t> grid, pyr::GridShape shape,
                                                  std::size_t i, std::size_t j, const ctx::ContextWindow& window,
                                                  double s_r, double lbar, const ctx::LatentContextModel& xi,
                                                  std::vector<double>& context, ctx::LatentScratch& scratch) {
    context.resize(window.size());
    ctx::gather_context(grid, shape.h, shape.w, i, j, window, std::span<double>(context));
    return ctx::cxi_forward(context, s_r, lbar, xi, scratch);
}

/// Hyperprior resampled to every latent layer, or all zeros when disabled.
inline std::vector<std::vector<double>> resampled_hyperprior(const CodecShape& s,
                                                             std::span<const std::int32_t> s_hat) {
    const auto shapes = s.latent_shapes();
    if (!s.ablation.use_hyperprior) {
        std::vector<std::vector<double>> zeros;
        for (const auto& sh : shapes) zeros.emplace_back(sh.size(), 0.0);
        return zeros;
    }
    return pyr::resample_hyperprior(s_hat, s.hyperprior_grid(), shapes, s.ablation.resample);
}

/// Decoded latents -> image planes [3 x H x W] in [0, 1].
inline diff::Tensor reconstruct_planes(const CodecShape& s, const pyr::LatentPyramid& y, const ModelParams& p) {
    if (y.shapes != s.latent_shapes()) throw ContractError("reconstruct: pyramid does not match the codec shape");
    std::vector<std::vector<double>> layers;
    for (const auto& l : y.layers) layers.emplace_back(l.begin(), l.end());
    const diff::Tensor u = pyr::upsample_pyramid(layers, y.shapes, p.ups);
    return pyr::synthesize(u, p.synth);
}

/// Quantized parameter sets as signaled: integers plus step exponent.
struct SignaledParams {
    std::array<coder::QuantizedParams, 4> sets;

    coder::QuantizedParams& operator[](ParamSet s) { return sets[static_cast<std::size_t>(s)]; }
    const coder::QuantizedParams& operator[](ParamSet s) const { return sets[static_cast<std::size_t>(s)]; }
    bool operator==(const SignaledParams& o) const {
        for (std::size_t i = 0; i < sets.size(); ++i)
            if (sets[i].integers != o.sets[i].integers || sets[i].step_exponent != o.sets[i].step_exponent) return false;
        return true;
    }
};

/// Builds a model whose weights are the dequantized signaled values.
inline ModelParams dequantized_model(const CodecShape& s, const SignaledParams& q) {
    ModelParams m(s);
    for (ParamSet set : kAllParamSets) {
        const auto values = q[set].values();
        m.assign(set, values);
    }
    return m;
}

}  // namespace lance
