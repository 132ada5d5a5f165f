#pragma once

// Per-image overfitting: joint optimization of latents, hyperprior and the
// four networks under D + lambda * R, then parameter quantization and
// bitstream emission with a decode-verify pass.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include "lance/bitstream.hpp"
#include "lance/config.hpp"
#include "lance/decoder.hpp"
#include "lance/image.hpp"
#include "lance/model.hpp"
#include "lance/quantize.hpp"
#include "lance/range_coder.hpp"

namespace lance {

struct LossTerms {
    double loss = 0.0;
    double rate_y_bits = 0.0;
    double rate_s_bits = 0.0;
    double mse = 0.0;
};

enum class QuantMode { NoisySoft, Soft, Ste };

/// Quantizer relaxation for one forward pass. med_temperature 0 selects the hard MED.
struct Relaxation {
    QuantMode mode = QuantMode::Ste;
    double temperature = 0.1;
    double noise_std = 0.0;
    double med_temperature = 0.0;
};

inline Relaxation relaxation_for(const EncodeConfig& cfg, std::uint32_t iter) {
    if (!cfg.schedule.in_phase1(iter)) return {QuantMode::Ste, cfg.schedule.temperature_end, 0.0, 0.0};
    return {QuantMode::NoisySoft, cfg.schedule.temperature(iter), cfg.schedule.noise_std(iter), cfg.med_temperature(iter)};
}

inline double learning_rate(const EncodeConfig& cfg, std::uint32_t iter) {
    if (!cfg.schedule.in_phase1(iter)) return cfg.adam.lr_phase2;
    const double p = cfg.schedule.progress(iter);
    return cfg.adam.lr_end + 0.5 * (cfg.adam.lr_start - cfg.adam.lr_end) * (1.0 + std::cos(std::numbers::pi * p));
}

struct TrainState {
    CodecShape shape;
    std::vector<diff::Tensor> latents;  // continuous y, one [h x w] grid per layer
    diff::Tensor hyperprior;            // continuous s; empty when disabled
    ModelParams params;
    std::vector<diff::Tensor> adam_m;
    std::vector<diff::Tensor> adam_v;
    std::uint32_t iteration = 0;
    bool phase2 = false;
    std::mt19937_64 noise_rng;
    std::vector<double> loss_log;

    /// Trainable tensors in a fixed order: latents, hyperprior, phi, xi, upsampler, synthesis.
    std::vector<diff::Tensor*> trainables() {
        std::vector<diff::Tensor*> out;
        for (auto& y : latents) out.push_back(&y);
        if (shape.ablation.use_hyperprior) out.push_back(&hyperprior);
        for (ParamSet set : kAllParamSets)
            for (diff::Tensor* t : params.tensors(set)) out.push_back(t);
        return out;
    }
    std::vector<const diff::Tensor*> trainables() const {
        std::vector<const diff::Tensor*> out;
        for (diff::Tensor* t : const_cast<TrainState*>(this)->trainables()) out.push_back(t);
        return out;
    }
};

inline TrainState init_state(std::size_t height, std::size_t width, const EncodeConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.shape = CodecShape::from_config(height, width, cfg);
    st.shape.validate();
    for (const auto& s : st.shape.latent_shapes()) st.latents.emplace_back(diff::Shape{s.h, s.w}, 0.0);
    if (cfg.ablation.use_hyperprior) {
        const auto hs = st.shape.hyperprior_grid();
        st.hyperprior = diff::Tensor({hs.h, hs.w}, 0.0);
    }
    st.params = ModelParams(st.shape);
    std::mt19937_64 init_rng(cfg.seed);
    st.params.init_random(init_rng);
    st.noise_rng.seed(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    for (const diff::Tensor* t : st.trainables()) {
        st.adam_m.emplace_back(t->shape, 0.0);
        st.adam_v.emplace_back(t->shape, 0.0);
    }
    return st;
}

/// Graph handles of one forward pass.
struct ForwardGraph {
    diff::Var loss, mse, rate_y, rate_s;
    std::vector<diff::Var> trainables;  // same order as TrainState::trainables
};

namespace detail {

template <class Rng>
diff::Var relaxed_quantize(diff::Graph& g, diff::Var x, const Relaxation& rx, Rng& rng) {
    switch (rx.mode) {
        case QuantMode::NoisySoft: return quant::noisy_softround(g, x, rx.temperature, rx.noise_std, rng);
        case QuantMode::Soft: return quant::softround(g, x, rx.temperature);
        case QuantMode::Ste: return quant::ste_round(g, x);
    }
    return x;
}

}  // namespace detail

/// Records the full training forward pass on `g`.
template <class Rng>
ForwardGraph build_forward(diff::Graph& g, const TrainState& st, const diff::Tensor& target, const EncodeConfig& cfg,
                           const Relaxation& rx, Rng& rng) {
    const CodecShape& s = st.shape;
    const auto shapes = s.latent_shapes();
    ForwardGraph fg;
    for (const diff::Tensor* t : st.trainables()) fg.trainables.push_back(g.leaf(*t));

    std::size_t k = 0;
    std::vector<diff::Var> y_leaf(fg.trainables.begin(), fg.trainables.begin() + static_cast<long>(s.layers));
    k = s.layers;
    diff::Var s_leaf{};
    if (s.ablation.use_hyperprior) s_leaf = fg.trainables[k++];
    ctx::HyperpriorModelVars phi_v{};
    if (s.ablation.use_hyperprior) {
        if (s.ablation.cphi) {
            phi_v.w1 = fg.trainables[k++];
            phi_v.b1 = fg.trainables[k++];
            phi_v.w2 = fg.trainables[k++];
            phi_v.b2 = fg.trainables[k++];
        } else {
            phi_v.log_sigma = fg.trainables[k++];
        }
    }
    ctx::LatentModelVars xi_v{};
    xi_v.w1 = fg.trainables[k++];
    xi_v.b1 = fg.trainables[k++];
    xi_v.w2 = fg.trainables[k++];
    xi_v.b2 = fg.trainables[k++];
    xi_v.w3 = fg.trainables[k++];
    xi_v.b3 = fg.trainables[k++];
    std::vector<diff::Var> stages;
    for (std::size_t i = 0; i + 1 < s.layers; ++i) stages.push_back(fg.trainables[k++]);
    pyr::SynthesisVars sv{};
    sv.k1 = fg.trainables[k++];
    sv.b1 = fg.trainables[k++];
    sv.k2 = fg.trainables[k++];
    sv.b2 = fg.trainables[k++];
    sv.k3 = fg.trainables[k++];
    sv.b3 = fg.trainables[k++];
    sv.k4 = fg.trainables[k++];
    sv.b4 = fg.trainables[k++];

    // Hyperprior and its rate.
    diff::Var s_q{};
    fg.rate_s = g.constant(diff::Tensor({1}, 0.0));
    if (s.ablation.use_hyperprior) {
        s_q = detail::relaxed_quantize(g, s_leaf, rx, rng);
        const auto window3 = ctx::ContextWindow::make(3);
        const diff::Var ctx3 = diff::gather_context(g, s_q, window3.taps());
        const auto dist = ctx::hyperprior_graph(g, ctx3, st.params.phi, phi_v, rx.med_temperature);
        fg.rate_s = entropy::laplace_rate(g, s_q, dist.mu, dist.sigma, s.precision);
    }

    // Latents and their rate.
    const auto window = ctx::ContextWindow::make(s.context_taps);
    std::vector<diff::Var> y_q;
    diff::Var rate_y{};
    for (std::size_t l = 0; l < s.layers; ++l) {
        const diff::Var yq = detail::relaxed_quantize(g, y_leaf[l], rx, rng);
        y_q.push_back(yq);
        const std::size_t p = shapes[l].size();
        std::vector<diff::Var> cols{diff::gather_context(g, yq, window.taps())};
        if (s.ablation.use_hyperprior) {
            const pyr::Resampler2d r(s.hyperprior_grid(), shapes[l], s.ablation.resample);
            cols.push_back(diff::reshape(g, diff::linear_resample(g, s_q, r.rows, r.cols), {p}));
        }
        if (s.ablation.use_layer_index) cols.push_back(g.constant(diff::Tensor({p}, layer_position(l, s.layers))));
        const diff::Var input = cols.size() == 1 ? cols[0] : diff::concat_cols(g, cols);
        const auto dist = ctx::cxi_graph(g, input, st.params.xi, xi_v);
        const diff::Var r = entropy::laplace_rate(g, yq, dist.mu, dist.sigma, s.precision);
        rate_y = l == 0 ? r : diff::add(g, rate_y, r);
    }
    fg.rate_y = rate_y;

    // Reconstruction.
    const diff::Var u = pyr::upsample_graph(g, y_q, shapes, stages);
    const diff::Var xhat = pyr::synthesis_graph(g, u, sv);
    fg.mse = diff::mse(g, xhat, target);
    const double rate_scale = cfg.lambda / static_cast<double>(s.pixels());
    fg.loss = diff::add(g, fg.mse, diff::scale(g, diff::add(g, fg.rate_y, fg.rate_s), rate_scale));
    return fg;
}

inline LossTerms read_terms(const diff::Graph& g, const ForwardGraph& fg) {
    return {g.value(fg.loss)[0], g.value(fg.rate_y)[0], g.value(fg.rate_s)[0], g.value(fg.mse)[0]};
}

/// Loss of the current state under an explicit relaxation.
inline LossTerms evaluate_loss(const TrainState& st, const Image& img, const EncodeConfig& cfg, const Relaxation& rx) {
    diff::Graph g;
    std::mt19937_64 rng = st.noise_rng;
    const ForwardGraph fg = build_forward(g, st, to_planes(img), cfg, rx, rng);
    return read_terms(g, fg);
}

/// Loss under the relaxation that the next training step would use.
inline LossTerms loss(const TrainState& st, const Image& img, const EncodeConfig& cfg) {
    return evaluate_loss(st, img, cfg, relaxation_for(cfg, st.iteration));
}

/// One optimizer step. Throws DivergenceError on a non-finite loss or gradient.
inline LossTerms train_step(TrainState& st, const diff::Tensor& target, const EncodeConfig& cfg) {
    const std::uint32_t iter = st.iteration;
    const Relaxation rx = relaxation_for(cfg, iter);
    diff::Graph g;
    const ForwardGraph fg = build_forward(g, st, target, cfg, rx, st.noise_rng);
    const LossTerms terms = read_terms(g, fg);
    auto diverged = [&](const std::string& what) {
        std::ostringstream os;
        os << "encode diverged at iteration " << iter << ": " << what << " (loss " << terms.loss << ", mse "
           << terms.mse << ", rate_y " << terms.rate_y_bits << ", rate_s " << terms.rate_s_bits << ")";
        throw DivergenceError(os.str());
    };
    if (!std::isfinite(terms.loss)) diverged("non-finite loss");
    g.backward(fg.loss);

    const double lr = learning_rate(cfg, iter);
    const double b1 = cfg.adam.beta1, b2 = cfg.adam.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(iter) + 1.0);
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(iter) + 1.0);
    auto params = st.trainables();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const diff::Tensor& grad = g.grad(fg.trainables[i]);
        if (!grad.all_finite()) diverged("non-finite gradient");
        diff::Tensor& p = *params[i];
        diff::Tensor& m = st.adam_m[i];
        diff::Tensor& v = st.adam_v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam.eps);
        }
    }
    st.params.ups.normalize();
    st.loss_log.push_back(terms.loss);
    ++st.iteration;
    st.phase2 = !cfg.schedule.in_phase1(st.iteration);
    return terms;
}

using ProgressFn = std::function<void(std::uint32_t iteration, const LossTerms&)>;

/// Runs both training phases from a fresh state.
inline TrainState train(const Image& img, const EncodeConfig& cfg, const ProgressFn& progress = {}) {
    TrainState st = init_state(img.height, img.width, cfg);
    const diff::Tensor target = to_planes(img);
    const std::uint32_t total = cfg.schedule.total_iters();
    while (st.iteration < total) {
        const LossTerms t = train_step(st, target, cfg);
        if (progress) progress(st.iteration - 1, t);
    }
    return st;
}

// Finalization -----------------------------------------------------------------

struct SectionStats {
    coder::SectionKind kind = coder::SectionKind::Latent;
    std::uint8_t layer = 0;
    std::size_t symbols = 0;
    std::size_t bytes = 0;
    double estimated_bits = 0.0;  // sum of -log2 of the floored Laplace pmf
    double table_bits = 0.0;      // sum of -log2 of the quantized table probability

    double real_bits() const { return 8.0 * static_cast<double>(bytes); }
};

struct EncodeResult {
    std::vector<std::uint8_t> bytes;
    coder::Bitstream bitstream;
    CodecShape shape;
    SignaledParams params;
    pyr::SpatialHyperprior s_hat;
    pyr::LatentPyramid y_hat;
    Image reconstruction;
    std::vector<SectionStats> sections;
    double psnr = 0.0;

    std::size_t total_bits() const { return 8 * bytes.size(); }
    double bpp() const { return static_cast<double>(total_bits()) / static_cast<double>(shape.pixels()); }
};

namespace detail {

inline std::vector<std::int32_t> hard_quantize(const diff::Tensor& t) {
    std::vector<std::int32_t> out;
    out.reserve(t.size());
    for (double v : t.data)
        out.push_back(static_cast<std::int32_t>(std::clamp<std::int64_t>(quant::round(v), -kMaxSymbolMagnitude, kMaxSymbolMagnitude)));
    return out;
}

inline std::int32_t support_of(const std::vector<std::int32_t>& grid) {
    std::int32_t a = 0;
    for (auto v : grid) a = std::max(a, std::abs(v));
    return a;
}

inline double hyperprior_bits(const std::vector<std::int32_t>& s_hat, pyr::GridShape shape,
                              const ctx::HyperpriorContextModel& phi, int precision) {
    const auto window = ctx::ContextWindow::make(3);
    const double floor_p = entropy::probability_floor(precision);
    double bits = 0.0;
    for (std::size_t i = 0; i < shape.h; ++i)
        for (std::size_t j = 0; j < shape.w; ++j) {
            const auto p = hyperprior_distribution(s_hat, shape, i, j, window, phi);
            bits -= std::log2(std::max(entropy::laplace_pmf(s_hat[i * shape.w + j], p), floor_p));
        }
    return bits;
}

inline double latent_bits(const pyr::LatentPyramid& y, const std::vector<std::vector<double>>& s_r,
                          const CodecShape& s, const ctx::LatentContextModel& xi) {
    const auto window = ctx::ContextWindow::make(s.context_taps);
    const double floor_p = entropy::probability_floor(s.precision);
    std::vector<double> context;
    ctx::LatentScratch scratch;
    double bits = 0.0;
    for (std::size_t l = 0; l < s.layers; ++l) {
        const auto gs = y.shapes[l];
        const double lbar = layer_position(l, s.layers);
        for (std::size_t i = 0; i < gs.h; ++i)
            for (std::size_t j = 0; j < gs.w; ++j) {
                const std::size_t idx = i * gs.w + j;
                const auto p = latent_distribution(y.layers[l], gs, i, j, window, s_r[l][idx], lbar, xi, context, scratch);
                bits -= std::log2(std::max(entropy::laplace_pmf(y.layers[l][idx], p), floor_p));
            }
    }
    return bits;
}

inline double distortion(const CodecShape& s, const pyr::LatentPyramid& y, const ModelParams& m,
                         const diff::Tensor& target) {
    const diff::Tensor x = reconstruct_planes(s, y, m);
    double se = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - target[i]) * (x[i] - target[i]);
    return se / static_cast<double>(x.size());
}

}  // namespace detail

/// Range-codes the hyperprior grid in raster order.
inline std::vector<std::uint8_t> encode_hyperprior(const std::vector<std::int32_t>& grid, pyr::GridShape shape,
                                                   std::int32_t support, const ctx::HyperpriorContextModel& phi,
                                                   int precision, SectionStats& stats) {
    const auto window = ctx::ContextWindow::make(3);
    const double floor_p = entropy::probability_floor(precision);
    coder::RangeEncoder enc;
    for (std::size_t i = 0; i < shape.h; ++i)
        for (std::size_t j = 0; j < shape.w; ++j) {
            const std::int32_t v = grid[i * shape.w + j];
            const auto p = hyperprior_distribution(grid, shape, i, j, window, phi);
            const auto table = entropy::build_cdf(p, -support, support, precision);
            enc.encode(v, table);
            stats.estimated_bits -= std::log2(std::max(entropy::laplace_pmf(v, p), floor_p));
            stats.table_bits += table.bits(v);
            ++stats.symbols;
        }
    auto bytes = enc.finish();
    stats.bytes = bytes.size();
    return bytes;
}

/// Range-codes latent layer `l` as an independent section.
inline std::vector<std::uint8_t> encode_layer(const std::vector<std::int32_t>& grid, std::size_t l,
                                              const CodecShape& shape, const ctx::LatentContextModel& xi,
                                              std::span<const double> s_r, std::int32_t support, SectionStats& stats) {
    const pyr::GridShape gs = shape.latent_shapes().at(l);
    const auto window = ctx::ContextWindow::make(shape.context_taps);
    const double lbar = layer_position(l, shape.layers);
    const double floor_p = entropy::probability_floor(shape.precision);
    std::vector<double> context;
    ctx::LatentScratch scratch;
    coder::RangeEncoder enc;
    for (std::size_t i = 0; i < gs.h; ++i)
        for (std::size_t j = 0; j < gs.w; ++j) {
            const std::size_t idx = i * gs.w + j;
            const std::int32_t v = grid[idx];
            const auto p = latent_distribution(grid, gs, i, j, window, s_r[idx], lbar, xi, context, scratch);
            const auto table = entropy::build_cdf(p, -support, support, shape.precision);
            enc.encode(v, table);
            stats.estimated_bits -= std::log2(std::max(entropy::laplace_pmf(v, p), floor_p));
            stats.table_bits += table.bits(v);
            ++stats.symbols;
        }
    auto bytes = enc.finish();
    stats.bytes = bytes.size();
    return bytes;
}

/// Chooses parameter steps, codes every section, and verifies the stream by decoding it.
inline EncodeResult finalize(const TrainState& st, const Image& img, const EncodeConfig& cfg) {
    const CodecShape& s = st.shape;
    const diff::Tensor target = to_planes(img);
    const double rate_scale = cfg.lambda / static_cast<double>(s.pixels());
    EncodeResult r;
    r.shape = s;

    // (1) hard quantization of latents and hyperprior
    r.y_hat.shapes = s.latent_shapes();
    for (const auto& y : st.latents) r.y_hat.layers.push_back(detail::hard_quantize(y));
    r.s_hat.shape = s.hyperprior_grid();
    r.s_hat.d = s.hyperprior_downscale;
    if (s.ablation.use_hyperprior) r.s_hat.grid = detail::hard_quantize(st.hyperprior);
    const auto s_r = resampled_hyperprior(s, r.s_hat.grid);

    // (2) per-set step search; sets already decided stay quantized for later ones
    ModelParams work = st.params;
    for (ParamSet set : kAllParamSets) {
        const auto weights = st.params.flatten(set);
        if (weights.empty()) {
            r.params[set] = coder::quantize_params(weights, kMinStepExponent);
            continue;
        }
        double best_cost = std::numeric_limits<double>::infinity();
        for (int k = kMinStepExponent; k <= kMaxStepExponent; ++k) {
            const coder::QuantizedParams q = coder::quantize_params(weights, k);
            ModelParams trial = work;
            trial.assign(set, q.values());
            double term = 0.0;
            switch (set) {
                case ParamSet::Phi: term = rate_scale * detail::hyperprior_bits(r.s_hat.grid, r.s_hat.shape, trial.phi, s.precision); break;
                case ParamSet::Xi: term = rate_scale * detail::latent_bits(r.y_hat, s_r, s, trial.xi); break;
                case ParamSet::Upsampler:
                case ParamSet::Synthesis: term = detail::distortion(s, r.y_hat, trial, target); break;
            }
            const double cost = term + rate_scale * static_cast<double>(q.coded_bits());
            if (cost < best_cost) {
                best_cost = cost;
                r.params[set] = q;
            }
        }
        work.assign(set, r.params[set].values());
    }
    // (3) from here on only the dequantized networks are used
    const ModelParams model = dequantized_model(s, r.params);

    // (4) sections: parameters, hyperprior, latent layers
    coder::Bitstream& bs = r.bitstream;
    coder::BitstreamHeader& h = bs.header;
    h.height = static_cast<std::uint32_t>(s.height);
    h.width = static_cast<std::uint32_t>(s.width);
    h.layers = static_cast<std::uint8_t>(s.layers);
    h.hyperprior_downscale = static_cast<std::uint8_t>(s.hyperprior_downscale);
    h.context_taps = static_cast<std::uint8_t>(s.context_taps);
    h.synth_channels = static_cast<std::uint8_t>(s.synth_channels);
    h.flag_bits = s.flag_bits(cfg.checksums);
    h.precision = static_cast<std::uint8_t>(s.precision);
    for (ParamSet set : kAllParamSets) {
        auto& info = h.params[static_cast<std::size_t>(set)];
        info.count = static_cast<std::uint32_t>(r.params[set].integers.size());
        info.step_exponent = static_cast<std::uint8_t>(r.params[set].step_exponent);
        if (info.count == 0) continue;
        coder::Section sec{section_kind(set), 0, coder::serialize_params(r.params[set])};
        SectionStats stats;
        stats.kind = sec.kind;
        stats.symbols = info.count;
        stats.bytes = sec.payload.size();
        stats.estimated_bits = stats.table_bits = static_cast<double>(r.params[set].coded_bits());
        r.sections.push_back(stats);
        bs.sections.push_back(std::move(sec));
    }
    if (s.ablation.use_hyperprior) {
        const std::int32_t a_s = detail::support_of(r.s_hat.grid);
        h.hyperprior_support = static_cast<std::uint16_t>(a_s);
        SectionStats stats;
        stats.kind = coder::SectionKind::Hyperprior;
        auto payload = encode_hyperprior(r.s_hat.grid, r.s_hat.shape, a_s, model.phi, s.precision, stats);
        r.sections.push_back(stats);
        bs.sections.push_back({coder::SectionKind::Hyperprior, 0, std::move(payload)});
    }
    for (std::size_t l = 0; l < s.layers; ++l) {
        const std::int32_t a = detail::support_of(r.y_hat.layers[l]);
        h.latent_support.push_back(static_cast<std::uint16_t>(a));
        SectionStats stats;
        stats.kind = coder::SectionKind::Latent;
        stats.layer = static_cast<std::uint8_t>(l);
        auto payload = encode_layer(r.y_hat.layers[l], l, s, model.xi, s_r[l], a, stats);
        r.sections.push_back(stats);
        bs.sections.push_back({coder::SectionKind::Latent, static_cast<std::uint8_t>(l), std::move(payload)});
    }
    // (5) container
    r.bytes = coder::write_bitstream(bs);
    r.reconstruction = from_planes(reconstruct_planes(s, r.y_hat, model));
    r.psnr = psnr(img, r.reconstruction);

    // decode-verify
    const DecodeResult d = decode(std::span<const std::uint8_t>(r.bytes), DecodeOptions{1, {}});
    if (!(d.y_hat == r.y_hat) || !(d.s_hat == r.s_hat) || !(d.params == r.params) || !(d.image == r.reconstruction))
        throw EncodeError("encoder self-check: decoded stream does not match the encoder state");
    return r;
}

/// train + finalize.
inline EncodeResult encode(const Image& img, const EncodeConfig& cfg, const ProgressFn& progress = {}) {
    const TrainState st = train(img, cfg, progress);
    return finalize(st, img, cfg);
}

}  // namespace lance
