#pragma once

// Decoding pipeline: parameters, hyperprior, resampling, latent layers,
// upsampling, synthesis. Latent layers are independent sections and can be
// decoded in any order or concurrently.

#include <cstdlib>
#include <exception>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "lance/bitstream.hpp"
#include "lance/expgolomb.hpp"
#include "lance/image.hpp"
#include "lance/model.hpp"
#include "lance/range_coder.hpp"

namespace lance {

struct DecodeResult {
    CodecShape shape;
    SignaledParams params;
    ModelParams model;
    pyr::SpatialHyperprior s_hat;
    pyr::LatentPyramid y_hat;
    Image image;
};

struct DecodeOptions {
    /// Worker threads for latent layers; 0 reads LANCE_THREADS (default 1).
    std::size_t threads = 0;
    /// Order in which layers are scheduled; empty means 0..L-1.
    std::vector<std::size_t> layer_order;
};

inline std::size_t thread_count_from_env() {
    if (const char* v = std::getenv("LANCE_THREADS")) {
        const long n = std::strtol(v, nullptr, 10);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    return 1;
}

/// Decodes the hyperprior grid in raster order.
inline std::vector<std::int32_t> decode_hyperprior(std::span<const std::uint8_t> payload, pyr::GridShape shape,
                                                   std::int32_t support, const ctx::HyperpriorContextModel& phi,
                                                   int precision) {
    const auto window = ctx::ContextWindow::make(3);
    std::vector<std::int32_t> grid(shape.size(), 0);
    coder::RangeDecoder dec(payload);
    for (std::size_t i = 0; i < shape.h; ++i)
        for (std::size_t j = 0; j < shape.w; ++j) {
            const auto p = hyperprior_distribution(grid, shape, i, j, window, phi);
            const auto table = entropy::build_cdf(p, -support, support, precision);
            grid[i * shape.w + j] = static_cast<std::int32_t>(dec.decode(table));
        }
    if (!dec.exhausted()) throw DecodeError("hyperprior section: trailing bytes");
    return grid;
}

/// Decodes latent layer `l` from its own section. Needs only the latent
/// model and the hyperprior resampled to this layer.
inline std::vector<std::int32_t> decode_layer(std::span<const std::uint8_t> payload, std::size_t l,
                                              const CodecShape& shape, const ctx::LatentContextModel& xi,
                                              std::span<const double> s_r, std::int32_t support) {
    const pyr::GridShape gs = shape.latent_shapes().at(l);
    if (s_r.size() != gs.size()) throw ContractError("decode_layer: hyperprior size mismatch");
    const auto window = ctx::ContextWindow::make(shape.context_taps);
    const double lbar = layer_position(l, shape.layers);
    std::vector<std::int32_t> grid(gs.size(), 0);
    std::vector<double> context;
    ctx::LatentScratch scratch;
    coder::RangeDecoder dec(payload);
    for (std::size_t i = 0; i < gs.h; ++i)
        for (std::size_t j = 0; j < gs.w; ++j) {
            const std::size_t idx = i * gs.w + j;
            const auto p = latent_distribution(grid, gs, i, j, window, s_r[idx], lbar, xi, context, scratch);
            const auto table = entropy::build_cdf(p, -support, support, shape.precision);
            grid[idx] = static_cast<std::int32_t>(dec.decode(table));
        }
    if (!dec.exhausted()) throw DecodeError("latent section: trailing bytes");
    return grid;
}

namespace detail {

inline const coder::Section& require_section(const coder::Bitstream& bs, coder::SectionKind kind,
                                             std::uint8_t layer = 0) {
    const coder::Section* s = bs.find(kind, layer);
    if (!s) throw DecodeError("bitstream: missing section " + coder::to_string(kind));
    return *s;
}

}  // namespace detail

/// Decodes a parsed bitstream.
inline DecodeResult decode(const coder::Bitstream& bs, const DecodeOptions& opts = {}) {
    DecodeResult r;
    r.shape = CodecShape::from_header(bs.header);
    try {
        r.shape.validate();
    } catch (const ContractError& e) {
        throw DecodeError(std::string("bitstream: invalid header: ") + e.what());
    }
    const CodecShape& s = r.shape;
    const auto shapes = s.latent_shapes();
    for (auto a : bs.header.latent_support)
        if (a > kMaxSymbolMagnitude) throw DecodeError("bitstream: latent support too large");
    if (bs.header.hyperprior_support > kMaxSymbolMagnitude) throw DecodeError("bitstream: hyperprior support too large");

    // 1. parameters
    ModelParams shell(s);
    for (ParamSet set : kAllParamSets) {
        const auto& info = bs.header.params[static_cast<std::size_t>(set)];
        if (info.count != shell.count(set)) throw DecodeError("bitstream: parameter count mismatch for " + to_string(set));
        if (info.step_exponent > 30) throw DecodeError("bitstream: parameter step out of range");
        if (info.count == 0) {
            r.params[set].step_exponent = info.step_exponent;
            continue;
        }
        const auto& sec = detail::require_section(bs, section_kind(set));
        r.params[set] = coder::deserialize_params(sec.payload, info.count, info.step_exponent);
    }
    r.model = dequantized_model(s, r.params);

    // 2. hyperprior
    r.s_hat.shape = s.hyperprior_grid();
    r.s_hat.d = s.hyperprior_downscale;
    if (s.ablation.use_hyperprior) {
        const auto& sec = detail::require_section(bs, coder::SectionKind::Hyperprior);
        r.s_hat.grid = decode_hyperprior(sec.payload, r.s_hat.shape, bs.header.hyperprior_support, r.model.phi,
                                         s.precision);
    }

    // 3. resampling, 4. latent layers
    const auto s_r = resampled_hyperprior(s, r.s_hat.grid);
    r.y_hat.shapes = shapes;
    r.y_hat.layers.assign(s.layers, {});
    std::vector<std::size_t> order = opts.layer_order;
    if (order.empty())
        for (std::size_t l = 0; l < s.layers; ++l) order.push_back(l);
    {
        std::vector<bool> seen(s.layers, false);
        if (order.size() != s.layers) throw ContractError("decode: layer order must list every layer once");
        for (auto l : order) {
            if (l >= s.layers || seen[l]) throw ContractError("decode: layer order must list every layer once");
            seen[l] = true;
        }
    }
    std::vector<const coder::Section*> sections(s.layers);
    for (std::size_t l = 0; l < s.layers; ++l)
        sections[l] = &detail::require_section(bs, coder::SectionKind::Latent, static_cast<std::uint8_t>(l));

    auto run = [&](std::size_t l) {
        r.y_hat.layers[l] = decode_layer(sections[l]->payload, l, s, r.model.xi, s_r[l],
                                         static_cast<std::int32_t>(bs.header.latent_support[l]));
    };
    const std::size_t threads = std::min(opts.threads == 0 ? thread_count_from_env() : opts.threads, order.size());
    if (threads <= 1) {
        for (auto l : order) run(l);
    } else {
        std::mutex m;
        std::size_t next = 0;
        std::exception_ptr error;
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t l;
                    {
                        std::lock_guard<std::mutex> lock(m);
                        if (next >= order.size() || error) return;
                        l = order[next++];
                    }
                    try {
                        run(l);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(m);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
        if (error) std::rethrow_exception(error);
    }

    // 5. upsampling, 6. synthesis
    r.image = from_planes(reconstruct_planes(s, r.y_hat, r.model));
    return r;
}

inline DecodeResult decode(std::span<const std::uint8_t> bytes, const DecodeOptions& opts = {}) {
    return decode(coder::read_bitstream(bytes), opts);
}

}  // namespace lance
