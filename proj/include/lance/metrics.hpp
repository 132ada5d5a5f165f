#pragma once

// Evaluation helpers: Bjontegaard delta rate with Akima interpolation,
// decoder complexity in MAC/pixel, bitstream composition and hyperprior maps.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lance/bitstream.hpp"
#include "lance/config.hpp"
#include "lance/decoder.hpp"
#include "lance/image.hpp"
#include "lance/model.hpp"

namespace lance::eval {

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// BD-rate -----------------------------------------------------------------------

struct RDPoint {
    double rate = 0.0;     // bits per pixel
    double quality = 0.0;  // PSNR in dB
};

using RDCurve = std::vector<RDPoint>;

/// Akima spline through (x, y) with the same end-slope extension as SciPy's
/// Akima1DInterpolator. x must be strictly increasing, at least 2 points.
class AkimaSpline {
public:
    AkimaSpline(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
        const std::size_t n = x_.size();
        if (n < 2 || y_.size() != n) throw EvalError("akima: need at least two points");
        for (std::size_t i = 0; i + 1 < n; ++i)
            if (!(x_[i + 1] > x_[i])) throw EvalError("akima: abscissae must be strictly increasing");
        // slopes with two extrapolated values on each side: m[k + 2] is the slope of segment k
        std::vector<double> m(n + 3);
        for (std::size_t i = 0; i + 1 < n; ++i) m[i + 2] = (y_[i + 1] - y_[i]) / (x_[i + 1] - x_[i]);
        if (n == 2) {
            m[1] = m[0] = m[3] = m[4] = m[2];
        } else {
            m[1] = 2.0 * m[2] - m[3];
            m[0] = 3.0 * m[2] - 2.0 * m[3];
            m[n + 1] = 2.0 * m[n] - m[n - 1];
            m[n + 2] = 3.0 * m[n] - 2.0 * m[n - 1];
        }
        t_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double w1 = std::abs(m[i + 3] - m[i + 2]);
            const double w2 = std::abs(m[i + 1] - m[i]);
            const double den = w1 + w2;
            t_[i] = den > 1e-9 * std::max(1.0, std::abs(m[i + 1]) + std::abs(m[i + 2]))
                        ? (w1 * m[i + 1] + w2 * m[i + 2]) / den
                        : 0.5 * (m[i + 1] + m[i + 2]);
        }
    }

    double operator()(double x) const {
        const std::size_t k = segment(x);
        const double s = x - x_[k];
        const auto c = coefficients(k);
        return c[0] + s * (c[1] + s * (c[2] + s * c[3]));
    }

    /// Exact integral of the spline over [a, b], both inside the data range.
    double integrate(double a, double b) const {
        if (a > b) return -integrate(b, a);
        double total = 0.0;
        for (std::size_t k = 0; k + 1 < x_.size(); ++k) {
            const double lo = std::max(a, x_[k]), hi = std::min(b, x_[k + 1]);
            if (hi <= lo) continue;
            const auto c = coefficients(k);
            auto prim = [&](double s) { return s * (c[0] + s * (c[1] / 2.0 + s * (c[2] / 3.0 + s * c[3] / 4.0))); };
            total += prim(hi - x_[k]) - prim(lo - x_[k]);
        }
        return total;
    }

    const std::vector<double>& knots() const { return x_; }
    const std::vector<double>& derivatives() const { return t_; }

private:
    std::size_t segment(double x) const {
        const auto it = std::upper_bound(x_.begin(), x_.end(), x);
        std::size_t k = it == x_.begin() ? 0 : static_cast<std::size_t>(it - x_.begin()) - 1;
        return std::min(k, x_.size() - 2);
    }

    std::array<double, 4> coefficients(std::size_t k) const {
        const double h = x_[k + 1] - x_[k];
        const double m = (y_[k + 1] - y_[k]) / h;
        const double t0 = t_[k], t1 = t_[k + 1];
        return {y_[k], t0, (3.0 * m - 2.0 * t0 - t1) / h, (t0 + t1 - 2.0 * m) / (h * h)};
    }

    std::vector<double> x_, y_, t_;
};

namespace detail {

inline AkimaSpline log_rate_spline(RDCurve c) {
    if (c.size() < 4) throw EvalError("bd_rate: each curve needs at least 4 points");
    for (const auto& p : c)
        if (!(p.rate > 0.0) || !std::isfinite(p.quality)) throw EvalError("bd_rate: rates must be positive, PSNR finite");
    std::sort(c.begin(), c.end(), [](const RDPoint& a, const RDPoint& b) { return a.quality < b.quality; });
    std::vector<double> x, y;
    for (const auto& p : c) {
        x.push_back(p.quality);
        y.push_back(std::log10(p.rate));
    }
    return AkimaSpline(std::move(x), std::move(y));
}

}  // namespace detail

/// Average rate difference of `test` against `reference` at equal PSNR, in
/// percent. Negative means the test codec needs less rate.
inline double bd_rate(const RDCurve& reference, const RDCurve& test) {
    const AkimaSpline ref = detail::log_rate_spline(reference);
    const AkimaSpline tst = detail::log_rate_spline(test);
    const double lo = std::max(ref.knots().front(), tst.knots().front());
    const double hi = std::min(ref.knots().back(), tst.knots().back());
    if (!(hi > lo)) throw EvalError("bd_rate: PSNR ranges do not overlap");
    const double avg = (tst.integrate(lo, hi) - ref.integrate(lo, hi)) / (hi - lo);
    return (std::pow(10.0, avg) - 1.0) * 100.0;
}

/// Per-image mean of repeated (seeded) encodes.
inline RDPoint average(const std::vector<RDPoint>& runs) {
    if (runs.empty()) throw EvalError("average: no runs");
    RDPoint out;
    for (const auto& p : runs) {
        out.rate += p.rate;
        out.quality += p.quality;
    }
    out.rate /= static_cast<double>(runs.size());
    out.quality /= static_cast<double>(runs.size());
    return out;
}

// Complexity --------------------------------------------------------------------

struct ComplexityReport {
    double context_xi = 0.0;
    double upsampler = 0.0;
    double synthesis = 0.0;
    double context_phi = 0.0;
    double resampler = 0.0;

    double total() const { return context_xi + upsampler + synthesis + context_phi + resampler; }
};

/// Decoder multiply-accumulates per pixel for an operation point and image size.
inline ComplexityReport mac_per_pixel(const OperationPoint& op, std::size_t height, std::size_t width,
                                      std::size_t layers = 7, std::size_t hyperprior_downscale = 4,
                                      const Ablation& ablation = Ablation{}) {
    if (height == 0 || width == 0) throw ContractError("mac_per_pixel: empty image");
    const double pixels = static_cast<double>(height * width);
    const auto shapes = pyr::layer_shapes(height, width, layers);
    double rho = 0.0;
    for (const auto& s : shapes) rho += static_cast<double>(s.size()) / pixels;

    const double n = static_cast<double>(op.context_taps);
    const double cond = (ablation.use_hyperprior ? 1.0 : 0.0) + (ablation.use_layer_index ? 1.0 : 0.0);
    ComplexityReport r;
    r.context_xi = (n * (n + cond) + n * n + 2.0 * n) * rho;
    r.upsampler = static_cast<double>(pyr::upsampler_macs(shapes)) / pixels;
    r.synthesis = static_cast<double>(layers * op.synth_channels + 3 * op.synth_channels + 81 + 81);
    if (ablation.use_hyperprior) {
        const auto hs = pyr::hyperprior_shape(height, width, hyperprior_downscale);
        if (ablation.cphi) r.context_phi = 15.0 * static_cast<double>(hs.size()) / pixels;
        std::size_t macs = 0;
        for (const auto& s : shapes) macs += pyr::Resampler2d(hs, s, ablation.resample).macs();
        r.resampler = static_cast<double>(macs) / pixels;
    }
    return r;
}

// Bitstream composition -----------------------------------------------------------

struct BreakdownEntry {
    std::string name;
    std::size_t bytes = 0;
    double share = 0.0;  // percent of the file
};

/// Byte shares of latents, xi, upsampler, synthesis, phi, hyperprior and header.
inline std::vector<BreakdownEntry> report_breakdown(std::span<const std::uint8_t> bytes) {
    const auto table = coder::section_table(bytes);
    std::map<std::string, std::size_t> by_name;
    const std::vector<std::string> order = {"latents", "xi", "upsampler", "synthesis", "phi", "hyperprior", "header"};
    for (const auto& n : order) by_name[n] = 0;
    std::size_t payload = 0;
    for (const auto& e : table) {
        std::string name;
        switch (e.kind) {
            case coder::SectionKind::Latent: name = "latents"; break;
            case coder::SectionKind::ParamsXi: name = "xi"; break;
            case coder::SectionKind::ParamsUpsampler: name = "upsampler"; break;
            case coder::SectionKind::ParamsSynthesis: name = "synthesis"; break;
            case coder::SectionKind::ParamsPhi: name = "phi"; break;
            case coder::SectionKind::Hyperprior: name = "hyperprior"; break;
        }
        by_name[name] += e.length;
        payload += e.length;
    }
    by_name["header"] = bytes.size() - payload;
    std::vector<BreakdownEntry> out;
    for (const auto& n : order)
        out.push_back({n, by_name[n], 100.0 * static_cast<double>(by_name[n]) / static_cast<double>(bytes.size())});
    return out;
}

// Hyperprior map ------------------------------------------------------------------

/// Decodes only the parameters needed for, and the grid of, the hyperprior.
inline pyr::SpatialHyperprior decode_hyperprior_only(std::span<const std::uint8_t> bytes) {
    const coder::Bitstream bs = coder::read_bitstream(bytes);
    const CodecShape s = CodecShape::from_header(bs.header);
    if (!s.ablation.use_hyperprior) throw EvalError("stream carries no spatial hyperprior");
    s.validate();
    ModelParams model(s);
    const auto& info = bs.header.params[static_cast<std::size_t>(ParamSet::Phi)];
    if (info.count != model.count(ParamSet::Phi)) throw DecodeError("bitstream: parameter count mismatch for phi");
    const coder::Section* sec = bs.find(coder::SectionKind::ParamsPhi);
    const coder::Section* hs = bs.find(coder::SectionKind::Hyperprior);
    if (!sec || !hs) throw DecodeError("bitstream: missing hyperprior sections");
    model.assign(ParamSet::Phi, coder::deserialize_params(sec->payload, info.count, info.step_exponent).values());
    pyr::SpatialHyperprior out;
    out.shape = s.hyperprior_grid();
    out.d = s.hyperprior_downscale;
    out.grid = decode_hyperprior(hs->payload, out.shape, bs.header.hyperprior_support, model.phi, s.precision);
    return out;
}

/// Min-max normalization to 8 bits; a constant grid maps to 128.
inline std::vector<std::uint8_t> normalize_map(const std::vector<std::int32_t>& grid) {
    std::vector<std::uint8_t> out(grid.size(), 128);
    if (grid.empty()) return out;
    const auto [mn, mx] = std::minmax_element(grid.begin(), grid.end());
    if (*mn == *mx) return out;
    const double range = static_cast<double>(*mx - *mn);
    for (std::size_t i = 0; i < grid.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::round(255.0 * static_cast<double>(grid[i] - *mn) / range));
    return out;
}

/// Writes the normalized hyperprior of a stream as a PGM image; returns the grid shape.
inline pyr::GridShape dump_hyperprior(std::span<const std::uint8_t> bytes, const std::string& out_path) {
    const pyr::SpatialHyperprior s = decode_hyperprior_only(bytes);
    write_pgm(out_path, s.shape.w, s.shape.h, normalize_map(s.grid));
    return s.shape;
}

}  // namespace lance::eval
