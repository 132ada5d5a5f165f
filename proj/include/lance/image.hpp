#pragma once

// 8-bit RGB images, binary PPM/PGM I/O and PSNR.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "lance/diffgraph.hpp"
#include "lance/errors.hpp"

namespace lance {

/// Interleaved 8-bit RGB.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

    std::uint8_t& at(std::size_t i, std::size_t j, std::size_t c) { return rgb[(i * width + j) * 3 + c]; }
    std::uint8_t at(std::size_t i, std::size_t j, std::size_t c) const { return rgb[(i * width + j) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

/// [3 x H x W] planes with samples scaled to [0, 1].
inline diff::Tensor to_planes(const Image& img) {
    diff::Tensor t({3, img.height, img.width});
    const std::size_t plane = img.width * img.height;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = img.rgb[p * 3 + c] / 255.0;
    return t;
}

/// Inverse of to_planes: clamps to [0, 1] and rounds to the nearest level.
inline Image from_planes(const diff::Tensor& t) {
    if (t.rank() != 3 || t.shape[0] != 3) throw ContractError("from_planes: expected [3, H, W]");
    Image img(t.shape[2], t.shape[1]);
    const std::size_t plane = img.width * img.height;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::round(std::clamp(t[c * plane + p], 0.0, 1.0) * 255.0));
    return img;
}

namespace detail {

inline std::size_t read_pnm_number(std::istream& in) {
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw ContractError("pnm: malformed header");
    std::size_t v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + static_cast<std::size_t>(ch - '0');
        if (v > (1u << 20)) throw ContractError("pnm: dimension too large");
        ch = in.get();
    }
    // exactly one whitespace byte separates the header from the raster
    return v;
}

}  // namespace detail

/// Reads binary PPM (P6) or PGM (P5, replicated to RGB), maxval 255.
inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("cannot open " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || (magic[1] != '6' && magic[1] != '5')) throw ContractError(path + ": not a binary PPM/PGM");
    const bool color = magic[1] == '6';
    const std::size_t w = detail::read_pnm_number(in);
    const std::size_t h = detail::read_pnm_number(in);
    const std::size_t maxval = detail::read_pnm_number(in);
    if (maxval != 255) throw ContractError(path + ": only maxval 255 is supported");
    if (w == 0 || h == 0) throw ContractError(path + ": empty image");
    Image img(w, h);
    if (color) {
        in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    } else {
        std::vector<std::uint8_t> gray(w * h);
        in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
        for (std::size_t p = 0; p < gray.size(); ++p) img.rgb[3 * p] = img.rgb[3 * p + 1] = img.rgb[3 * p + 2] = gray[p];
    }
    if (!in) throw ContractError(path + ": raster truncated");
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot write " + path);
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline void write_pgm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& gray) {
    if (gray.size() != width * height) throw ContractError("write_pgm: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot write " + path);
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

/// PSNR over all RGB samples; +infinity for identical images.
inline double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height) throw ContractError("psnr: dimension mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    const double mse = se / static_cast<double>(a.rgb.size());
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace lance
