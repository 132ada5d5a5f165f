// Encodes an image, decodes the bytes and reports rate and quality.
//
//   sample_roundtrip [image.ppm] [iterations]    (pass "" for the built-in image)
//
// Without an image a 64x64 gradient with a textured patch is used.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "lance/lance.hpp"

namespace {

lance::Image synthetic(std::size_t w, std::size_t h) {
    lance::Image img(w, h);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 60.0 + 120.0 * static_cast<double>(i + j) / static_cast<double>(w + h) + 20.0 * c;
                if (i > h / 2 && j > w / 2) v += 40.0 * std::sin(1.1 * j + c) * std::cos(0.9 * i);
                img.at(i, j, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
    return img;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        const lance::Image img = argc > 1 && argv[1][0] != '\0' ? lance::read_pnm(argv[1]) : synthetic(64, 64);
        lance::EncodeConfig cfg;
        cfg.op = lance::OperationPoint::lop();
        cfg.lambda = 0.001;
        cfg.set_iterations(argc > 2 ? static_cast<std::uint32_t>(std::strtoul(argv[2], nullptr, 10)) : 500);

        const lance::EncodeResult enc = lance::encode(img, cfg);
        const lance::DecodeResult dec = lance::decode(std::span<const std::uint8_t>(enc.bytes));

        std::printf("%zux%zu: %zu bytes, %.4f bpp, %.2f dB\n", img.width, img.height, enc.bytes.size(), enc.bpp(),
                    lance::psnr(img, dec.image));
        std::printf("decoded image %s the encoder's reconstruction\n",
                    dec.image == enc.reconstruction ? "matches" : "DIFFERS FROM");
        for (const auto& e : lance::eval::report_breakdown(std::span<const std::uint8_t>(enc.bytes)))
            std::printf("  %-11s %6zu bytes %6.2f%%\n", e.name.c_str(), e.bytes, e.share);
        return dec.image == enc.reconstruction ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "sample_roundtrip: %s\n", e.what());
        return 1;
    }
}
