// lance: encode, decode and evaluate images with the LANCE codec.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 decode error,
// 3 encode divergence.

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "lance/lance.hpp"

using namespace lance;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kDecode = 2, kDivergence = 3 };

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::span<const std::uint8_t> view(const std::vector<std::uint8_t>& v) { return {v.data(), v.size()}; }

json psnr_json(double p) { return std::isinf(p) ? json("inf") : json(p); }

/// Encoder flags: stored as strings and applied through the config-file
/// parser so both routes accept the same values.
struct EncodeFlags {
    std::string config_file;
    std::map<std::string, std::string> values;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config_file, "key = value config file (flags override it)")
            ->check(CLI::ExistingFile);
        const std::vector<std::pair<std::string, std::string>> keys = {
            {"lambda", "rate-distortion trade-off"},
            {"operation_point", "hop, mop or lop"},
            {"context_taps", "latent context size N (3, 5, 8, 16)"},
            {"synth_channels", "synthesis hidden channels"},
            {"layers", "latent layers L"},
            {"hyperprior_downscale", "hyperprior downscale exponent d"},
            {"iterations", "total training iterations"},
            {"seed", "RNG seed"},
            {"lr", "initial learning rate"},
            {"lr_end", "learning rate at the end of phase 1"},
            {"lr_phase2", "phase 2 learning rate"},
            {"temperature_start", "soft-rounding temperature at start"},
            {"temperature_end", "soft-rounding temperature at end of phase 1"},
            {"noise_start", "quantization noise at start"},
            {"noise_end", "quantization noise at end of phase 1"},
            {"med_temperature_start", "soft MED temperature at start"},
            {"med_temperature_end", "soft MED temperature at end of phase 1"},
            {"use_hyperprior", "on/off"},
            {"use_layer_index", "on/off"},
            {"med", "on/off"},
            {"cphi", "on/off"},
            {"resample", "bicubic or area"},
            {"precision", "CDF precision bits (12-16)"},
            {"checksums", "on/off"},
        };
        for (const auto& [key, help] : keys) {
            std::string flag = "--" + key;
            std::replace(flag.begin(), flag.end(), '_', '-');
            cmd->add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
        }
    }

    EncodeConfig resolve() const {
        EncodeConfig c;
        if (!config_file.empty()) apply_config_file(c, config_file);
        for (const auto& [k, v] : values) apply_setting(c, k, v);
        c.validate();
        return c;
    }
};

json config_json(const EncodeConfig& c) {
    return {{"lambda", c.lambda},
            {"operation_point", c.op.name},
            {"context_taps", c.op.context_taps},
            {"synth_channels", c.op.synth_channels},
            {"layers", c.layers},
            {"hyperprior_downscale", c.hyperprior_downscale},
            {"iterations", c.schedule.total_iters()},
            {"seed", c.seed},
            {"use_hyperprior", c.ablation.use_hyperprior},
            {"use_layer_index", c.ablation.use_layer_index},
            {"med", c.ablation.med},
            {"cphi", c.ablation.cphi},
            {"resample", c.ablation.resample == pyr::ResampleMode::Area ? "area" : "bicubic"}};
}

void print(const json& j, bool as_json, const std::function<void()>& text) {
    if (as_json) std::cout << j.dump(2) << '\n';
    else text();
}

// verbs ---------------------------------------------------------------------------

int run_encode(const std::string& in, const std::string& out, const EncodeFlags& flags, bool as_json, bool verbose) {
    const EncodeConfig cfg = flags.resolve();
    const Image img = read_pnm(in);
    ProgressFn progress;
    if (verbose)
        progress = [&cfg](std::uint32_t it, const LossTerms& t) {
            if (it % 100 == 0 || it + 1 == cfg.schedule.total_iters())
                std::fprintf(stderr, "iter %5u loss %.6g mse %.6g rate_y %.1f rate_s %.1f\n", it, t.loss, t.mse,
                             t.rate_y_bits, t.rate_s_bits);
        };
    const EncodeResult r = encode(img, cfg, progress);
    write_bytes(out, r.bytes);
    const json j = {{"input", in},        {"output", out},          {"width", img.width}, {"height", img.height},
                    {"bytes", r.bytes.size()}, {"bpp", r.bpp()}, {"psnr", psnr_json(r.psnr)},
                    {"config", config_json(cfg)}};
    print(j, as_json, [&] {
        std::printf("%s -> %s: %zu bytes, %.4f bpp, %.3f dB\n", in.c_str(), out.c_str(), r.bytes.size(), r.bpp(), r.psnr);
    });
    return kOk;
}

int run_decode(const std::string& in, const std::string& out, std::size_t threads, bool as_json) {
    const auto bytes = read_bytes(in);
    const DecodeResult d = decode(view(bytes), DecodeOptions{threads, {}});
    write_ppm(out, d.image);
    print({{"input", in}, {"output", out}, {"width", d.image.width}, {"height", d.image.height}}, as_json, [&] {
        std::printf("%s -> %s (%zux%zu)\n", in.c_str(), out.c_str(), d.image.width, d.image.height);
    });
    return kOk;
}

int run_eval(const std::string& original, const std::string& stream, bool as_json) {
    const Image ref = read_pnm(original);
    const auto bytes = read_bytes(stream);
    const DecodeResult d = decode(view(bytes));
    const double q = psnr(ref, d.image);
    const double bpp = 8.0 * static_cast<double>(bytes.size()) / static_cast<double>(ref.width * ref.height);
    print({{"bytes", bytes.size()}, {"bpp", bpp}, {"psnr", psnr_json(q)}}, as_json,
          [&] { std::printf("%zu bytes, %.4f bpp, %.3f dB\n", bytes.size(), bpp, q); });
    return kOk;
}

/// Reads an RD curve: a sweep JSON report (its "mean" points) or text lines "bpp psnr".
eval::RDCurve read_curve(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    eval::RDCurve c;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && (text[first] == '{' || text[first] == '[')) {
        const json j = json::parse(text);
        const json& pts = j.is_array() ? j : j.at("mean");
        for (const auto& p : pts) c.push_back({p.at("bpp").get<double>(), p.at("psnr").get<double>()});
        return c;
    }
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        std::istringstream ls(line);
        double r = 0.0, q = 0.0;
        if (ls >> r >> q) c.push_back({r, q});
    }
    return c;
}

int run_bdrate(const std::string& ref, const std::string& test, bool as_json) {
    const double bd = eval::bd_rate(read_curve(ref), read_curve(test));
    print({{"reference", ref}, {"test", test}, {"bd_rate_percent", bd}}, as_json,
          [&] { std::printf("BD-rate %+.4f%%\n", bd); });
    return kOk;
}

int run_complexity(const EncodeFlags& flags, std::size_t width, std::size_t height, bool as_json) {
    const EncodeConfig cfg = flags.resolve();
    const auto r = eval::mac_per_pixel(cfg.op, height, width, cfg.layers, cfg.hyperprior_downscale, cfg.ablation);
    const json j = {{"width", width},
                    {"height", height},
                    {"operation_point", cfg.op.name},
                    {"context_xi", r.context_xi},
                    {"upsampler", r.upsampler},
                    {"synthesis", r.synthesis},
                    {"context_phi", r.context_phi},
                    {"resampler", r.resampler},
                    {"total", r.total()}};
    print(j, as_json, [&] {
        std::printf("MAC/pixel at %zux%zu (%s)\n", width, height, cfg.op.name.c_str());
        std::printf("  context xi   %10.2f\n  upsampler    %10.2f\n  synthesis    %10.2f\n", r.context_xi, r.upsampler,
                    r.synthesis);
        std::printf("  context phi  %10.2f\n  resampler    %10.2f\n  total        %10.2f\n", r.context_phi, r.resampler,
                    r.total());
    });
    return kOk;
}

int run_breakdown(const std::string& in, bool as_json) {
    const auto bytes = read_bytes(in);
    const auto b = eval::report_breakdown(view(bytes));
    json j = json::array();
    for (const auto& e : b) j.push_back({{"section", e.name}, {"bytes", e.bytes}, {"share", e.share}});
    print({{"input", in}, {"total_bytes", bytes.size()}, {"sections", j}}, as_json, [&] {
        for (const auto& e : b) std::printf("  %-11s %8zu bytes %7.2f%%\n", e.name.c_str(), e.bytes, e.share);
    });
    return kOk;
}

int run_dump(const std::string& in, const std::string& out, bool as_json) {
    const auto bytes = read_bytes(in);
    const auto shape = eval::dump_hyperprior(view(bytes), out);
    print({{"input", in}, {"output", out}, {"width", shape.w}, {"height", shape.h}}, as_json,
          [&] { std::printf("%s -> %s (%zux%zu)\n", in.c_str(), out.c_str(), shape.w, shape.h); });
    return kOk;
}

std::size_t default_jobs() {
    if (const char* v = std::getenv("LANCE_THREADS")) {
        const long n = std::strtol(v, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

int run_sweep(const std::vector<std::string>& images, const std::vector<double>& lambdas, std::size_t seeds,
              std::size_t jobs, const EncodeFlags& flags, bool as_json) {
    const EncodeConfig base = flags.resolve();
    std::vector<Image> imgs;
    for (const auto& p : images) imgs.push_back(read_pnm(p));

    struct Job {
        std::size_t image, lambda;
        std::uint64_t seed;
        eval::RDPoint point;
        std::string error;
        bool diverged = false;
    };
    std::vector<Job> work;
    for (std::size_t i = 0; i < imgs.size(); ++i)
        for (std::size_t l = 0; l < lambdas.size(); ++l)
            for (std::size_t s = 0; s < seeds; ++s) work.push_back({i, l, base.seed + s, {}, {}, false});

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < work.size(); k = next++) {
            Job& job = work[k];
            EncodeConfig cfg = base;
            cfg.lambda = lambdas[job.lambda];
            cfg.seed = job.seed;
            try {
                const EncodeResult r = encode(imgs[job.image], cfg);
                job.point = {r.bpp(), r.psnr};
            } catch (const DivergenceError& e) {
                job.error = e.what();
                job.diverged = true;
            } catch (const std::exception& e) {
                job.error = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(jobs, work.size()); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    for (const auto& job : work)
        if (!job.error.empty()) {
            std::fprintf(stderr, "sweep: %s lambda %g seed %llu: %s\n", images[job.image].c_str(), lambdas[job.lambda],
                         static_cast<unsigned long long>(job.seed), job.error.c_str());
            return job.diverged ? kDivergence : kUsage;
        }

    // per-image seed averages, then the mean over images at each lambda
    json per_image = json::array(), mean = json::array();
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
        std::vector<eval::RDPoint> image_points;
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            std::vector<eval::RDPoint> runs;
            for (const auto& job : work)
                if (job.image == i && job.lambda == l) runs.push_back(job.point);
            const auto avg = eval::average(runs);
            image_points.push_back(avg);
            json seeds_json = json::array();
            for (const auto& p : runs) seeds_json.push_back({{"bpp", p.rate}, {"psnr", psnr_json(p.quality)}});
            per_image.push_back({{"image", images[i]},
                                 {"lambda", lambdas[l]},
                                 {"bpp", avg.rate},
                                 {"psnr", psnr_json(avg.quality)},
                                 {"runs", seeds_json}});
        }
        const auto m = eval::average(image_points);
        mean.push_back({{"lambda", lambdas[l]}, {"bpp", m.rate}, {"psnr", psnr_json(m.quality)}});
    }
    const json j = {{"config", config_json(base)}, {"seeds", seeds}, {"per_image", per_image}, {"mean", mean}};
    print(j, as_json, [&] {
        for (const auto& p : mean)
            std::printf("lambda %-8g %.4f bpp %.3f dB\n", p["lambda"].get<double>(), p["bpp"].get<double>(),
                        p["psnr"].is_number() ? p["psnr"].get<double>() : INFINITY);
    });
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LANCE overfitted image codec"};
    app.require_subcommand(1);
    app.fallthrough();
    bool as_json = false;
    app.add_flag("--json", as_json, "machine-readable JSON output");

    std::string in, out, ref, test;
    bool verbose = false;
    std::size_t threads = 0, width = 768, height = 512, seeds = 1, jobs = default_jobs();
    std::vector<std::string> images;
    std::vector<double> lambdas = {0.0001, 0.0004, 0.001, 0.004, 0.02};

    EncodeFlags enc_flags, cx_flags, sweep_flags;

    auto* enc = app.add_subcommand("encode", "train and write a bitstream");
    enc->add_option("input", in, "PPM/PGM image")->required()->check(CLI::ExistingFile);
    enc->add_option("-o,--output", out, "bitstream path")->required();
    enc->add_flag("-v,--verbose", verbose, "log training progress to stderr");
    enc_flags.attach(enc);

    auto* dec = app.add_subcommand("decode", "decode a bitstream to PPM");
    dec->add_option("input", in, "bitstream")->required()->check(CLI::ExistingFile);
    dec->add_option("-o,--output", out, "PPM path")->required();
    dec->add_option("-t,--threads", threads, "latent decode threads (default LANCE_THREADS or 1)");

    auto* ev = app.add_subcommand("eval", "PSNR and rate of a bitstream against its original");
    ev->add_option("original", ref, "original PPM/PGM")->required()->check(CLI::ExistingFile);
    ev->add_option("bitstream", in, "bitstream")->required()->check(CLI::ExistingFile);

    auto* bd = app.add_subcommand("bdrate", "BD-rate of a test curve against a reference curve");
    bd->add_option("reference", ref, "sweep JSON or 'bpp psnr' lines")->required()->check(CLI::ExistingFile);
    bd->add_option("test", test, "sweep JSON or 'bpp psnr' lines")->required()->check(CLI::ExistingFile);

    auto* cx = app.add_subcommand("complexity", "decoder MAC/pixel per module");
    cx->add_option("--width", width, "image width")->check(CLI::PositiveNumber);
    cx->add_option("--height", height, "image height")->check(CLI::PositiveNumber);
    cx_flags.attach(cx);

    auto* br = app.add_subcommand("breakdown", "byte share of each bitstream section");
    br->add_option("input", in, "bitstream")->required()->check(CLI::ExistingFile);

    auto* dump = app.add_subcommand("dump-hyperprior", "write the normalized hyperprior map as PGM");
    dump->add_option("input", in, "bitstream")->required()->check(CLI::ExistingFile);
    dump->add_option("-o,--output", out, "PGM path")->required();

    auto* sw = app.add_subcommand("sweep", "encode images over lambdas and seeds, averaging per image");
    sw->add_option("images", images, "PPM/PGM images")->required()->check(CLI::ExistingFile);
    sw->add_option("--lambdas", lambdas, "lambda values")->delimiter(',');
    sw->add_option("--seeds", seeds, "seeds per image and lambda")->check(CLI::PositiveNumber);
    sw->add_option("-j,--jobs", jobs, "worker threads (default LANCE_THREADS or hardware)")->check(CLI::PositiveNumber);
    sweep_flags.attach(sw);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (enc->parsed()) return run_encode(in, out, enc_flags, as_json, verbose);
        if (dec->parsed()) return run_decode(in, out, threads, as_json);
        if (ev->parsed()) return run_eval(ref, in, as_json);
        if (bd->parsed()) return run_bdrate(ref, test, as_json);
        if (cx->parsed()) return run_complexity(cx_flags, width, height, as_json);
        if (br->parsed()) return run_breakdown(in, as_json);
        if (dump->parsed()) return run_dump(in, out, as_json);
        if (sw->parsed()) return run_sweep(images, lambdas, seeds, jobs, sweep_flags, as_json);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "lance: encode diverged: %s\n", e.what());
        return kDivergence;
    } catch (const DecodeError& e) {
        std::fprintf(stderr, "lance: decode error: %s\n", e.what());
        return kDecode;
    } catch (const eval::EvalError& e) {
        std::fprintf(stderr, "lance: %s\n", e.what());
        return kUsage;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "lance: bad JSON: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "lance: %s\n", e.what());
        return kUsage;
    }
    return kUsage;
}
