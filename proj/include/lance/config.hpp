#pragma once

// Encoder configuration: operation points, ablation switches, optimizer and
// schedule settings, plus the key = value config-file reader.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "lance/entropy_model.hpp"
#include "lance/errors.hpp"
#include "lance/pyramid.hpp"
#include "lance/quantize.hpp"

namespace lance {

/// Context size of the latent model and width of the synthesis network.
struct OperationPoint {
    std::string name = "hop";
    std::size_t context_taps = 16;
    std::size_t synth_channels = 48;

    static OperationPoint hop() { return {"hop", 16, 48}; }
    static OperationPoint mop() { return {"mop", 16, 16}; }
    static OperationPoint lop() { return {"lop", 8, 16}; }

    static OperationPoint from_name(const std::string& s) {
        if (s == "hop" || s == "HOP") return hop();
        if (s == "mop" || s == "MOP") return mop();
        if (s == "lop" || s == "LOP") return lop();
        throw ConfigError("unknown operation point '" + s + "' (expected hop, mop or lop)");
    }
};

struct Ablation {
    bool use_hyperprior = true;
    bool use_layer_index = true;
    pyr::ResampleMode resample = pyr::ResampleMode::Bicubic;
    bool med = true;
    bool cphi = true;

    /// Plain latent-pyramid baseline: no hyperprior, no layer index.
    static Ablation baseline() {
        Ablation a;
        a.use_hyperprior = false;
        a.use_layer_index = false;
        return a;
    }
};

struct AdamConfig {
    double lr_start = 1e-2;
    double lr_end = 1e-4;   // end of the cosine decay in phase 1
    double lr_phase2 = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline constexpr int kMinStepExponent = 2;
inline constexpr int kMaxStepExponent = 8;
inline constexpr std::int64_t kMaxSymbolMagnitude = std::int64_t{1} << 14;

struct EncodeConfig {
    double lambda = 0.001;
    OperationPoint op = OperationPoint::hop();
    std::size_t layers = 7;
    std::size_t hyperprior_downscale = 4;
    quant::QuantSchedule schedule;
    AdamConfig adam;
    double med_temperature_start = 1.0;
    double med_temperature_end = 0.05;
    std::uint64_t seed = 0;
    Ablation ablation;
    int precision = entropy::kDefaultPrecision;
    bool checksums = true;

    /// Splits `total` iterations 90/10 between the two phases.
    void set_iterations(std::uint32_t total) {
        if (total < 2) throw ConfigError("iterations must be >= 2");
        schedule.phase2_iters = std::max<std::uint32_t>(1, total / 10);
        schedule.phase1_iters = total - schedule.phase2_iters;
    }

    double med_temperature(std::uint32_t iter) const {
        const double p = schedule.progress(iter);
        return med_temperature_start + (med_temperature_end - med_temperature_start) * p;
    }

    void validate() const {
        if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
        if (layers < 1 || layers > 16) throw ConfigError("layers must be in [1, 16]");
        if (hyperprior_downscale > 16) throw ConfigError("hyperprior_downscale must be in [0, 16]");
        if (op.context_taps != 3 && op.context_taps != 5 && op.context_taps != 8 && op.context_taps != 16)
            throw ConfigError("context_taps must be one of 3, 5, 8, 16");
        if (op.synth_channels < 1 || op.synth_channels > 255) throw ConfigError("synth_channels must be in [1, 255]");
        if (precision < 12 || precision > 16) throw ConfigError("precision must be in [12, 16]");
        if (!(adam.lr_start > 0.0) || !(adam.lr_end > 0.0) || !(adam.lr_phase2 > 0.0))
            throw ConfigError("learning rates must be > 0");
        if (!(med_temperature_start > 0.0) || !(med_temperature_end > 0.0))
            throw ConfigError("MED temperatures must be > 0");
        schedule.validate();
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError("config: '" + key + "' expects on/off, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    return std::stoull(v);
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are an error.
inline void apply_setting(EncodeConfig& c, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "lambda") c.lambda = parse_double(key, value);
    else if (key == "operation_point") c.op = OperationPoint::from_name(value);
    else if (key == "context_taps") c.op.context_taps = parse_uint(key, value);
    else if (key == "synth_channels") c.op.synth_channels = parse_uint(key, value);
    else if (key == "layers") c.layers = parse_uint(key, value);
    else if (key == "hyperprior_downscale") c.hyperprior_downscale = parse_uint(key, value);
    else if (key == "iterations") c.set_iterations(static_cast<std::uint32_t>(parse_uint(key, value)));
    else if (key == "seed") c.seed = parse_uint(key, value);
    else if (key == "lr") c.adam.lr_start = parse_double(key, value);
    else if (key == "lr_end") c.adam.lr_end = parse_double(key, value);
    else if (key == "lr_phase2") c.adam.lr_phase2 = parse_double(key, value);
    else if (key == "temperature_start") c.schedule.temperature_start = parse_double(key, value);
    else if (key == "temperature_end") c.schedule.temperature_end = parse_double(key, value);
    else if (key == "noise_start") c.schedule.noise_std_start = parse_double(key, value);
    else if (key == "noise_end") c.schedule.noise_std_end = parse_double(key, value);
    else if (key == "med_temperature_start") c.med_temperature_start = parse_double(key, value);
    else if (key == "med_temperature_end") c.med_temperature_end = parse_double(key, value);
    else if (key == "use_hyperprior") c.ablation.use_hyperprior = parse_bool(key, value);
    else if (key == "use_layer_index") c.ablation.use_layer_index = parse_bool(key, value);
    else if (key == "med") c.ablation.med = parse_bool(key, value);
    else if (key == "cphi") c.ablation.cphi = parse_bool(key, value);
    else if (key == "resample") {
        if (value == "bicubic") c.ablation.resample = pyr::ResampleMode::Bicubic;
        else if (value == "area") c.ablation.resample = pyr::ResampleMode::Area;
        else throw ConfigError("config: resample expects bicubic or area, got '" + value + "'");
    } else if (key == "precision") c.precision = static_cast<int>(parse_uint(key, value));
    else if (key == "checksums") c.checksums = parse_bool(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

/// Reads `key = value` lines; '#' starts a comment.
inline void apply_config_stream(EncodeConfig& c, std::istream& in) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline void apply_config_file(EncodeConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    apply_config_stream(c, in);
}

}  // namespace lance
