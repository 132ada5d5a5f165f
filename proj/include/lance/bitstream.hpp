#pragma once

// Container format: fixed header, section table, section payloads.
// Layout is documented byte by byte in docs/bitstream.md.

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "lance/errors.hpp"

namespace lance::coder {

inline constexpr std::array<std::uint8_t, 4> kMagic = {'L', 'N', 'C', 'E'};
inline constexpr std::uint8_t kFormatVersion = 1;

enum class SectionKind : std::uint8_t {
    ParamsPhi = 0,
    ParamsXi = 1,
    ParamsUpsampler = 2,
    ParamsSynthesis = 3,
    Hyperprior = 4,
    Latent = 5,
};

inline std::string to_string(SectionKind k) {
    switch (k) {
        case SectionKind::ParamsPhi: return "params_phi";
        case SectionKind::ParamsXi: return "params_xi";
        case SectionKind::ParamsUpsampler: return "params_upsampler";
        case SectionKind::ParamsSynthesis: return "params_synth";
        case SectionKind::Hyperprior: return "hyperprior";
        case SectionKind::Latent: return "latent";
    }
    return "unknown";
}

namespace flags {
inline constexpr std::uint8_t kHyperprior = 1u << 0;
inline constexpr std::uint8_t kLayerIndex = 1u << 1;
inline constexpr std::uint8_t kAreaResample = 1u << 2;
inline constexpr std::uint8_t kMed = 1u << 3;
inline constexpr std::uint8_t kCphi = 1u << 4;
inline constexpr std::uint8_t kChecksums = 1u << 5;
inline constexpr std::uint8_t kKnown = 0x3F;
}  // namespace flags

/// Parameter set order: phi, xi, upsampler, synthesis.
inline constexpr std::size_t kParamSets = 4;

struct ParamSetInfo {
    std::uint32_t count = 0;
    std::uint8_t step_exponent = 0;
};

struct BitstreamHeader {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint8_t layers = 0;
    std::uint8_t hyperprior_downscale = 0;  // d
    std::uint8_t context_taps = 0;          // N
    std::uint8_t synth_channels = 0;        // C
    std::uint8_t flag_bits = 0;
    std::uint8_t precision = 16;
    std::vector<std::uint16_t> latent_support;  // A_l, one per layer
    std::uint16_t hyperprior_support = 0;       // A_s
    std::array<ParamSetInfo, kParamSets> params{};

    bool has(std::uint8_t f) const { return (flag_bits & f) != 0; }
};

struct Section {
    SectionKind kind = SectionKind::Latent;
    std::uint8_t layer = 0;
    std::vector<std::uint8_t> payload;
};

/// Entry of the section table as found in a serialized file.
struct SectionEntry {
    SectionKind kind = SectionKind::Latent;
    std::uint8_t layer = 0;
    std::uint32_t offset = 0;
    std::uint32_t length = 0;
    std::uint32_t crc = 0;
};

struct Bitstream {
    BitstreamHeader header;
    std::vector<Section> sections;

    const Section* find(SectionKind kind, std::uint8_t layer = 0) const {
        for (const auto& s : sections)
            if (s.kind == kind && (kind != SectionKind::Latent || s.layer == layer)) return &s;
        return nullptr;
    }
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; sections are far below 4 GiB.
    c = crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(c);
}

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { out.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v >> 8));
        u8(static_cast<std::uint8_t>(v));
    }
    void u32(std::uint32_t v) {
        u16(static_cast<std::uint16_t>(v >> 16));
        u16(static_cast<std::uint16_t>(v));
    }
    std::vector<std::uint8_t> out;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
    std::uint8_t u8() {
        if (pos_ >= bytes_.size()) throw TruncatedError("bitstream: header truncated");
        return bytes_[pos_++];
    }
    std::uint16_t u16() {
        const auto hi = u8();
        return static_cast<std::uint16_t>((hi << 8) | u8());
    }
    std::uint32_t u32() {
        const std::uint32_t hi = u16();
        return (hi << 16) | u16();
    }
    std::size_t position() const { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline std::size_t header_size(std::size_t layers, std::size_t sections) {
    // magic, version, H, W, 6 single-byte fields, A_l, A_s, param sets, section count, table
    return 4 + 1 + 4 + 4 + 6 + 2 * layers + 2 + kParamSets * 5 + 1 + sections * 14;
}

}  // namespace detail

/// Bytes taken by header and section table for a stream of this shape.
inline std::size_t header_bytes(const Bitstream& bs) {
    return detail::header_size(bs.header.latent_support.size(), bs.sections.size());
}

inline std::vector<std::uint8_t> write_bitstream(const Bitstream& bs) {
    const BitstreamHeader& h = bs.header;
    if (h.latent_support.size() != h.layers) throw ContractError("write_bitstream: one support per layer required");
    if (bs.sections.size() > 255) throw ContractError("write_bitstream: too many sections");
    detail::ByteWriter w;
    for (auto m : kMagic) w.u8(m);
    w.u8(kFormatVersion);
    w.u32(h.height);
    w.u32(h.width);
    w.u8(h.layers);
    w.u8(h.hyperprior_downscale);
    w.u8(h.context_taps);
    w.u8(h.synth_channels);
    w.u8(h.flag_bits);
    w.u8(h.precision);
    for (auto a : h.latent_support) w.u16(a);
    w.u16(h.hyperprior_support);
    for (const auto& p : h.params) {
        w.u32(p.count);
        w.u8(p.step_exponent);
    }
    w.u8(static_cast<std::uint8_t>(bs.sections.size()));
    std::size_t offset = detail::header_size(h.layers, bs.sections.size());
    for (const auto& s : bs.sections) {
        w.u8(static_cast<std::uint8_t>(s.kind));
        w.u8(s.layer);
        w.u32(static_cast<std::uint32_t>(offset));
        w.u32(static_cast<std::uint32_t>(s.payload.size()));
        w.u32(h.has(flags::kChecksums) ? crc32_of(s.payload) : 0u);
        offset += s.payload.size();
    }
    for (const auto& s : bs.sections) w.out.insert(w.out.end(), s.payload.begin(), s.payload.end());
    return std::move(w.out);
}

inline Bitstream read_bitstream(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    for (auto m : kMagic)
        if (r.u8() != m) throw DecodeError("bitstream: bad magic");
    const auto version = r.u8();
    if (version != kFormatVersion) throw VersionError("bitstream: unsupported format version " + std::to_string(version));

    Bitstream bs;
    BitstreamHeader& h = bs.header;
    h.height = r.u32();
    h.width = r.u32();
    h.layers = r.u8();
    h.hyperprior_downscale = r.u8();
    h.context_taps = r.u8();
    h.synth_channels = r.u8();
    h.flag_bits = r.u8();
    h.precision = r.u8();
    if ((h.flag_bits & ~flags::kKnown) != 0) throw DecodeError("bitstream: unknown flag bits");
    for (std::size_t l = 0; l < h.layers; ++l) h.latent_support.push_back(r.u16());
    h.hyperprior_support = r.u16();
    for (auto& p : h.params) {
        p.count = r.u32();
        p.step_exponent = r.u8();
    }
    const std::size_t n = r.u8();
    std::vector<SectionEntry> table(n);
    for (auto& e : table) {
        const auto kind = r.u8();
        if (kind > static_cast<std::uint8_t>(SectionKind::Latent)) throw DecodeError("bitstream: unknown section kind");
        e.kind = static_cast<SectionKind>(kind);
        e.layer = r.u8();
        e.offset = r.u32();
        e.length = r.u32();
        e.crc = r.u32();
    }
    std::size_t expected = r.position();
    for (const auto& e : table) {
        if (e.offset != expected) throw DecodeError("bitstream: section offsets not contiguous");
        if (static_cast<std::size_t>(e.offset) + e.length > bytes.size()) throw TruncatedError("bitstream: section truncated");
        Section s;
        s.kind = e.kind;
        s.layer = e.layer;
        s.payload.assign(bytes.begin() + e.offset, bytes.begin() + e.offset + e.length);
        if (h.has(flags::kChecksums) && crc32_of(s.payload) != e.crc)
            throw ChecksumError("bitstream: checksum mismatch in section " + to_string(e.kind) +
                                (e.kind == SectionKind::Latent ? " " + std::to_string(e.layer) : std::string()));
        bs.sections.push_back(std::move(s));
        expected += e.length;
    }
    if (expected != bytes.size()) throw DecodeError("bitstream: trailing bytes after last section");
    return bs;
}

/// Section table of a serialized stream without copying payloads.
inline std::vector<SectionEntry> section_table(std::span<const std::uint8_t> bytes) {
    const Bitstream bs = read_bitstream(bytes);
    std::vector<SectionEntry> out;
    std::uint32_t offset = static_cast<std::uint32_t>(header_bytes(bs));
    for (const auto& s : bs.sections) {
        out.push_back({s.kind, s.layer, offset, static_cast<std::uint32_t>(s.payload.size()), crc32_of(s.payload)});
        offset += static_cast<std::uint32_t>(s.payload.size());
    }
    return out;
}

}  // namespace lance::coder
