#pragma once

// MSB-first bit I/O and signed order-0 exponential-Golomb codes.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lance/errors.hpp"

namespace lance::coder {

class BitWriter {
public:
    void put_bit(bool bit) {
        if (nbits_ % 8 == 0) bytes_.push_back(0);
        if (bit) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (nbits_ % 8));
        ++nbits_;
    }
    void put_bits(std::uint64_t value, int count) {
        for (int i = count - 1; i >= 0; --i) put_bit(((value >> i) & 1u) != 0);
    }

    std::size_t bit_count() const { return nbits_; }
    /// Bytes written so far; the last byte is zero-padded.
    const std::vector<std::uint8_t>& bytes() const { return bytes_; }

    std::string to_string() const {
        std::string s;
        for (std::size_t i = 0; i < nbits_; ++i) s.push_back(((bytes_[i / 8] >> (7 - i % 8)) & 1u) ? '1' : '0');
        return s;
    }

private:
    std::vector<std::uint8_t> bytes_;
    std::size_t nbits_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    bool get_bit() {
        if (pos_ >= bytes_.size() * 8) throw TruncatedError("exp-Golomb: read past end of section");
        const bool bit = ((bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1u) != 0;
        ++pos_;
        return bit;
    }
    std::uint64_t get_bits(int count) {
        std::uint64_t v = 0;
        for (int i = 0; i < count; ++i) v = (v << 1) | (get_bit() ? 1u : 0u);
        return v;
    }
    std::size_t position() const { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

/// Signed -> unsigned: 0, 1, -1, 2, -2, ... -> 0, 1, 2, 3, 4, ...
inline std::uint64_t zigzag(std::int64_t v) {
    return v > 0 ? 2 * static_cast<std::uint64_t>(v) - 1 : 2 * static_cast<std::uint64_t>(-v);
}

inline std::int64_t unzigzag(std::uint64_t m) {
    return (m & 1u) ? static_cast<std::int64_t>((m + 1) / 2) : -static_cast<std::int64_t>(m / 2);
}

inline void expgolomb_encode_unsigned(BitWriter& out, std::uint64_t m) {
    const std::uint64_t v = m + 1;
    int len = 0;
    while ((v >> len) > 1) ++len;
    for (int i = 0; i < len; ++i) out.put_bit(false);
    out.put_bits(v, len + 1);
}

inline std::uint64_t expgolomb_decode_unsigned(BitReader& in) {
    int zeros = 0;
    while (!in.get_bit()) {
        if (++zeros > 62) throw DecodeError("exp-Golomb: malformed prefix");
    }
    const std::uint64_t v = (std::uint64_t{1} << zeros) | in.get_bits(zeros);
    return v - 1;
}

inline void expgolomb_encode_signed(BitWriter& out, std::int64_t v) { expgolomb_encode_unsigned(out, zigzag(v)); }

inline std::int64_t expgolomb_decode_signed(BitReader& in) { return unzigzag(expgolomb_decode_unsigned(in)); }

/// Length in bits of the signed code for v.
inline std::size_t expgolomb_length(std::int64_t v) {
    const std::uint64_t x = zigzag(v) + 1;
    int len = 0;
    while ((x >> len) > 1) ++len;
    return static_cast<std::size_t>(2 * len + 1);
}

// Parameter sections ---------------------------------------------------------

/// Quantized parameter set: integers and the step 2^-step_exponent.
struct QuantizedParams {
    std::vector<std::int64_t> integers;
    int step_exponent = 6;

    double step() const { return std::ldexp(1.0, -step_exponent); }
    std::vector<double> values() const {
        std::vector<double> out;
        out.reserve(integers.size());
        for (std::int64_t q : integers) out.push_back(std::ldexp(static_cast<double>(q), -step_exponent));
        return out;
    }
    std::size_t coded_bits() const {
        std::size_t bits = 0;
        for (std::int64_t q : integers) bits += expgolomb_length(q);
        return bits;
    }
};

/// Rounds every weight to the nearest multiple of 2^-step_exponent (ties away from zero).
inline QuantizedParams quantize_params(std::span<const double> weights, int step_exponent) {
    if (step_exponent < 0 || step_exponent > 30) throw ContractError("quantize_params: step must be > 0 and representable");
    QuantizedParams q;
    q.step_exponent = step_exponent;
    q.integers.reserve(weights.size());
    for (double w : weights) {
        if (!std::isfinite(w)) throw ContractError("quantize_params: non-finite weight");
        q.integers.push_back(static_cast<std::int64_t>(std::round(std::ldexp(w, step_exponent))));
    }
    return q;
}

inline std::vector<std::uint8_t> serialize_params(const QuantizedParams& q) {
    BitWriter w;
    for (std::int64_t v : q.integers) expgolomb_encode_signed(w, v);
    return w.bytes();
}

inline QuantizedParams deserialize_params(std::span<const std::uint8_t> bytes, std::size_t count, int step_exponent) {
    BitReader r(bytes);
    QuantizedParams q;
    q.step_exponent = step_exponent;
    q.integers.reserve(count);
    for (std::size_t i = 0; i < count; ++i) q.integers.push_back(expgolomb_decode_signed(r));
    if ((r.position() + 7) / 8 != bytes.size()) throw DecodeError("parameter section: trailing bytes");
    return q;
}

}  // namespace lance::coder
