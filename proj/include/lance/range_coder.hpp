#pragma once

// Byte-oriented range coder over CdfTable frequencies.
//
// 32-bit range, renormalized a byte at a time when it drops below 2^24, with
// a 33-bit low register whose carries are resolved through a cached byte
// (the shift-low scheme). Interval bounds are computed as
// floor(range * cum / 2^precision) so the only coding loss per symbol is one
// unit of range. The first output byte of this scheme is always zero and is
// not stored.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "lance/entropy_model.hpp"
#include "lance/errors.hpp"

namespace lance::coder {

class RangeEncoder {
public:
    void encode(std::int64_t symbol, const entropy::CdfTable& table) {
        if (!table.contains(symbol)) throw EncodeError("range coder: symbol outside table support");
        const std::uint64_t r = range_;
        const std::uint64_t a = (r * table.low(symbol)) >> table.precision;
        const std::uint64_t b = (r * (table.low(symbol) + table.freq(symbol))) >> table.precision;
        low_ += a;
        range_ = static_cast<std::uint32_t>(b - a);
        while (range_ < kTop) {
            range_ <<= 8;
            shift_low();
        }
    }

    std::vector<std::uint8_t> finish() {
        for (int i = 0; i < 5; ++i) shift_low();
        return std::move(out_);
    }

private:
    static constexpr std::uint32_t kTop = 1u << 24;

    void shift_low() {
        if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
            const auto carry = static_cast<std::uint8_t>(low_ >> 32);
            std::uint8_t temp = cache_;
            do {
                emit(static_cast<std::uint8_t>(temp + carry));
                temp = 0xFF;
            } while (--cache_size_ != 0);
            cache_ = static_cast<std::uint8_t>(low_ >> 24);
        }
        ++cache_size_;
        low_ = (low_ & 0x00FFFFFFu) << 8;
    }

    void emit(std::uint8_t b) {
        if (skip_first_) {
            skip_first_ = false;
            return;
        }
        out_.push_back(b);
    }

    std::uint64_t low_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint8_t cache_ = 0;
    std::uint64_t cache_size_ = 1;
    bool skip_first_ = true;
    std::vector<std::uint8_t> out_;
};

class RangeDecoder {
public:
    explicit RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
        for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next();
        if (code_ >= range_) throw DecodeError("range coder: corrupt stream");
    }

    std::int64_t decode(const entropy::CdfTable& table) {
        const std::uint64_t r = range_;
        const std::uint64_t total = std::uint64_t{1} << table.precision;
        // Largest cumulative count c with floor(r * c / total) <= code.
        const std::uint64_t target = (((static_cast<std::uint64_t>(code_) + 1) << table.precision) - 1) / r;
        const auto& cum = table.cumulative;
        const auto it = std::upper_bound(cum.begin(), cum.end(), std::min<std::uint64_t>(target, total - 1));
        const auto k = static_cast<std::size_t>(it - cum.begin()) - 1;
        const std::uint64_t a = (r * cum[k]) >> table.precision;
        const std::uint64_t b = (r * cum[k + 1]) >> table.precision;
        if (code_ < a || code_ >= b) throw DecodeError("range coder: corrupt stream");
        code_ -= static_cast<std::uint32_t>(a);
        range_ = static_cast<std::uint32_t>(b - a);
        while (range_ < (1u << 24)) {
            code_ = (code_ << 8) | next();
            range_ <<= 8;
        }
        return table.support_min + static_cast<std::int64_t>(k);
    }

    /// True when every byte of the payload has been consumed.
    bool exhausted() const { return pos_ == in_.size(); }

private:
    std::uint32_t next() {
        if (pos_ >= in_.size()) throw TruncatedError("range coder: payload truncated");
        return in_[pos_++];
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint32_t code_ = 0;
};

/// Encodes `symbols`; `cdf(i, prefix)` returns the table for symbol i given
/// the already coded prefix.
template <class Provider>
std::vector<std::uint8_t> range_encode(std::span<const std::int64_t> symbols, Provider&& cdf) {
    RangeEncoder enc;
    for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode(symbols[i], cdf(i, symbols.first(i)));
    return enc.finish();
}

template <class Provider>
std::vector<std::int64_t> range_decode(std::span<const std::uint8_t> bytes, std::size_t count, Provider&& cdf) {
    RangeDecoder dec(bytes);
    std::vector<std::int64_t> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const entropy::CdfTable& table = cdf(i, std::span<const std::int64_t>(out));
        out.push_back(dec.decode(table));
    }
    if (!dec.exhausted()) throw DecodeError("range coder: trailing bytes in payload");
    return out;
}

}  // namespace lance::coder
