#pragma once

#include <stdexcept>
#include <string>

namespace lance {

/// Violated precondition on a public operation (bad argument, bad shape).
class ContractError : public std::invalid_argument {
public:
    explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid or unsupported configuration value.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Operation invoked in the wrong state (e.g. backward before forward).
class StateError : public std::logic_error {
public:
    explicit StateError(const std::string& what) : std::logic_error(what) {}
};

class EncodeError : public std::runtime_error {
public:
    explicit EncodeError(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced a non-finite loss.
class DivergenceError : public EncodeError {
public:
    explicit DivergenceError(const std::string& what) : EncodeError(what) {}
};

class DecodeError : public std::runtime_error {
public:
    explicit DecodeError(const std::string& what) : std::runtime_error(what) {}
};

class ChecksumError : public DecodeError {
public:
    explicit ChecksumError(const std::string& what) : DecodeError(what) {}
};

class TruncatedError : public DecodeError {
public:
    explicit TruncatedError(const std::string& what) : DecodeError(what) {}
};

class VersionError : public DecodeError {
public:
    explicit VersionError(const std::string& what) : DecodeError(what) {}
};

namespace detail {

inline void require(bool cond, const char* msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace detail
}  // namespace lance
