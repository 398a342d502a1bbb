#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mxd {

/// Shape or length disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;

    DimensionError(const std::string& what, std::size_t lhs, std::size_t rhs)
        : std::invalid_argument(what + " (" + std::to_string(lhs) + " vs " + std::to_string(rhs) + ")"),
          lhs_(lhs), rhs_(rhs) {}

    std::size_t lhs() const noexcept { return lhs_; }
    std::size_t rhs() const noexcept { return rhs_; }

private:
    std::size_t lhs_ = 0;
    std::size_t rhs_ = 0;
};

/// Value outside of an operation's domain (k = 0, unknown scheme, NaN input, ...).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or corrupt checkpoint / data file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad or incomplete run configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operation not defined for the given layer kind.
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require_same(const char* what, std::size_t lhs, std::size_t rhs) {
    if (lhs != rhs) throw DimensionError(what, lhs, rhs);
}

} // namespace mxd
