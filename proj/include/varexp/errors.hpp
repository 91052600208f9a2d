#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace varexp {

/// Invalid user-facing configuration (bad ranges, unknown modes, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A training loop produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::int64_t iteration)
        : std::runtime_error(what + " at iteration " + std::to_string(iteration)), iteration_(iteration) {}

    std::int64_t iteration() const noexcept { return iteration_; }

private:
    std::int64_t iteration_;
};

}  // namespace varexp
