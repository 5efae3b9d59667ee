#pragma once

#include <stdexcept>
#include <string>

namespace lider {

// Shape/dimension mismatches between tensors or feature maps.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Bad user-facing configuration: unknown keys, invalid values, missing files,
// labels outside a class mask. Maps to exit code 2 in the CLI.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (e.g. gradients fed to the
// optimizer). Maps to exit code 3 in the CLI.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Misuse of the recording tape (backward on a consumed tape, tensors from a
// foreign tape).
struct TapeError : std::logic_error {
    explicit TapeError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace lider
