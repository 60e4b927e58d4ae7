#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cyto {

// Default scalar for all production paths. Tests instantiate the templated
// engine with double where tight numeric tolerances are needed.
using real = float;

// Invalid data handed to an operation (shape mismatch, out-of-range value).
struct InvalidInput : std::runtime_error {
    explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration: invalid parameter ranges, empty corpora, schema errors.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required upstream artifact (weight file, dataset) is missing.
struct MissingArtifact : std::runtime_error {
    explicit MissingArtifact(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failure.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cyto
