#pragma once

#include <stdexcept>
#include <string>

namespace xsep {

// Shape disagreement between tensors or between a tensor and a layer.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Output geometry would be empty or a stride stack exhausts the input.
struct GeometryError : std::runtime_error {
    explicit GeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid scalar argument (rate >= 1, multiplier < 1, g does not divide M, ...).
struct ParameterError : std::invalid_argument {
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Requested tensor does not fit in addressable memory.
struct SizeError : std::runtime_error {
    explicit SizeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or mistyped on-disk artifact (bad magic, version, truncation).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Semantically invalid data (label out of range, count mismatch).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (unknown key, missing weight, invalid value).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace xsep
