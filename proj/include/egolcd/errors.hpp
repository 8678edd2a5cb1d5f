#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace egolcd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Axis/shape disagreement between tensors or between a tensor and an operation.
struct ShapeError : Error {
    using Error::Error;
};

// A value outside its admissible domain (zero-norm vector, tau out of range,
// fully masked softmax row, empty cache, non-positive reference chunk, ...).
struct ValueError : Error {
    using Error::Error;
};

// Script / CSV text that does not match the grammar. Carries the 1-based line.
struct ParseError : Error {
    ParseError(const std::string& what, size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_number(line) {}
    size_t line_number;
};

// Corrupt or truncated binary file. Carries the byte offset of the failure.
struct IoError : Error {
    IoError(const std::string& what, size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    explicit IoError(const std::string& what) : Error(what), byte_offset(0) {}
    size_t byte_offset;
};

// Inconsistent configuration across components (layer counts, dimensions, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Operation invoked in the wrong order (e.g. backward without a recorded forward).
struct StateError : Error {
    using Error::Error;
};

}  // namespace egolcd
