#pragma once

#include <stdexcept>
#include <string>

namespace equad {

struct EquadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// shape conformance violations in tensor ops
struct ShapeError : EquadError {
    using EquadError::EquadError;
};

// out-of-range gather/scatter indices
struct IndexError : EquadError {
    using EquadError::EquadError;
};

// invalid configuration values
struct ConfigError : EquadError {
    using EquadError::EquadError;
};

// file/serialization failures, schema mismatches
struct IoError : EquadError {
    using EquadError::EquadError;
};

// dataset/content validation failures
struct DataError : EquadError {
    using EquadError::EquadError;
};

// numerical failures (non-finite losses, degenerate fits)
struct NumericError : EquadError {
    using EquadError::EquadError;
};

}  // namespace equad
