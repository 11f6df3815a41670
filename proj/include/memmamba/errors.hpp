#pragma once

#include <stdexcept>
#include <string>

namespace memmamba {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches between tensors.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid numeric state (non-finite values, zero norms, ...).
struct NumericError : Error {
    using Error::Error;
};

// API misuse: violated preconditions that are not shape-related.
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration values or inconsistent model/config combinations.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset and file I/O problems.
struct DataError : Error {
    using Error::Error;
};

// Corrupt or incompatible checkpoint files.
struct CheckpointError : Error {
    using Error::Error;
};

}  // namespace memmamba
