#pragma once

#include <stdexcept>
#include <string>

namespace pit {

// Error taxonomy, mapped to CLI exit codes: usage/config -> 1, data -> 2,
// numeric failure -> 3.

// Invalid configuration: bad hyper-parameters, inconsistent shapes in a
// config, unknown enum names.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or out-of-contract input data (CSV rows, non-positive series
// values, coverage mismatches).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes passed to an operation.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Domain violation of a math primitive (ln of non-positive input).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values produced or encountered during computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace pit
