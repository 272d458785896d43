#pragma once

#include <stdexcept>
#include <string>

namespace gfm {

// Exit codes used by the CLI. Library code throws; the CLI maps to codes.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitBadConfig = 2,
    kExitNumeric = 3,
    kExitSnapshotMismatch = 4,
};

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Bad or inconsistent configuration, missing inputs, malformed data files.
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values encountered during training/evaluation.
struct NumericError : Error {
    using Error::Error;
};

// Snapshot incompatible with the model being loaded into.
struct SnapshotError : Error {
    using Error::Error;
};

// Filesystem / serialization failures.
struct IoError : Error {
    using Error::Error;
};

} // namespace gfm
