#pragma once

#include <stdexcept>
#include <string>

namespace pemm {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor dimension mismatch (matmul inner dims, elementwise shapes, ...).
struct ShapeError : Error {
    using Error::Error;
};

/// Convolution/pooling geometry that does not divide evenly.
struct GeometryError : Error {
    using Error::Error;
};

/// Violated API precondition (non-scalar loss, missing gradients, ...).
struct ContractError : Error {
    using Error::Error;
};

/// Invalid configuration value or unknown config key.
struct ConfigError : Error {
    using Error::Error;
};

/// Bad input data (labels out of range, empty validation set, ...).
struct DataError : Error {
    using Error::Error;
};

/// Filesystem/stream failure.
struct IoError : Error {
    using Error::Error;
};

/// Bad magic bytes, version, or truncated container.
struct FormatError : Error {
    using Error::Error;
};

/// Operation on an object in the wrong state (e.g. SWA finalize with no snapshots).
struct StateError : Error {
    using Error::Error;
};

/// Checkpoint/config digest mismatch.
struct MismatchError : Error {
    using Error::Error;
};

/// Loss became non-finite during training.
struct TrainingDiverged : Error {
    using Error::Error;
};

/// Metric undefined on the given input (single-class AUC, AP with no positives).
struct UndefinedMetricError : Error {
    using Error::Error;
};

} // namespace pemm
