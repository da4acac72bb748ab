#pragma once

#include <stdexcept>
#include <string>

namespace sgplvm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or non-finite input (shapes, negative precisions, NaNs).
class InputError : public Error {
public:
    using Error::Error;
};

/// Cholesky factorization failed at every level of the jitter schedule.
class FactorizationError : public Error {
public:
    FactorizationError(const std::string& what, double last_jitter)
        : Error(what), last_jitter_(last_jitter) {}

    [[nodiscard]] double last_jitter() const noexcept { return last_jitter_; }

private:
    double last_jitter_;
};

/// Optimizer produced non-finite objective values.
class OptimizationError : public Error {
public:
    using Error::Error;
};

/// Importance-sampling estimate was undefined (all weights -inf).
class EstimatorError : public Error {
public:
    using Error::Error;
};

/// Configuration or persisted-artifact problems in the experiment harness.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace sgplvm
