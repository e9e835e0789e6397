#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rtner {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Dataset file could not be parsed or violates a corpus invariant (exit code 3).
class DatasetError : public Error {
public:
    explicit DatasetError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A precondition of an operation did not hold.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Failure talking to a chat or embedding backend.
class BackendError : public Error {
public:
    BackendError(const std::string& what, int status, bool retryable)
        : Error(what), status_(status), retryable_(retryable) {}

    /// HTTP status, or 0 for transport-level failures.
    int status() const noexcept { return status_; }
    bool retryable() const noexcept { return retryable_; }

private:
    int status_;
    bool retryable_;
};

/// Too many per-query failures in a run (exit code 4).
class RunFailedError : public Error {
public:
    using Error::Error;
};

}  // namespace rtner
