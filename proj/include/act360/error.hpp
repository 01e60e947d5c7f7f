#pragma once

#include <stdexcept>
#include <string>

namespace act360 {

/// Bad input or a violated precondition. The CLI maps it to exit code 1.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Lookup of an id that does not exist.
class NotFound : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Failure while doing otherwise valid work (I/O, divergence, overflow).
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace act360
