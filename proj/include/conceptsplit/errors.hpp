#pragma once

#include <stdexcept>
#include <string>

namespace csplit {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand dimensions do not fit the operation.
struct ShapeError : Error {
    using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Invalid or inconsistent run configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// File format / filesystem problems.
struct IoError : Error {
    using Error::Error;
};

// Non-finite values where the pipeline requires finite ones (CLI exit code 3).
struct NumericError : Error {
    explicit NumericError(const std::string& msg, long long step = -1)
        : Error(msg), step(step) {}
    long long step;
};

}  // namespace csplit
