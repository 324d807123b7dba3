#pragma once

#include <stdexcept>
#include <string>

namespace pmc {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent model (bad coefficient values, broken invariants).
class ModelError : public Error {
public:
    using Error::Error;
};

/// Bad run configuration: unknown keys, missing keys, out-of-range values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed to produce a trustworthy answer.
class SolverError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

} // namespace pmc
