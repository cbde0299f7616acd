#pragma once

#include <stdexcept>
#include <string>

namespace ofq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid user-supplied configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A caller violated an API contract (arity, scalar loss, unregistered tensor, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Quantizer state is unusable (e.g. non-positive scale).
class StateError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity was produced.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace ofq
