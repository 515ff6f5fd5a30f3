#pragma once

#include <stdexcept>
#include <string>

namespace fedkd {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dimension or name-set mismatch between operands.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values or diverging computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid experiment or model configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input file (CSV, config, checkpoint).
class ParseError : public Error {
public:
    using Error::Error;
};

// Violation of the client/server message protocol.
class ProtocolError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace fedkd
