#pragma once

#include <stdexcept>
#include <string>

namespace lexforge {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters or contradictory settings.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Bad caller-supplied data (ids out of range, empty corpus, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// Tensor extents that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed text file; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Stored digest or declared length does not match the bytes on disk.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Binary container written by an incompatible format version.
class VersionError : public Error {
public:
    VersionError(const std::string& what, unsigned found, unsigned expected)
        : Error(what + " (found version " + std::to_string(found) + ", expected " +
                std::to_string(expected) + ")"),
          found_(found) {}

    unsigned found() const noexcept { return found_; }

private:
    unsigned found_;
};

/// NaN or Inf produced during a forward pass or an update.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Filesystem failures: unreadable inputs, failed writes.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace lexforge
