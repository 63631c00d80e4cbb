// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bt {

// Root of every error raised by the library. Callers that only need to
// distinguish categories (CLI exit codes) catch the intermediate classes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

class InvalidMaskError : public ContractError {
public:
    using ContractError::ContractError;
};

// Non-finite values where finite ones are required.
class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class MissingFileError : public IoError {
public:
    using IoError::IoError;
};

class VersionError : public IoError {
public:
    using IoError::IoError;
};

class FormatError : public IoError {
public:
    using IoError::IoError;
};

// A record names a file that does not exist.
class ReferenceError : public IoError {
public:
    ReferenceError(const std::string& what, std::string path)
        : IoError(what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class KindMismatchError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace bt
