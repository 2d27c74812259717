#pragma once

#include <stdexcept>
#include <string>

namespace speq {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A value lies outside the domain an encoder accepts (e.g. exp5 > 15).
class RangeError : public Error {
public:
    using Error::Error;
};

// A 16-bit word whose (qcode, flag, elsb) combination no encoding produces.
class MalformedWordError : public Error {
public:
    using Error::Error;
};

// NaN/Inf inputs or otherwise invalid numeric arguments.
class InvalidInputError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// Operation requires the bit-sharing format but got a baseline one.
class FormatMismatchError : public Error {
public:
    using Error::Error;
};

class ContextOverflowError : public Error {
public:
    using Error::Error;
};

// File format errors. Each failure mode has its own type so callers can
// tell corruption from truncation.
class IoError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public IoError {
public:
    using IoError::IoError;
};

class ChecksumError : public IoError {
public:
    using IoError::IoError;
};

class TruncatedError : public IoError {
public:
    using IoError::IoError;
};

class MalformedFileError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace speq
