#pragma once

#include <stdexcept>
#include <string>

namespace atpatch {

/// Base for every error raised by the library. The CLI maps subclasses onto
/// exit codes (contract-style errors -> 1, I/O -> 2).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace atpatch
