#pragma once

#include <stdexcept>
#include <string>

namespace crosgrps {

// Base for every error raised by the library. Anything that is not an IoError
// is a contract or validation failure (CLI exit code 1).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class EmptyInputError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

// File missing, unreadable or unwritable (CLI exit code 2).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace crosgrps
