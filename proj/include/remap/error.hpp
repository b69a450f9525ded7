#pragma once

#include <stdexcept>
#include <string>

namespace remap {

/// Broad failure category. The CLI maps each category onto an exit code.
enum class ErrorCategory { Config, Data, Numeric, Contract };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

/// Bad, missing or inconsistent input data (including I/O failures).
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

/// File does not carry the expected magic/version.
class FormatError : public DataError {
public:
    using DataError::DataError;
};

/// File header disagrees with the payload it describes.
class CorruptionError : public DataError {
public:
    using DataError::DataError;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

/// Caller broke a precondition (dimension mismatch, out-of-range region, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorCategory::Contract, what) {}
};

}  // namespace remap
