#pragma once

#include <stdexcept>
#include <string>

namespace sevae {

// Exception hierarchy. ConfigError and DimensionError are user-input problems
// (CLI exit code 1); everything else is a runtime failure (exit code 2).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DimensionError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace sevae
