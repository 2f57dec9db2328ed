#pragma once

#include <stdexcept>
#include <string>

namespace milbench {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Missing, duplicate or dangling identifiers.
class StructuralError : public Error {
public:
    using Error::Error;
};

// Malformed files, wrong image sizes.
class FormatError : public Error {
public:
    using Error::Error;
};

// Labels that contradict the multiple-instance definition.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Degenerate or insufficient data (zero variance, exhausted pools, single-class AUC).
class DataError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace milbench
