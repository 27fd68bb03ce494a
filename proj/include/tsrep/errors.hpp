#pragma once

#include <stdexcept>
#include <string>

namespace tsrep {

// Violated precondition of a public operation.
class ContractError : public std::invalid_argument {
public:
    explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Operand shapes do not conform to the operation's rule.
class ShapeError : public ContractError {
public:
    explicit ShapeError(const std::string& what) : ContractError(what) {}
};

// Argument outside the mathematical domain (log of negative, division by zero).
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// NaN/Inf surfaced by a checked computation.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tsrep
