#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stepwise {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition (bad argument, invalid config
// value, operation on a terminal state, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

// A transition would exceed the configured context budget.
class OverflowError : public Error {
public:
    using Error::Error;
};

// Structural parse failure in a token stream. `index` is the offending token
// position (or the stream length for truncation-style failures).
class ParseError : public Error {
public:
    ParseError(std::size_t index, const std::string& what)
        : Error("parse error at token " + std::to_string(index) + ": " + what),
          index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// Configuration file problem; `key` names the offending entry.
class ConfigError : public Error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : Error("config error at '" + key + "': " + what), key_(key) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

// Record file I/O problem; `line` is 1-based, 0 when not line-specific.
class RecordError : public Error {
public:
    RecordError(std::size_t line, const std::string& what)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace stepwise
