#pragma once

#include <stdexcept>
#include <string>

namespace guie {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes (usage 1, data 2, divergence 3).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed textual input. Carries the 1-based line number when known.
class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class DuplicateIdError : public Error {
public:
  explicit DuplicateIdError(std::string id)
      : Error("duplicate image_id \"" + id + "\""), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

private:
  std::string id_;
};

/// Binary container problems: bad magic, version, truncation, dimension.
class FormatError : public Error {
public:
  using Error::Error;
};

/// A precondition on values (not on syntax) was violated.
class DomainError : public Error {
public:
  using Error::Error;
};

/// Non-finite gradient handed to the optimizer.
class OptimizerError : public Error {
public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
  DivergenceError(std::size_t batch, const std::string& what)
      : Error("batch " + std::to_string(batch) + ": " + what), batch_(batch) {}
  std::size_t batch() const noexcept { return batch_; }

private:
  std::size_t batch_;
};

/// Inconsistent configuration (bad hyperparameters, empty evaluation split).
class ConfigError : public Error {
public:
  using Error::Error;
};

}  // namespace guie
