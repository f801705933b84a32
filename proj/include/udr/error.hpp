#pragma once

#include <stdexcept>
#include <string>

namespace udr {

/// Base class of every error raised by the toolkit. The CLI maps the
/// concrete subclass to an exit code.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Input errors: malformed or invariant-violating data supplied by the user.
class ParseError : public Error {
  public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    explicit ParseError(const std::string& what) : Error(what) {}

    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_ = 0;
};

class RegistryError : public Error {
  public:
    using Error::Error;
};

class TemplateError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class DataError : public Error {
  public:
    using Error::Error;
};

class BuildError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

class BudgetError : public Error {
  public:
    using Error::Error;
};

// Runtime errors: the call was well-formed but the state does not allow it.
class StateError : public Error {
  public:
    using Error::Error;
};

class ContractError : public Error {
  public:
    using Error::Error;
};

class ScoringError : public Error {
  public:
    ScoringError(const std::string& what, std::string candidate_id = {})
        : Error(candidate_id.empty() ? what : what + " [candidate " + candidate_id + "]"),
          candidate_id_(std::move(candidate_id)) {}

    const std::string& candidate_id() const noexcept { return candidate_id_; }

  private:
    std::string candidate_id_;
};

}  // namespace udr
