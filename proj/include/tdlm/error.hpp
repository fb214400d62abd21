#pragma once

#include <stdexcept>
#include <string>

namespace tdlm {

// All library failures derive from tdlm::Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  int line() const { return line_; }

 private:
  int line_;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Raised when rates are requested where the in-level generator blows up.
class SingularityError : public Error {
 public:
  using Error::Error;
};

}  // namespace tdlm
