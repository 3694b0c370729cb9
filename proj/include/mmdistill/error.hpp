#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmdistill {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based line number when one applies.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ": line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DuplicateIdError : public Error {
 public:
  explicit DuplicateIdError(const std::string& id)
      : Error("duplicate id: " + id), id_(id) {}

  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Phase-level failure in the orchestrator.
class PhaseError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmdistill
