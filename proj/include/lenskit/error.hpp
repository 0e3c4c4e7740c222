#pragma once

#include <stdexcept>
#include <string>

namespace lenskit {

// Exit codes shared by the CLI and the HTTP error mapping.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, numerical = 3 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::usage; }
  virtual const char* code() const { return "error"; }
};

// Malformed or inconsistent input data (files, ids, vectors).
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::data; }
  const char* code() const override { return "data_error"; }
};

// Invalid arguments or configuration supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
  const char* code() const override { return "invalid_argument"; }
};

// Non-finite values or a broken numerical guarantee.
class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::numerical; }
  const char* code() const override { return "numerical_failure"; }
};

// Operation not accepted in the session's current status.
class StateError : public Error {
 public:
  using Error::Error;
  const char* code() const override { return "invalid_state"; }
};

class NotFoundError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::data; }
  const char* code() const override { return "not_found"; }
};

// Another writer holds the session lock.
class BusyError : public Error {
 public:
  using Error::Error;
  const char* code() const override { return "session_busy"; }
};

// Count-table or other internal invariant breach; indicates a bug.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace lenskit
