#ifndef CONVCAST_ERROR_HPP
#define CONVCAST_ERROR_HPP

#include <stdexcept>
#include <string>

namespace convcast {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input file violates its record schema. Carries the 1-based line number.
class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Failure talking to a chat-completion endpoint.
class BackendError : public Error {
 public:
  enum class Kind { kAuth, kRateLimited, kTransient, kMalformedReply, kOther };

  BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }
  bool retryable() const noexcept {
    return kind_ == Kind::kRateLimited || kind_ == Kind::kTransient;
  }

 private:
  Kind kind_;
};

/// Wraps an error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace convcast

#endif  // CONVCAST_ERROR_HPP
