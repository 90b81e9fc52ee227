#pragma once

#include <stdexcept>
#include <string>

namespace repprobe {

enum class ErrorClass { usage = 1, data = 2, numeric = 3 };

/// Base of every error raised by the toolkit. `kind()` is a stable short name
/// used in the CLI's machine-readable error line.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, ErrorClass cls, const std::string& what)
      : std::runtime_error(what), kind_(kind), cls_(cls) {}

  const char* kind() const noexcept { return kind_; }
  ErrorClass error_class() const noexcept { return cls_; }
  int exit_code() const noexcept { return static_cast<int>(cls_); }

 private:
  const char* kind_;
  ErrorClass cls_;
};

#define REPPROBE_DEFINE_ERROR(Name, cls)                                 \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(#Name, cls, what) {} \
  };

REPPROBE_DEFINE_ERROR(ConfigError, ErrorClass::usage)
REPPROBE_DEFINE_ERROR(FormatError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(TruncatedError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(EmptyError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(ValueError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(MissingError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(DuplicateIdError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(SchemaError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(JoinError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(ShapeError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(LookupError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(IoError, ErrorClass::data)
REPPROBE_DEFINE_ERROR(DivergenceError, ErrorClass::numeric)

#undef REPPROBE_DEFINE_ERROR

/// Rethrows `e` as the same error type with `context` prefixed to its message.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string msg = context + ": " + e.what();
#define REPPROBE_RETHROW_AS(Name) \
  if (dynamic_cast<const Name*>(&e)) throw Name(msg);
  REPPROBE_RETHROW_AS(ConfigError)
  REPPROBE_RETHROW_AS(FormatError)
  REPPROBE_RETHROW_AS(TruncatedError)
  REPPROBE_RETHROW_AS(EmptyError)
  REPPROBE_RETHROW_AS(ValueError)
  REPPROBE_RETHROW_AS(MissingError)
  REPPROBE_RETHROW_AS(DuplicateIdError)
  REPPROBE_RETHROW_AS(SchemaError)
  REPPROBE_RETHROW_AS(JoinError)
  REPPROBE_RETHROW_AS(ShapeError)
  REPPROBE_RETHROW_AS(LookupError)
  REPPROBE_RETHROW_AS(IoError)
  REPPROBE_RETHROW_AS(DivergenceError)
#undef REPPROBE_RETHROW_AS
  throw Error(e.kind(), e.error_class(), msg);
}

}  // namespace repprobe
