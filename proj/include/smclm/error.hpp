#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smclm {

enum class ErrorKind {
  config,
  dimension,
  length,
  lookup_miss,
  non_finite,
  io,
  format,
  input,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::length: return "length";
    case ErrorKind::lookup_miss: return "lookup_miss";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::input: return "input";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it to an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace smclm
