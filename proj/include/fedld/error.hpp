#pragma once

#include <stdexcept>
#include <string>

namespace fedld {

enum class ErrorKind {
  shape,
  empty_input,
  label,
  config,
  divergence,
  io,
  parse,
  schema,
  degenerate,
  consistency,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::empty_input: return "empty-input";
    case ErrorKind::label: return "label";
    case ErrorKind::config: return "config";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::schema: return "schema";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::consistency: return "consistency";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code for the CLI: 2 config, 3 divergence, 4 I/O, 1 otherwise.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::parse:
    case ErrorKind::schema:
      return 2;
    case ErrorKind::divergence:
      return 3;
    case ErrorKind::io:
      return 4;
    default:
      return 1;
  }
}

}  // namespace fedld
