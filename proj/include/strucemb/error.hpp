#ifndef STRUCEMB_ERROR_HPP
#define STRUCEMB_ERROR_HPP

#include <stdexcept>
#include <string>

namespace strucemb {

enum class ErrorCode {
  invalid_argument,
  duplicate_id,
  malformed_record,
  unknown_id,
  io,
  bad_magic,
  shape_mismatch,
  truncated,
  position_overflow,
  layer_mismatch,
  cache_mismatch,
  degenerate,
  non_finite,
};

/// Broad class of failure, mapped onto process exit codes by the CLI.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

inline ErrorKind kind_of(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument:
      return ErrorKind::usage;
    case ErrorCode::degenerate:
    case ErrorCode::non_finite:
      return ErrorKind::numeric;
    default:
      return ErrorKind::data;
  }
}

inline const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::duplicate_id: return "duplicate_id";
    case ErrorCode::malformed_record: return "malformed_record";
    case ErrorCode::unknown_id: return "unknown_id";
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::position_overflow: return "position_overflow";
    case ErrorCode::layer_mismatch: return "layer_mismatch";
    case ErrorCode::cache_mismatch: return "cache_mismatch";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::non_finite: return "non_finite";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorKind kind() const noexcept { return kind_of(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace strucemb

#endif  // STRUCEMB_ERROR_HPP
