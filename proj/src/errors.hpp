#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace slicemend {

enum class ErrorKind {
  kParse,
  kSchema,
  kConflict,
  kDomain,
  kConfig,
  kPlanning,
  kBudget,
  kProtocol,
  kNumeric,
  kIo,
  kVersion,
  kAccounting,
  kReport,
  kSpec,
  kNoOp,
};

const char* to_string(ErrorKind kind);

// Every failure raised by the core carries a kind so that the C API can map it
// onto a stable status code. Ingestion errors also carry the 1-based line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message,
        std::optional<std::size_t> line = std::nullopt);

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> line_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline constexpr const char* kFormatVersion = "1";

// Raises a version error with a migration hint unless `found` is the supported
// format version.
void require_format_version(const std::string& found, const std::string& what);

}  // namespace slicemend
