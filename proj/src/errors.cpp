#include "errors.hpp"

namespace slicemend {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kSchema: return "schema error";
    case ErrorKind::kConflict: return "conflict error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kPlanning: return "planning error";
    case ErrorKind::kBudget: return "budget error";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kVersion: return "version error";
    case ErrorKind::kAccounting: return "accounting error";
    case ErrorKind::kReport: return "report error";
    case ErrorKind::kSpec: return "spec error";
    case ErrorKind::kNoOp: return "no-op error";
  }
  return "error";
}

namespace {

std::string decorate(ErrorKind kind, const std::string& message,
                     std::optional<std::size_t> line) {
  std::string out = to_string(kind);
  if (line) out += " at line " + std::to_string(*line);
  out += ": ";
  out += message;
  return out;
}

}  // namespace

Error::Error(ErrorKind kind, const std::string& message,
             std::optional<std::size_t> line)
    : std::runtime_error(decorate(kind, message, line)),
      kind_(kind),
      line_(line) {}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

void require_format_version(const std::string& found, const std::string& what) {
  if (found == kFormatVersion) return;
  fail(ErrorKind::kVersion,
       what + " has format_version \"" + found + "\" but this build reads only \"" +
           kFormatVersion +
           "\"; re-export the file with a matching tool release or convert it "
           "to the v1 layout documented in README.md");
}

}  // namespace slicemend
