#include "jsonl.hpp"

#include <fstream>

#include "errors.hpp"

namespace slicemend {

JsonLines read_jsonl(const std::string& path, std::string_view expected_type) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  JsonLines out;
  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::kParse, path + ": " + e.what(), lineno);
    }
    if (!obj.is_object()) throw Error(ErrorKind::kParse, path + ": expected an object", lineno);
    if (!saw_header) {
      if (!obj.contains("format_version")) {
        throw Error(ErrorKind::kVersion, path + ": missing format_version header", lineno);
      }
      require_format_version(obj.value("format_version", ""), path);
      const std::string type = obj.value("type", "");
      if (type != expected_type) {
        throw Error(ErrorKind::kParse,
                    path + ": expected a \"" + std::string(expected_type) +
                        "\" file, found \"" + type + "\"",
                    lineno);
      }
      out.header = std::move(obj);
      saw_header = true;
      continue;
    }
    out.rows.emplace_back(lineno, std::move(obj));
  }
  if (!saw_header) fail(ErrorKind::kVersion, path + ": empty file (no header line)");
  return out;
}

void write_jsonl(const std::string& path, const nlohmann::json& header,
                 const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << header.dump() << '\n';
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed for " + path);
}

}  // namespace slicemend
