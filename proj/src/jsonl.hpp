#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace slicemend {

// Line-delimited JSON with a leading {"format_version":"1","type":...} header.
struct JsonLines {
  nlohmann::json header;
  // (1-based line number, object)
  std::vector<std::pair<std::size_t, nlohmann::json>> rows;
};

JsonLines read_jsonl(const std::string& path, std::string_view expected_type);
void write_jsonl(const std::string& path, const nlohmann::json& header,
                 const std::vector<nlohmann::json>& rows);

}  // namespace slicemend
