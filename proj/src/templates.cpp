#include "templates.hpp"

#include <algorithm>
#include <cctype>

#include "errors.hpp"

namespace slicemend {

namespace {

bool ident_char(char c) {
  return std::islower(static_cast<unsigned char>(c)) ||
         std::isdigit(static_cast<unsigned char>(c)) || c == '_';
}

// Length of the placeholder starting at tmpl[i], or 0 if there is none.
std::size_t token_length(std::string_view tmpl, std::size_t i) {
  if (tmpl[i] == '{') {
    std::size_t j = i + 1;
    while (j < tmpl.size() && ident_char(tmpl[j])) ++j;
    if (j > i + 1 && j < tmpl.size() && tmpl[j] == '}') return j - i + 1;
    return 0;
  }
  if (tmpl[i] == '#') {
    if (tmpl.substr(i, 6) == "#LABEL") return 6;
    if (i + 1 < tmpl.size() && std::isdigit(static_cast<unsigned char>(tmpl[i + 1]))) {
      return 2;
    }
  }
  return 0;
}

}  // namespace

std::vector<std::string> placeholders(std::string_view tmpl) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < tmpl.size();) {
    std::size_t n = token_length(tmpl, i);
    if (n == 0) {
      ++i;
      continue;
    }
    out.emplace_back(tmpl.substr(i, n));
    i += n;
  }
  return out;
}

std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& bindings) {
  std::string out;
  out.reserve(tmpl.size() + 32);
  for (std::size_t i = 0; i < tmpl.size();) {
    std::size_t n = token_length(tmpl, i);
    if (n == 0) {
      out.push_back(tmpl[i]);
      ++i;
      continue;
    }
    std::string token(tmpl.substr(i, n));
    auto it = bindings.find(token);
    if (it == bindings.end()) {
      fail(ErrorKind::kConfig, "unresolved placeholder " + token + " in template \"" +
                                   std::string(tmpl) + "\"");
    }
    out += it->second;
    i += n;
  }
  return out;
}

void require_placeholders_within(std::string_view tmpl,
                                 const std::vector<std::string>& allowed,
                                 std::string_view context) {
  for (const auto& token : placeholders(tmpl)) {
    if (std::find(allowed.begin(), allowed.end(), token) == allowed.end()) {
      fail(ErrorKind::kSchema, std::string(context) + " uses unsupported placeholder " +
                                   token);
    }
  }
}

}  // namespace slicemend
