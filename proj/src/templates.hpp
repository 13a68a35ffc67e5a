#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace slicemend {

// Placeholder tokens are either `{name}` (lower-case identifier) or one of the
// hash forms `#1` / `#LABEL` used by the object-attribute prompt templates.
std::vector<std::string> placeholders(std::string_view tmpl);

// Replaces every placeholder with its binding. Any placeholder without a
// binding raises a config error naming the token and the template.
std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& bindings);

// Config error unless every placeholder in `tmpl` is one of `allowed`.
void require_placeholders_within(std::string_view tmpl,
                                 const std::vector<std::string>& allowed,
                                 std::string_view context);

}  // namespace slicemend
