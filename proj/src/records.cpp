#include "records.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "templates.hpp"

namespace slicemend {

const char* to_string(Split split) { return split == Split::kTrain ? "train" : "val"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  fail(ErrorKind::kParse, "split must be \"train\" or \"val\", got \"" +
                              std::string(text) + "\"");
}

// ---------------------------------------------------------------------------
// JSON helpers

json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }
}

const json& require_field(const json& obj, const char* field, std::string_view where) {
  if (!obj.is_object()) {
    fail(ErrorKind::kParse, std::string(where) + ": expected a JSON object");
  }
  auto it = obj.find(field);
  if (it == obj.end()) {
    fail(ErrorKind::kParse, std::string(where) + ": missing field \"" + field + "\"");
  }
  return *it;
}

std::string require_string(const json& obj, const char* field, std::string_view where) {
  const json& v = require_field(obj, field, where);
  if (!v.is_string()) {
    fail(ErrorKind::kParse,
         std::string(where) + ": field \"" + field + "\" must be a string");
  }
  return v.get<std::string>();
}

// ---------------------------------------------------------------------------
// AttributeSchema

namespace {

const std::vector<std::string> kPromptPlaceholders = {"#1", "#LABEL", "{value}",
                                                      "{label}"};
const std::vector<std::string> kQuestionPlaceholders = {"{value}", "{attribute}",
                                                        "{label}"};

}  // namespace

AttributeSchema::AttributeSchema(std::vector<Attribute> attributes)
    : attributes_(std::move(attributes)) {
  if (attributes_.size() >= kUnknown) fail(ErrorKind::kSchema, "too many attributes");
  for (std::size_t i = 0; i < attributes_.size(); ++i) {
    const Attribute& a = attributes_[i];
    if (a.name.empty()) fail(ErrorKind::kSchema, "attribute name must be non-empty");
    if (a.name.find_first_of("=,") != std::string::npos) {
      fail(ErrorKind::kSchema, "attribute name \"" + a.name + "\" may not contain '=' or ','");
    }
    if (!by_name_.emplace(a.name, i).second) {
      fail(ErrorKind::kSchema, "duplicate attribute name \"" + a.name + "\"");
    }
    if (a.values.empty()) {
      fail(ErrorKind::kSchema, "attribute \"" + a.name + "\" has an empty value set");
    }
    if (a.values.size() >= kUnknown) {
      fail(ErrorKind::kSchema, "attribute \"" + a.name + "\" has too many values");
    }
    std::set<std::string_view> seen;
    for (const auto& v : a.values) {
      if (v.empty() || v == kUnknownValue || v.find_first_of("=,") != std::string::npos) {
        fail(ErrorKind::kSchema, "attribute \"" + a.name + "\" has invalid value \"" + v +
                                     "\"");
      }
      if (!seen.insert(v).second) {
        fail(ErrorKind::kSchema,
             "attribute \"" + a.name + "\" lists value \"" + v + "\" twice");
      }
    }
    require_placeholders_within(a.prompt_template, kPromptPlaceholders,
                                "prompt_template of \"" + a.name + "\"");
    require_placeholders_within(a.question_template, kQuestionPlaceholders,
                                "question_template of \"" + a.name + "\"");
  }
}

AttributeSchema AttributeSchema::from_json(const json& doc) {
  constexpr std::string_view where = "schema";
  require_format_version(require_string(doc, "format_version", where), "schema");
  const json& attrs = require_field(doc, "attributes", where);
  if (!attrs.is_array()) fail(ErrorKind::kParse, "schema: \"attributes\" must be an array");
  std::vector<Attribute> out;
  for (const auto& a : attrs) {
    Attribute attr;
    attr.name = require_string(a, "name", where);
    const json& values = require_field(a, "values", where);
    if (!values.is_array()) {
      fail(ErrorKind::kParse, "schema: values of \"" + attr.name + "\" must be an array");
    }
    for (const auto& v : values) {
      if (!v.is_string()) {
        fail(ErrorKind::kParse, "schema: values of \"" + attr.name + "\" must be strings");
      }
      attr.values.push_back(v.get<std::string>());
    }
    attr.prompt_template = a.value("prompt_template", "");
    attr.question_template = a.value("question_template", "");
    out.push_back(std::move(attr));
  }
  return AttributeSchema(std::move(out));
}

AttributeSchema AttributeSchema::load(const std::string& path) {
  return from_json(parse_json_file(path));
}

json AttributeSchema::to_json() const {
  json attrs = json::array();
  for (const auto& a : attributes_) {
    attrs.push_back({{"name", a.name},
                     {"values", a.values},
                     {"prompt_template", a.prompt_template},
                     {"question_template", a.question_template}});
  }
  return {{"format_version", kFormatVersion}, {"attributes", attrs}};
}

std::optional<std::size_t> AttributeSchema::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::optional<AttributeSchema::ValueCode> AttributeSchema::value_code(
    std::size_t attribute, std::string_view value) const {
  const auto& values = attributes_[attribute].values;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == value) return static_cast<ValueCode>(i);
  }
  if (value == kUnknownValue) return kUnknown;
  return std::nullopt;
}

const std::string& AttributeSchema::value_name(std::size_t attribute,
                                               ValueCode code) const {
  static const std::string unknown(kUnknownValue);
  if (code == kUnknown || code == kAbsent) return unknown;
  return attributes_[attribute].values[code];
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(AttributeSchema schema, std::vector<PredictionRecord> records)
    : schema_(std::move(schema)), records_(std::move(records)) {
  const std::size_t m = schema_.size();
  codes_.assign(records_.size() * m, AttributeSchema::kAbsent);
  correct_.resize(records_.size());
  index_.resize(m);
  for (std::size_t a = 0; a < m; ++a) {
    index_[a].resize(schema_.attribute(a).values.size() * 2);
  }
  by_id_.reserve(records_.size());

  for (std::size_t row = 0; row < records_.size(); ++row) {
    const PredictionRecord& r = records_[row];
    if (r.image_id.empty()) fail(ErrorKind::kParse, "record has an empty image_id");
    if (!by_id_.emplace(r.image_id, static_cast<std::uint32_t>(row)).second) {
      fail(ErrorKind::kConflict, "duplicate image_id \"" + r.image_id + "\"");
    }
    for (const auto& [name, value] : r.attributes) {
      auto attr = schema_.find(name);
      if (!attr) {
        fail(ErrorKind::kSchema,
             "record \"" + r.image_id + "\" uses unknown attribute \"" + name + "\"");
      }
      auto code = schema_.value_code(*attr, value);
      if (!code) {
        fail(ErrorKind::kSchema, "record \"" + r.image_id + "\": value \"" + value +
                                     "\" is not in the value set of attribute \"" +
                                     name + "\"");
      }
      codes_[row * m + *attr] = *code;
    }
    correct_[row] = r.correct() ? 1 : 0;
    const int s = r.split == Split::kTrain ? 0 : 1;
    (s == 0 ? train_rows_ : val_rows_).push_back(static_cast<std::uint32_t>(row));
    for (std::size_t a = 0; a < m; ++a) {
      ValueCode c = codes_[row * m + a];
      if (c == AttributeSchema::kUnknown || c == AttributeSchema::kAbsent) continue;
      index_[a][c * 2 + s].push_back(static_cast<std::uint32_t>(row));
    }
  }
}

std::span<const std::uint32_t> Dataset::index_rows(std::size_t attribute,
                                                   ValueCode value, Split split) const {
  if (value == AttributeSchema::kUnknown || value == AttributeSchema::kAbsent) return {};
  return index_[attribute][value * 2 + (split == Split::kTrain ? 0 : 1)];
}

std::vector<std::string> Dataset::indexed_ids(std::string_view attribute,
                                              std::string_view value,
                                              Split split) const {
  auto attr = schema_.find(attribute);
  if (!attr) fail(ErrorKind::kSchema, "unknown attribute \"" + std::string(attribute) + "\"");
  auto code = schema_.value_code(*attr, value);
  if (!code) {
    fail(ErrorKind::kSchema, "value \"" + std::string(value) + "\" not in attribute \"" +
                                 std::string(attribute) + "\"");
  }
  std::vector<std::string> ids;
  for (auto row : index_rows(*attr, *code, split)) ids.push_back(records_[row].image_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

const PredictionRecord* Dataset::find(std::string_view image_id) const {
  auto it = by_id_.find(std::string(image_id));
  return it == by_id_.end() ? nullptr : &records_[it->second];
}

// ---------------------------------------------------------------------------
// Record I/O

PredictionRecord record_from_json(const json& obj, const AttributeSchema& schema) {
  constexpr std::string_view where = "record";
  PredictionRecord r;
  r.image_id = require_string(obj, "image_id", where);
  r.split = parse_split(require_string(obj, "split", where));
  r.label = require_string(obj, "label", where);
  r.prediction = require_string(obj, "prediction", where);
  r.source_ref = obj.value("source_ref", "");
  const json& attrs = require_field(obj, "attributes", where);
  if (!attrs.is_object()) fail(ErrorKind::kParse, "record: \"attributes\" must be an object");
  for (auto it = attrs.begin(); it != attrs.end(); ++it) {
    if (!it.value().is_string()) {
      fail(ErrorKind::kParse, "record: attribute \"" + it.key() + "\" must map to a string");
    }
    auto attr = schema.find(it.key());
    if (!attr) {
      fail(ErrorKind::kSchema, "unknown attribute \"" + it.key() + "\"");
    }
    const std::string value = it.value().get<std::string>();
    if (!schema.value_code(*attr, value)) {
      fail(ErrorKind::kSchema, "attribute \"" + it.key() + "\" has value \"" + value +
                                   "\" outside its value set");
    }
    r.attributes.emplace(it.key(), value);
  }
  return r;
}

json record_to_json(const PredictionRecord& r) {
  return {{"image_id", r.image_id},     {"split", to_string(r.split)},
          {"label", r.label},           {"prediction", r.prediction},
          {"attributes", r.attributes}, {"source_ref", r.source_ref}};
}

json records_header() {
  return {{"format_version", kFormatVersion}, {"type", "prediction_records"}};
}

namespace {

bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

template <typename OnRejected>
std::vector<PredictionRecord> read_lines(std::istream& in, const AttributeSchema& schema,
                                         OnRejected&& on_rejected) {
  std::vector<PredictionRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      if (!saw_header) throw Error(ErrorKind::kParse, "malformed header line", lineno);
      on_rejected(Error(ErrorKind::kParse, e.what(), lineno));
      continue;
    }
    if (!saw_header) {
      if (!obj.is_object() || !obj.contains("format_version")) {
        throw Error(ErrorKind::kVersion,
                    "record files start with a {\"format_version\": \"1\"} header line",
                    lineno);
      }
      require_format_version(obj.value("format_version", ""), "record file");
      saw_header = true;
      continue;
    }
    try {
      PredictionRecord r = record_from_json(obj, schema);
      if (!ids.insert(r.image_id).second) {
        throw Error(ErrorKind::kConflict, "duplicate image_id \"" + r.image_id + "\"");
      }
      records.push_back(std::move(r));
    } catch (const Error& e) {
      // Re-tag with the line number.
      std::string msg = e.what();
      auto colon = msg.find(": ");
      on_rejected(Error(e.kind(), colon == std::string::npos ? msg : msg.substr(colon + 2),
                        lineno));
    }
  }
  if (!saw_header) throw Error(ErrorKind::kVersion, "record file is empty (no header line)");
  return records;
}

}  // namespace

Dataset ingest_records(std::istream& in, const AttributeSchema& schema) {
  auto records = read_lines(in, schema, [](const Error& e) { throw e; });
  return Dataset(schema, std::move(records));
}

Dataset ingest_records(const std::string& path, const AttributeSchema& schema) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return ingest_records(in, schema);
}

IngestResult ingest_records_lenient(std::istream& in, const AttributeSchema& schema) {
  IngestResult result;
  auto records = read_lines(in, schema, [&](const Error& e) {
    std::string msg = e.what();
    result.rejected.push_back({e.line().value_or(0), e.kind(), msg});
  });
  result.dataset = Dataset(schema, std::move(records));
  return result;
}

IngestResult ingest_records_lenient(const std::string& path,
                                    const AttributeSchema& schema) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return ingest_records_lenient(in, schema);
}

void emit_records(std::span<const PredictionRecord> records, std::ostream& out) {
  out << records_header().dump() << '\n';
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

void emit_records(const Dataset& ds, std::ostream& out) { emit_records(ds.records(), out); }

void write_records_file(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  emit_records(ds, out);
}

double overall_accuracy(const Dataset& ds, Split split) {
  auto rows = ds.split_rows(split);
  if (rows.empty()) {
    fail(ErrorKind::kDomain, std::string("split \"") + to_string(split) + "\" is empty");
  }
  std::size_t correct = 0;
  for (auto row : rows) correct += ds.correct(row) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(rows.size());
}

}  // namespace slicemend
