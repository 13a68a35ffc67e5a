#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace slicemend {

using json = nlohmann::json;

enum class Split { kTrain, kVal };

const char* to_string(Split split);
Split parse_split(std::string_view text);

inline constexpr std::string_view kUnknownValue = "unknown";

struct Attribute {
  std::string name;
  std::vector<std::string> values;
  // Generation phrase template (`#1`, `#LABEL`, `{value}`, `{label}`).
  std::string prompt_template;
  // Verification question template (`{value}`, `{attribute}`, `{label}`).
  // Empty means the filter falls back to its task default.
  std::string question_template;
};

class AttributeSchema {
 public:
  using ValueCode = std::uint16_t;
  static constexpr ValueCode kUnknown = 0xFFFE;
  // The record omitted the attribute; treated like kUnknown for slicing but
  // kept distinct so emission reproduces the input.
  static constexpr ValueCode kAbsent = 0xFFFF;

  AttributeSchema() = default;
  explicit AttributeSchema(std::vector<Attribute> attributes);

  static AttributeSchema from_json(const json& doc);
  static AttributeSchema load(const std::string& path);
  json to_json() const;

  std::size_t size() const { return attributes_.size(); }
  const std::vector<Attribute>& attributes() const { return attributes_; }
  const Attribute& attribute(std::size_t index) const { return attributes_[index]; }

  std::optional<std::size_t> find(std::string_view name) const;
  std::optional<ValueCode> value_code(std::size_t attribute,
                                      std::string_view value) const;
  const std::string& value_name(std::size_t attribute, ValueCode code) const;

 private:
  std::vector<Attribute> attributes_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

struct PredictionRecord {
  std::string image_id;
  Split split = Split::kTrain;
  std::string label;
  std::string prediction;
  std::map<std::string, std::string> attributes;
  std::string source_ref;

  bool correct() const { return prediction == label; }
};

// Immutable after construction; every accessor is safe for concurrent reads.
class Dataset {
 public:
  using ValueCode = AttributeSchema::ValueCode;

  Dataset() = default;
  // Validates every record against the schema; throws on the first violation.
  Dataset(AttributeSchema schema, std::vector<PredictionRecord> records);

  const AttributeSchema& schema() const { return schema_; }
  std::span<const PredictionRecord> records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  std::size_t split_size(Split split) const { return split_rows(split).size(); }
  std::span<const std::uint32_t> split_rows(Split split) const {
    return split == Split::kTrain ? train_rows_ : val_rows_;
  }

  ValueCode code(std::size_t row, std::size_t attribute) const {
    return codes_[row * schema_.size() + attribute];
  }
  bool correct(std::size_t row) const { return correct_[row] != 0; }

  // Row numbers (ascending) of the records in `split` whose attribute equals
  // the value.
  std::span<const std::uint32_t> index_rows(std::size_t attribute, ValueCode value,
                                            Split split) const;
  // Sorted image ids for an (attribute, value, split) index entry.
  std::vector<std::string> indexed_ids(std::string_view attribute,
                                       std::string_view value, Split split) const;

  const PredictionRecord* find(std::string_view image_id) const;

 private:
  AttributeSchema schema_;
  std::vector<PredictionRecord> records_;
  std::vector<ValueCode> codes_;
  std::vector<std::uint8_t> correct_;
  std::vector<std::uint32_t> train_rows_;
  std::vector<std::uint32_t> val_rows_;
  // [attribute][value][split] -> rows
  std::vector<std::vector<std::vector<std::uint32_t>>> index_;
  std::unordered_map<std::string, std::uint32_t> by_id_;
};

struct IngestRejection {
  std::size_t line = 0;
  ErrorKind kind = ErrorKind::kParse;
  std::string message;
};

struct IngestResult {
  Dataset dataset;
  std::vector<IngestRejection> rejected;
};

// Strict ingestion: the first bad line raises an Error carrying its line.
Dataset ingest_records(const std::string& path, const AttributeSchema& schema);
Dataset ingest_records(std::istream& in, const AttributeSchema& schema);
// Lenient ingestion: bad lines are skipped and reported.
IngestResult ingest_records_lenient(std::istream& in, const AttributeSchema& schema);
IngestResult ingest_records_lenient(const std::string& path,
                                    const AttributeSchema& schema);

PredictionRecord record_from_json(const json& obj, const AttributeSchema& schema);
json record_to_json(const PredictionRecord& record);

json records_header();
void emit_records(const Dataset& ds, std::ostream& out);
void emit_records(std::span<const PredictionRecord> records, std::ostream& out);
void write_records_file(const Dataset& ds, const std::string& path);

double overall_accuracy(const Dataset& ds, Split split);

// Shared JSON helpers for the versioned file formats.
json parse_json_file(const std::string& path);
const json& require_field(const json& obj, const char* field, std::string_view where);
std::string require_string(const json& obj, const char* field, std::string_view where);

}  // namespace slicemend
