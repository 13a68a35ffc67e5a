#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "exact.hpp"
#include "records.hpp"

namespace slicemend {

struct Condition {
  std::string attribute;
  std::string value;

  friend auto operator<=>(const Condition&, const Condition&) = default;
};

// A conjunction of attribute=value conditions kept sorted by attribute name,
// so equal slices compare and print identically.
class Slice {
 public:
  Slice() = default;
  explicit Slice(std::vector<Condition> conditions);

  // "hair=red,skin=brown"; whitespace around tokens is ignored.
  static Slice parse(std::string_view expr);

  const std::vector<Condition>& conditions() const { return conditions_; }
  std::size_t depth() const { return conditions_.size(); }
  bool empty() const { return conditions_.empty(); }
  std::string key() const;

  const Condition* find(std::string_view attribute) const;
  bool is_subset_of(const Slice& other) const;
  bool matches(const std::map<std::string, std::string>& attributes) const;

  friend auto operator<=>(const Slice&, const Slice&) = default;

 private:
  std::vector<Condition> conditions_;
};

// Schema error unless every condition names a schema attribute and one of its
// declared values.
void validate_slice(const Slice& slice, const AttributeSchema& schema);

struct Accuracy {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;

  double value() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

Accuracy split_accuracy(const Dataset& ds, Split split);

struct SliceStats {
  Slice slice;
  std::uint64_t train_support = 0;
  std::uint64_t val_support = 0;
  std::uint64_t train_size = 0;
  std::uint64_t val_size = 0;
  std::uint64_t val_correct = 0;
  double train_fraction = 0.0;
  double val_fraction = 0.0;
  std::optional<double> val_accuracy;  // only when val_support > 0
  std::optional<double> accuracy_gap;  // overall val accuracy - val_accuracy

  std::uint64_t support(Split split) const {
    return split == Split::kTrain ? train_support : val_support;
  }
  std::uint64_t split_size(Split split) const {
    return split == Split::kTrain ? train_size : val_size;
  }
};

struct MinerConfig {
  double rho = 0.05;
  double epsilon = 0.01;
  std::size_t max_depth = 3;
  std::uint64_t min_val_support = 20;
  // Specialisations of a slice are not enumerated once its train support
  // falls below this count. The slice itself is still evaluated.
  std::uint64_t min_train_support = 5;
  Split rarity_split = Split::kTrain;
  std::size_t top_k = 100;
  std::uint64_t max_candidates = 5'000'000;
  unsigned workers = 1;

  void validate() const;
  json to_json() const;
  // Fields absent from `obj` keep their defaults.
  static MinerConfig from_json(const json& obj);
};

enum class BugStatus { kBug, kNotBug, kInconclusive };

const char* to_string(BugStatus status);

SliceStats slice_stats(const Dataset& ds, const Slice& slice);
SliceStats make_stats(Slice slice, std::uint64_t train_support, std::uint64_t val_support,
                      std::uint64_t val_correct, std::uint64_t train_size,
                      const Accuracy& overall_val);

// Strict `<` on the configured rarity split, compared exactly.
bool is_rare(const SliceStats& stats, const MinerConfig& cfg);
// kInconclusive when val_support < cfg.min_val_support; otherwise kBug iff the
// slice is rare and its val accuracy is strictly below overall - epsilon.
BugStatus is_bug(const SliceStats& stats, const Accuracy& overall_val,
                 const MinerConfig& cfg);

struct BugSliceReport {
  std::vector<SliceStats> bugs;          // ranked, deduplicated, truncated to top_k
  std::vector<SliceStats> inconclusive;  // rare, below-threshold, too few val samples
  std::uint64_t bug_count = 0;           // after deduplication, before truncation
  std::uint64_t candidates_evaluated = 0;
  Accuracy overall_val;
  std::uint64_t train_size = 0;
  MinerConfig config;
};

BugSliceReport mine_bug_slices(const Dataset& ds, const MinerConfig& cfg);

struct RankedValue {
  std::string attribute;
  std::string value;
  double val_accuracy = 0.0;
  std::uint64_t val_support = 0;
  std::uint64_t val_correct = 0;
};

// Depth-1 bug slices sorted by ascending val accuracy, then larger val
// support, then attribute/value text.
std::vector<RankedValue> rank_attributes_by_error(const Dataset& ds, const MinerConfig& cfg);

// Ordering used by the report: accuracy gap descending, val support
// descending, slice key ascending. Exact on counts.
bool ranks_before(const SliceStats& a, const SliceStats& b);

json stats_to_json(const SliceStats& stats);
json report_to_json(const BugSliceReport& report);

}  // namespace slicemend
