#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "protocol.hpp"
#include "repair_planner.hpp"

namespace slicemend {

enum class Task { kObject, kFace };

Task parse_task(std::string_view text);
const char* to_string(Task task);

struct AttributeQuestion {
  std::string attribute;
  std::string value;
  std::string question;
};

struct QuestionSet {
  std::vector<AttributeQuestion> attribute_questions;  // substitution order
  std::string label_question;
  std::string instruction = kFilterInstruction;

  // Attribute questions followed by the label question.
  std::vector<std::string> all() const;
};

QuestionSet build_questions(const EditSpec& spec, const AttributeSchema& schema, Task task);

enum class Decision { kKeep, kReject, kNeedsReview };

const char* to_string(Decision d);
Decision parse_decision(std::string_view text);

struct FilterVerdict {
  std::string job_id;
  std::vector<std::uint8_t> per_question;  // 1 = pass; empty for needs_review
  Decision decision = Decision::kNeedsReview;
  std::vector<std::string> reasons;
};

struct RateCounter {
  std::uint64_t attempts = 0;
  std::uint64_t passes = 0;

  double rate() const {
    return attempts == 0 ? 0.0 : static_cast<double>(passes) / static_cast<double>(attempts);
  }
};

struct PassRateLedger {
  std::map<std::pair<std::string, std::string>, RateCounter> attributes;
  RateCounter label;
  std::uint64_t kept = 0;
  std::uint64_t rejected = 0;
  std::uint64_t needs_review = 0;
  // Jobs whose generation failed never reach the filter; counted apart.
  std::uint64_t generation_failed = 0;

  // kept / (kept + rejected)
  double keep_fraction() const;
  json to_json() const;
  static PassRateLedger from_json(const json& doc);
};

// One planned edit as seen by the filter stage.
struct FilterJob {
  std::string job_id;
  EditSpec spec;
  bool generation_ok = true;
  std::string generated_ref;
};

std::vector<FilterJob> filter_jobs(const std::vector<GenerationJob>& jobs,
                                   const std::vector<GenerationResponse>& generations);

// Requests for the jobs whose generation succeeded, in job order.
std::vector<FilterRequest> build_filter_requests(const std::vector<FilterJob>& jobs,
                                                 const AttributeSchema& schema, Task task);

struct FilterOutcome {
  std::vector<FilterVerdict> verdicts;  // job order
  PassRateLedger ledger;
};

// Responses are matched to jobs by job_id. A job whose generation succeeded
// but has no response raises an accounting error.
FilterOutcome decide(const std::vector<FilterResponse>& responses,
                     const std::vector<FilterJob>& jobs);

FilterOutcome run_filter(const std::vector<FilterJob>& jobs, const AttributeSchema& schema,
                         Task task, BackendClient& client);

json verdict_to_json(const FilterVerdict& v);
FilterVerdict verdict_from_json(const json& obj);
void write_verdicts(const std::string& path, const std::vector<FilterVerdict>& verdicts);
std::vector<FilterVerdict> read_verdicts(const std::string& path);

}  // namespace slicemend
