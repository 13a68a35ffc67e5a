#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "records.hpp"
#include "slice_miner.hpp"

namespace slicemend {

struct Substitution {
  std::string attribute;
  std::string old_value;
  std::string new_value;

  friend bool operator==(const Substitution&, const Substitution&) = default;
};

// Minimal attribute edit turning a source record into a member of
// target_slice. The label never changes.
struct EditSpec {
  std::string source_image_id;
  std::vector<Substitution> substitutions;  // slice-condition order
  std::string preserved_label;
  Slice target_slice;
};

inline constexpr const char* kPositivePrompt = "best quality, extremely detailed";
inline constexpr const char* kNegativePrompt = "lowres, bad anatomy, bad hands";

struct PromptPayload {
  std::string prompt;
  std::string positive_prompt = kPositivePrompt;
  std::string negative_prompt = kNegativePrompt;
  std::string condition_kind = "soft_hed";
  std::uint32_t inference_steps = 30;
};

// (attribute, value) -> phrase used in generation prompts.
class TokenMap {
 public:
  void set(std::string attribute, std::string value, std::string phrase);
  const std::string* find(const std::string& attribute, const std::string& value) const;
  bool empty() const { return phrases_.empty(); }

  // Accepts {"format_version":"1","entries":[{"attribute","value","phrase"}]}
  // or the compact {"format_version":"1","map":{"redhair":"vibrant red hair"}}
  // form whose keys are value+attribute; compact keys are resolved against the
  // schema.
  static TokenMap from_json(const json& doc, const AttributeSchema& schema);
  static TokenMap load(const std::string& path, const AttributeSchema& schema);
  json to_json() const;

 private:
  std::map<std::pair<std::string, std::string>, std::string> phrases_;
};

struct PlanConfig {
  std::uint64_t target_count = 0;
  double overgen_factor = 1.43;
  TokenMap token_map;
  // `#1` expands to every slice phrase joined with " and "; `{attr}` expands
  // to the phrase for that slice attribute; `#LABEL` / `{label}` to the label.
  // Empty means: the schema prompt_template of the first slice attribute that
  // has one, else "#1".
  std::string prompt_template;
  std::uint64_t source_selection_seed = 0;
  std::string condition_kind = "soft_hed";
  std::uint32_t inference_steps = 30;

  void validate() const;
};

struct GenerationJob {
  std::string job_id;
  EditSpec spec;
  PromptPayload prompt;
  std::string source_ref;
  std::map<std::string, std::string> source_attributes;
  std::uint64_t seed = 0;
};

// ceil(target_count * overgen_factor), exact.
std::uint64_t requested_sources(const PlanConfig& cfg);

std::vector<const PredictionRecord*> select_sources(const Dataset& ds, const Slice& slice,
                                                    const PlanConfig& cfg);

EditSpec build_edit_spec(const PredictionRecord& record, const Slice& slice);

PromptPayload render_prompt(const EditSpec& spec, const PlanConfig& cfg);

std::vector<GenerationJob> plan(const Dataset& ds, const Slice& slice, const PlanConfig& cfg);

std::map<std::string, std::string> apply_substitutions(
    std::map<std::string, std::string> attributes, const std::vector<Substitution>& subs);

struct JobsFile {
  Slice slice;
  std::uint64_t target_count = 0;
  double overgen_factor = 0.0;
  std::uint64_t seed = 0;
  std::vector<GenerationJob> jobs;
};

json job_to_json(const GenerationJob& job);
GenerationJob job_from_json(const json& obj);
void write_jobs(const std::string& path, const JobsFile& file);
JobsFile read_jobs(const std::string& path);

}  // namespace slicemend
