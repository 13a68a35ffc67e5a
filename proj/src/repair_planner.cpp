#include "repair_planner.hpp"

#include <algorithm>
#include <cstdio>

#include "exact.hpp"
#include "jsonl.hpp"
#include "rng.hpp"
#include "templates.hpp"

namespace slicemend {

// ---------------------------------------------------------------------------
// TokenMap

void TokenMap::set(std::string attribute, std::string value, std::string phrase) {
  phrases_[{std::move(attribute), std::move(value)}] = std::move(phrase);
}

const std::string* TokenMap::find(const std::string& attribute,
                                  const std::string& value) const {
  auto it = phrases_.find({attribute, value});
  return it == phrases_.end() ? nullptr : &it->second;
}

TokenMap TokenMap::from_json(const json& doc, const AttributeSchema& schema) {
  require_format_version(require_string(doc, "format_version", "token map"), "token map");
  TokenMap map;
  if (doc.contains("entries")) {
    for (const auto& e : doc.at("entries")) {
      map.set(require_string(e, "attribute", "token map entry"),
              require_string(e, "value", "token map entry"),
              require_string(e, "phrase", "token map entry"));
    }
  }
  if (doc.contains("map")) {
    const json& compact = doc.at("map");
    if (!compact.is_object()) fail(ErrorKind::kParse, "token map: \"map\" must be an object");
    for (auto it = compact.begin(); it != compact.end(); ++it) {
      if (!it.value().is_string()) {
        fail(ErrorKind::kParse, "token map: phrase for \"" + it.key() + "\" must be a string");
      }
      bool resolved = false;
      for (const auto& attr : schema.attributes()) {
        for (const auto& value : attr.values) {
          if (value + attr.name == it.key()) {
            map.set(attr.name, value, it.value().get<std::string>());
            resolved = true;
          }
        }
      }
      if (!resolved) {
        fail(ErrorKind::kConfig, "token map key \"" + it.key() +
                                     "\" does not match any value+attribute in the schema");
      }
    }
  }
  return map;
}

TokenMap TokenMap::load(const std::string& path, const AttributeSchema& schema) {
  return from_json(parse_json_file(path), schema);
}

json TokenMap::to_json() const {
  json entries = json::array();
  for (const auto& [key, phrase] : phrases_) {
    entries.push_back({{"attribute", key.first}, {"value", key.second}, {"phrase", phrase}});
  }
  return {{"format_version", kFormatVersion}, {"entries", entries}};
}

// ---------------------------------------------------------------------------
// Planning

void PlanConfig::validate() const {
  if (!(overgen_factor >= 1.0)) {
    fail(ErrorKind::kConfig, "overgen_factor must be >= 1, got " + format_shortest(overgen_factor));
  }
  if (inference_steps < 1) fail(ErrorKind::kConfig, "inference_steps must be >= 1");
  DecimalRatio::from_double(overgen_factor);
}

std::uint64_t requested_sources(const PlanConfig& cfg) {
  cfg.validate();
  return ceil_scaled(cfg.target_count, DecimalRatio::from_double(cfg.overgen_factor));
}

std::vector<const PredictionRecord*> select_sources(const Dataset& ds, const Slice& slice,
                                                    const PlanConfig& cfg) {
  validate_slice(slice, ds.schema());
  if (ds.split_size(Split::kTrain) == 0) {
    fail(ErrorKind::kPlanning, "train split is empty");
  }
  std::vector<const PredictionRecord*> pool;
  for (auto row : ds.split_rows(Split::kTrain)) {
    const PredictionRecord& r = ds.records()[row];
    if (!slice.matches(r.attributes)) pool.push_back(&r);
  }
  if (pool.empty()) {
    fail(ErrorKind::kPlanning, "every train record already satisfies slice \"" +
                                   slice.key() + "\"; nothing to edit");
  }
  const std::uint64_t want = requested_sources(cfg);
  Rng rng(cfg.source_selection_seed);
  std::vector<const PredictionRecord*> out;
  out.reserve(want);
  if (want <= pool.size()) {
    // Partial Fisher-Yates: the first `want` positions are a uniform sample.
    for (std::size_t i = 0; i < want; ++i) {
      std::size_t j = i + rng.below(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (std::uint64_t i = 0; i < want; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

EditSpec build_edit_spec(const PredictionRecord& record, const Slice& slice) {
  EditSpec spec;
  spec.source_image_id = record.image_id;
  spec.preserved_label = record.label;
  spec.target_slice = slice;
  for (const auto& c : slice.conditions()) {
    auto it = record.attributes.find(c.attribute);
    std::string current = it == record.attributes.end() ? std::string(kUnknownValue) : it->second;
    if (current != c.value) spec.substitutions.push_back({c.attribute, current, c.value});
  }
  if (spec.substitutions.empty()) {
    fail(ErrorKind::kNoOp, "record \"" + record.image_id + "\" already lies in slice \"" +
                               slice.key() + "\"");
  }
  return spec;
}

PromptPayload render_prompt(const EditSpec& spec, const PlanConfig& cfg) {
  if (spec.substitutions.empty()) {
    fail(ErrorKind::kConfig, "edit spec for \"" + spec.source_image_id + "\" has no substitutions");
  }
  const std::string tmpl = cfg.prompt_template.empty() ? "#1" : cfg.prompt_template;
  std::map<std::string, std::string> bindings;
  std::string joined;
  for (const auto& c : spec.target_slice.conditions()) {
    const std::string* phrase = cfg.token_map.find(c.attribute, c.value);
    if (!phrase) {
      fail(ErrorKind::kConfig, "token map has no phrase for " + c.attribute + "=" + c.value);
    }
    if (!joined.empty()) joined += " and ";
    joined += *phrase;
    bindings["{" + c.attribute + "}"] = *phrase;
  }
  bindings["#1"] = joined;
  bindings["{value}"] = joined;
  bindings["#LABEL"] = spec.preserved_label;
  bindings["{label}"] = spec.preserved_label;

  const auto tokens = placeholders(tmpl);
  const bool has_joined = std::find(tokens.begin(), tokens.end(), "#1") != tokens.end() ||
                          std::find(tokens.begin(), tokens.end(), "{value}") != tokens.end();
  if (!has_joined) {
    for (const auto& c : spec.target_slice.conditions()) {
      const std::string token = "{" + c.attribute + "}";
      if (std::find(tokens.begin(), tokens.end(), token) == tokens.end()) {
        fail(ErrorKind::kConfig, "prompt template \"" + tmpl + "\" mentions neither #1 nor " +
                                     token + " for slice attribute \"" + c.attribute + "\"");
      }
    }
  }

  PromptPayload p;
  p.prompt = render_template(tmpl, bindings);
  p.condition_kind = cfg.condition_kind;
  p.inference_steps = cfg.inference_steps;
  return p;
}

std::map<std::string, std::string> apply_substitutions(
    std::map<std::string, std::string> attributes, const std::vector<Substitution>& subs) {
  for (const auto& s : subs) attributes[s.attribute] = s.new_value;
  return attributes;
}

std::vector<GenerationJob> plan(const Dataset& ds, const Slice& slice, const PlanConfig& cfg) {
  cfg.validate();
  validate_slice(slice, ds.schema());
  if (slice.empty()) fail(ErrorKind::kPlanning, "cannot plan edits for the empty slice");
  for (const auto& c : slice.conditions()) {
    if (!cfg.token_map.find(c.attribute, c.value)) {
      fail(ErrorKind::kConfig, "token map has no phrase for " + c.attribute + "=" + c.value);
    }
  }
  PlanConfig effective = cfg;
  if (effective.prompt_template.empty()) {
    for (const auto& c : slice.conditions()) {
      const auto& attr = ds.schema().attribute(*ds.schema().find(c.attribute));
      if (!attr.prompt_template.empty()) {
        effective.prompt_template = attr.prompt_template;
        break;
      }
    }
  }

  auto sources = select_sources(ds, slice, effective);
  std::vector<GenerationJob> jobs;
  jobs.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const PredictionRecord& src = *sources[i];
    GenerationJob job;
    char id[32];
    std::snprintf(id, sizeof(id), "job-%06zu", i + 1);
    job.job_id = id;
    job.spec = build_edit_spec(src, slice);
    job.prompt = render_prompt(job.spec, effective);
    job.source_ref = src.source_ref;
    job.source_attributes = src.attributes;
    job.seed = splitmix64(effective.source_selection_seed + i + 1);
    jobs.push_back(std::move(job));
  }
  return jobs;
}

// ---------------------------------------------------------------------------
// Jobs file

json job_to_json(const GenerationJob& job) {
  json subs = json::array();
  for (const auto& s : job.spec.substitutions) {
    subs.push_back({{"attribute", s.attribute}, {"from", s.old_value}, {"to", s.new_value}});
  }
  return {{"job_id", job.job_id},
          {"source_image_id", job.spec.source_image_id},
          {"source_ref", job.source_ref},
          {"label", job.spec.preserved_label},
          {"target_slice", job.spec.target_slice.key()},
          {"substitutions", subs},
          {"source_attributes", job.source_attributes},
          {"prompt", job.prompt.prompt},
          {"positive_prompt", job.prompt.positive_prompt},
          {"negative_prompt", job.prompt.negative_prompt},
          {"condition_kind", job.prompt.condition_kind},
          {"inference_steps", job.prompt.inference_steps},
          {"seed", job.seed}};
}

GenerationJob job_from_json(const json& obj) {
  constexpr std::string_view where = "job";
  GenerationJob job;
  try {
    job.job_id = require_string(obj, "job_id", where);
    job.spec.source_image_id = require_string(obj, "source_image_id", where);
    job.source_ref = obj.value("source_ref", "");
    job.spec.preserved_label = require_string(obj, "label", where);
    job.spec.target_slice = Slice::parse(require_string(obj, "target_slice", where));
    for (const auto& s : require_field(obj, "substitutions", where)) {
      job.spec.substitutions.push_back({require_string(s, "attribute", where),
                                        require_string(s, "from", where),
                                        require_string(s, "to", where)});
    }
    if (obj.contains("source_attributes")) {
      job.source_attributes =
          obj.at("source_attributes").get<std::map<std::string, std::string>>();
    }
    job.prompt.prompt = require_string(obj, "prompt", where);
    job.prompt.positive_prompt = obj.value("positive_prompt", kPositivePrompt);
    job.prompt.negative_prompt = obj.value("negative_prompt", kNegativePrompt);
    job.prompt.condition_kind = obj.value("condition_kind", "soft_hed");
    job.prompt.inference_steps = obj.value("inference_steps", 30u);
    job.seed = obj.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("job: ") + e.what());
  }
  if (job.spec.substitutions.empty()) {
    fail(ErrorKind::kParse, "job \"" + job.job_id + "\" has no substitutions");
  }
  return job;
}

void write_jobs(const std::string& path, const JobsFile& file) {
  json header = {{"format_version", kFormatVersion},
                 {"type", "generation_jobs"},
                 {"slice", file.slice.key()},
                 {"target_count", file.target_count},
                 {"overgen_factor", file.overgen_factor},
                 {"seed", file.seed},
                 {"job_count", file.jobs.size()}};
  std::vector<json> rows;
  rows.reserve(file.jobs.size());
  for (const auto& j : file.jobs) rows.push_back(job_to_json(j));
  write_jsonl(path, header, rows);
}

JobsFile read_jobs(const std::string& path) {
  JsonLines lines = read_jsonl(path, "generation_jobs");
  JobsFile file;
  file.slice = Slice::parse(lines.header.value("slice", ""));
  file.target_count = lines.header.value("target_count", std::uint64_t{0});
  file.overgen_factor = lines.header.value("overgen_factor", 1.0);
  file.seed = lines.header.value("seed", std::uint64_t{0});
  for (auto& [lineno, obj] : lines.rows) {
    try {
      file.jobs.push_back(job_from_json(obj));
    } catch (const Error& e) {
      throw Error(e.kind(), path + ": " + e.what(), lineno);
    }
  }
  return file;
}

}  // namespace slicemend
