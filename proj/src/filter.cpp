#include "filter.hpp"

#include <unordered_map>

#include "jsonl.hpp"
#include "templates.hpp"

namespace slicemend {

namespace {

constexpr const char* kObjectQuestion = "Does the {label} have {value} {attribute}?";
constexpr const char* kFaceQuestion = "Does the person in this picture have {value} {attribute}?";
constexpr const char* kObjectLabelQuestion = "Is there a {label} in the picture?";
constexpr const char* kFaceLabelQuestion = "Is the person in this picture {label}?";

}  // namespace

Task parse_task(std::string_view text) {
  if (text == "object") return Task::kObject;
  if (text == "face") return Task::kFace;
  fail(ErrorKind::kConfig, "task must be \"object\" or \"face\", got \"" + std::string(text) + "\"");
}

const char* to_string(Task task) { return task == Task::kObject ? "object" : "face"; }

const char* to_string(Decision d) {
  switch (d) {
    case Decision::kKeep: return "keep";
    case Decision::kReject: return "reject";
    case Decision::kNeedsReview: return "needs_review";
  }
  return "needs_review";
}

Decision parse_decision(std::string_view text) {
  if (text == "keep") return Decision::kKeep;
  if (text == "reject") return Decision::kReject;
  if (text == "needs_review") return Decision::kNeedsReview;
  fail(ErrorKind::kParse, "unknown decision \"" + std::string(text) + "\"");
}

std::vector<std::string> QuestionSet::all() const {
  std::vector<std::string> out;
  out.reserve(attribute_questions.size() + 1);
  for (const auto& q : attribute_questions) out.push_back(q.question);
  out.push_back(label_question);
  return out;
}

QuestionSet build_questions(const EditSpec& spec, const AttributeSchema& schema, Task task) {
  if (spec.substitutions.empty()) {
    fail(ErrorKind::kConfig, "edit spec for \"" + spec.source_image_id + "\" has no substitutions");
  }
  QuestionSet qs;
  for (const auto& s : spec.substitutions) {
    auto index = schema.find(s.attribute);
    if (!index) fail(ErrorKind::kSchema, "unknown attribute \"" + s.attribute + "\"");
    const Attribute& attr = schema.attribute(*index);
    std::string tmpl = attr.question_template;
    if (tmpl.empty()) tmpl = task == Task::kObject ? kObjectQuestion : kFaceQuestion;
    qs.attribute_questions.push_back(
        {s.attribute, s.new_value,
         render_template(tmpl, {{"{value}", s.new_value},
                                {"{attribute}", s.attribute},
                                {"{label}", spec.preserved_label}})});
  }
  qs.label_question =
      render_template(task == Task::kObject ? kObjectLabelQuestion : kFaceLabelQuestion,
                      {{"{label}", spec.preserved_label}});
  return qs;
}

// ---------------------------------------------------------------------------
// Ledger

double PassRateLedger::keep_fraction() const {
  const std::uint64_t decided = kept + rejected;
  return decided == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(decided);
}

json PassRateLedger::to_json() const {
  json attrs = json::array();
  for (const auto& [key, c] : attributes) {
    attrs.push_back({{"attribute", key.first},
                     {"value", key.second},
                     {"attempts", c.attempts},
                     {"passes", c.passes},
                     {"pass_rate", c.rate()}});
  }
  return {{"format_version", kFormatVersion},
          {"type", "pass_rate_ledger"},
          {"attributes", attrs},
          {"label", {{"attempts", label.attempts}, {"passes", label.passes}, {"pass_rate", label.rate()}}},
          {"kept", kept},
          {"rejected", rejected},
          {"needs_review", needs_review},
          {"generation_failed", generation_failed},
          {"keep_fraction", keep_fraction()}};
}

PassRateLedger PassRateLedger::from_json(const json& doc) {
  require_format_version(require_string(doc, "format_version", "ledger"), "ledger");
  PassRateLedger l;
  try {
    for (const auto& a : doc.at("attributes")) {
      l.attributes[{a.at("attribute").get<std::string>(), a.at("value").get<std::string>()}] =
          {a.at("attempts").get<std::uint64_t>(), a.at("passes").get<std::uint64_t>()};
    }
    l.label = {doc.at("label").at("attempts").get<std::uint64_t>(),
               doc.at("label").at("passes").get<std::uint64_t>()};
    l.kept = doc.at("kept").get<std::uint64_t>();
    l.rejected = doc.at("rejected").get<std::uint64_t>();
    l.needs_review = doc.at("needs_review").get<std::uint64_t>();
    l.generation_failed = doc.value("generation_failed", std::uint64_t{0});
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("ledger: ") + e.what());
  }
  return l;
}

// ---------------------------------------------------------------------------
// Decisions

std::vector<FilterJob> filter_jobs(const std::vector<GenerationJob>& jobs,
                                   const std::vector<GenerationResponse>& generations) {
  std::unordered_map<std::string, const GenerationResponse*> by_id;
  for (const auto& g : generations) by_id[g.job_id] = &g;
  std::vector<FilterJob> out;
  out.reserve(jobs.size());
  for (const auto& j : jobs) {
    auto it = by_id.find(j.job_id);
    if (it == by_id.end()) {
      fail(ErrorKind::kAccounting, "no generation result for job \"" + j.job_id + "\"");
    }
    FilterJob f;
    f.job_id = j.job_id;
    f.spec = j.spec;
    f.generation_ok = it->second->status == GenerationStatus::kOk;
    f.generated_ref = it->second->generated_ref;
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<FilterRequest> build_filter_requests(const std::vector<FilterJob>& jobs,
                                                 const AttributeSchema& schema, Task task) {
  std::vector<FilterRequest> out;
  for (const auto& j : jobs) {
    if (!j.generation_ok) continue;
    QuestionSet qs = build_questions(j.spec, schema, task);
    FilterRequest r;
    r.job_id = j.job_id;
    r.generated_ref = j.generated_ref;
    r.questions = qs.all();
    r.instruction = qs.instruction;
    out.push_back(std::move(r));
  }
  return out;
}

FilterOutcome decide(const std::vector<FilterResponse>& responses,
                     const std::vector<FilterJob>& jobs) {
  std::unordered_map<std::string, const FilterResponse*> by_id;
  for (const auto& r : responses) {
    if (!by_id.emplace(r.job_id, &r).second) {
      fail(ErrorKind::kAccounting, "duplicate filter response for job \"" + r.job_id + "\"");
    }
  }
  FilterOutcome out;
  out.verdicts.reserve(jobs.size());
  PassRateLedger& ledger = out.ledger;
  for (const auto& job : jobs) {
    FilterVerdict v;
    v.job_id = job.job_id;
    if (!job.generation_ok) {
      v.decision = Decision::kReject;
      v.reasons.push_back("generation failed");
      ++ledger.generation_failed;
      out.verdicts.push_back(std::move(v));
      continue;
    }
    auto it = by_id.find(job.job_id);
    if (it == by_id.end()) {
      fail(ErrorKind::kAccounting, "no filter response for job \"" + job.job_id + "\"");
    }
    const FilterResponse& resp = *it->second;
    if (!resp.transport_ok || !resp.parsed) {
      v.decision = Decision::kNeedsReview;
      v.reasons.push_back(!resp.transport_ok ? "transport failure: " + resp.error
                                             : "undecided answer: \"" + resp.raw_answer + "\"");
      ++ledger.needs_review;
      out.verdicts.push_back(std::move(v));
      continue;
    }
    const auto& answers = *resp.parsed;
    const auto& subs = job.spec.substitutions;
    if (answers.size() != subs.size() + 1) {
      fail(ErrorKind::kAccounting, "job \"" + job.job_id + "\": " +
                                       std::to_string(answers.size()) + " answers for " +
                                       std::to_string(subs.size() + 1) + " questions");
    }
    bool all_pass = true;
    for (std::size_t q = 0; q < answers.size(); ++q) {
      const bool pass = answers[q] == 1;
      all_pass = all_pass && pass;
      RateCounter& c = q < subs.size()
                           ? ledger.attributes[{subs[q].attribute, subs[q].new_value}]
                           : ledger.label;
      ++c.attempts;
      c.passes += pass ? 1 : 0;
      if (!pass) {
        v.reasons.push_back(q < subs.size() ? "failed " + subs[q].attribute + "=" + subs[q].new_value
                                            : std::string("failed label"));
      }
    }
    v.per_question = answers;
    v.decision = all_pass ? Decision::kKeep : Decision::kReject;
    ++(all_pass ? ledger.kept : ledger.rejected);
    out.verdicts.push_back(std::move(v));
  }
  return out;
}

FilterOutcome run_filter(const std::vector<FilterJob>& jobs, const AttributeSchema& schema,
                         Task task, BackendClient& client) {
  auto requests = build_filter_requests(jobs, schema, task);
  auto responses = client.filter_batch(requests);
  return decide(responses, jobs);
}

// ---------------------------------------------------------------------------
// Verdicts file

json verdict_to_json(const FilterVerdict& v) {
  return {{"job_id", v.job_id},
          {"decision", to_string(v.decision)},
          {"per_question", v.per_question},
          {"reasons", v.reasons}};
}

FilterVerdict verdict_from_json(const json& obj) {
  FilterVerdict v;
  v.job_id = require_string(obj, "job_id", "verdict");
  v.decision = parse_decision(require_string(obj, "decision", "verdict"));
  try {
    v.per_question = obj.value("per_question", std::vector<std::uint8_t>{});
    v.reasons = obj.value("reasons", std::vector<std::string>{});
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("verdict: ") + e.what());
  }
  return v;
}

void write_verdicts(const std::string& path, const std::vector<FilterVerdict>& verdicts) {
  std::vector<json> rows;
  rows.reserve(verdicts.size());
  for (const auto& v : verdicts) rows.push_back(verdict_to_json(v));
  write_jsonl(path,
              {{"format_version", kFormatVersion}, {"type", "filter_verdicts"},
               {"count", verdicts.size()}},
              rows);
}

std::vector<FilterVerdict> read_verdicts(const std::string& path) {
  JsonLines lines = read_jsonl(path, "filter_verdicts");
  std::vector<FilterVerdict> out;
  for (auto& [lineno, obj] : lines.rows) {
    try {
      out.push_back(verdict_from_json(obj));
    } catch (const Error& e) {
      throw Error(e.kind(), path + ": " + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace slicemend
