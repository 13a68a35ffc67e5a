#include "augmentor.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

#include "jsonl.hpp"

namespace slicemend {

std::string SyntheticEntry::image_id() const {
  return "syn/" + provenance.slice.key() + "/" + provenance.job_id;
}

AugmentationManifest build_manifest(const Dataset& base, const std::vector<GenerationJob>& jobs,
                                    const std::vector<GenerationResponse>& generations,
                                    const std::vector<FilterVerdict>& verdicts,
                                    std::uint64_t target_count,
                                    const std::string& base_dataset_ref) {
  std::unordered_map<std::string, const GenerationResponse*> gen_by_id;
  for (const auto& g : generations) gen_by_id[g.job_id] = &g;
  std::unordered_map<std::string, const FilterVerdict*> verdict_by_id;
  for (const auto& v : verdicts) verdict_by_id[v.job_id] = &v;

  AugmentationManifest m;
  m.base_dataset_ref = base_dataset_ref;
  std::map<std::string, std::uint64_t> kept_per_slice;
  for (const auto& job : jobs) {
    auto v = verdict_by_id.find(job.job_id);
    if (v == verdict_by_id.end()) {
      fail(ErrorKind::kAccounting, "no verdict for job \"" + job.job_id + "\"");
    }
    if (v->second->decision != Decision::kKeep) continue;
    auto g = gen_by_id.find(job.job_id);
    if (g == gen_by_id.end() || g->second->status != GenerationStatus::kOk) {
      fail(ErrorKind::kAccounting, "job \"" + job.job_id + "\" is kept but has no generated image");
    }
    const std::string key = job.spec.target_slice.key();
    if (kept_per_slice[key]++ >= target_count) continue;

    const PredictionRecord* src = base.find(job.spec.source_image_id);
    if (!src) {
      fail(ErrorKind::kAccounting, "job \"" + job.job_id + "\": source \"" +
                                       job.spec.source_image_id + "\" is not in the base dataset");
    }
    if (src->label != job.spec.preserved_label) {
      fail(ErrorKind::kAccounting, "job \"" + job.job_id + "\": label differs from its source");
    }
    SyntheticEntry e;
    e.generated_ref = g->second->generated_ref;
    e.label = src->label;
    e.attributes = apply_substitutions(src->attributes, job.spec.substitutions);
    e.provenance = {src->image_id, job.spec.target_slice, job.job_id};
    if (!e.provenance.slice.matches(e.attributes)) {
      fail(ErrorKind::kAccounting, "job \"" + job.job_id + "\": edited attributes miss slice " + key);
    }
    m.entries.push_back(std::move(e));
    ++m.counts_per_slice[key];
  }
  std::set<std::string> slice_keys;
  for (const auto& job : jobs) slice_keys.insert(job.spec.target_slice.key());
  for (const auto& key : slice_keys) {
    m.target_per_slice[key] = target_count;
    const std::uint64_t have = m.counts_per_slice[key];
    if (have < target_count) {
      m.warnings.push_back("shortfall: " + std::to_string(have) + " of " +
                           std::to_string(target_count) + " kept for slice " + key);
    }
  }
  if (jobs.empty() && target_count > 0) {
    m.warnings.push_back("shortfall: 0 of " + std::to_string(target_count) + " kept (no jobs)");
  }
  return m;
}

AugmentationManifest merge_manifests(const std::vector<AugmentationManifest>& parts) {
  AugmentationManifest m;
  std::set<std::string> ids;
  for (const auto& p : parts) {
    if (m.base_dataset_ref.empty()) m.base_dataset_ref = p.base_dataset_ref;
    for (const auto& e : p.entries) {
      if (!ids.insert(e.image_id()).second) {
        fail(ErrorKind::kConflict, "synthetic entry \"" + e.image_id() + "\" appears twice");
      }
      m.entries.push_back(e);
    }
    for (const auto& [k, n] : p.counts_per_slice) m.counts_per_slice[k] += n;
    for (const auto& [k, n] : p.target_per_slice) m.target_per_slice[k] += n;
    m.warnings.insert(m.warnings.end(), p.warnings.begin(), p.warnings.end());
  }
  return m;
}

std::vector<PredictionRecord> synthetic_records(const AugmentationManifest& manifest) {
  std::vector<PredictionRecord> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    PredictionRecord r;
    r.image_id = e.image_id();
    r.split = Split::kTrain;
    r.label = e.label;
    r.prediction = e.label;
    r.attributes = e.attributes;
    r.source_ref = e.generated_ref;
    out.push_back(std::move(r));
  }
  return out;
}

Dataset augmented_dataset(const Dataset& base, const AugmentationManifest& manifest) {
  std::vector<PredictionRecord> records(base.records().begin(), base.records().end());
  for (auto& r : synthetic_records(manifest)) records.push_back(std::move(r));
  return Dataset(base.schema(), std::move(records));
}

// ---------------------------------------------------------------------------
// Manifest file

json entry_to_json(const SyntheticEntry& e) {
  return {{"image_id", e.image_id()},
          {"generated_ref", e.generated_ref},
          {"label", e.label},
          {"attributes", e.attributes},
          {"provenance",
           {{"source_image_id", e.provenance.source_image_id},
            {"slice", e.provenance.slice.key()},
            {"job_id", e.provenance.job_id}}},
          {"weight", e.weight}};
}

SyntheticEntry entry_from_json(const json& obj) {
  constexpr std::string_view where = "manifest entry";
  SyntheticEntry e;
  try {
    e.generated_ref = require_string(obj, "generated_ref", where);
    e.label = require_string(obj, "label", where);
    e.attributes = require_field(obj, "attributes", where).get<std::map<std::string, std::string>>();
    const json& p = require_field(obj, "provenance", where);
    e.provenance.source_image_id = require_string(p, "source_image_id", where);
    e.provenance.slice = Slice::parse(require_string(p, "slice", where));
    e.provenance.job_id = require_string(p, "job_id", where);
    e.weight = obj.value("weight", 1.0);
  } catch (const json::exception& ex) {
    fail(ErrorKind::kParse, std::string("manifest entry: ") + ex.what());
  }
  if (!e.provenance.slice.matches(e.attributes)) {
    fail(ErrorKind::kParse, "manifest entry for job \"" + e.provenance.job_id +
                                "\" does not satisfy its slice");
  }
  return e;
}

void write_manifest(const std::string& path, const AugmentationManifest& m) {
  std::vector<json> rows;
  rows.reserve(m.entries.size());
  for (const auto& e : m.entries) rows.push_back(entry_to_json(e));
  json header = {{"format_version", kFormatVersion},
                 {"type", "augmentation_manifest"},
                 {"base_dataset_ref", m.base_dataset_ref},
                 {"synthetic_count", m.entries.size()},
                 {"counts_per_slice", m.counts_per_slice},
                 {"target_per_slice", m.target_per_slice},
                 {"warnings", m.warnings}};
  write_jsonl(path, header, rows);
}

AugmentationManifest read_manifest(const std::string& path) {
  JsonLines lines = read_jsonl(path, "augmentation_manifest");
  AugmentationManifest m;
  m.base_dataset_ref = lines.header.value("base_dataset_ref", "");
  m.target_per_slice =
      lines.header.value("target_per_slice", std::map<std::string, std::uint64_t>{});
  m.warnings = lines.header.value("warnings", std::vector<std::string>{});
  for (auto& [lineno, obj] : lines.rows) {
    try {
      m.entries.push_back(entry_from_json(obj));
    } catch (const Error& e) {
      throw Error(e.kind(), path + ": " + e.what(), lineno);
    }
    ++m.counts_per_slice[m.entries.back().provenance.slice.key()];
  }
  return m;
}

json retrain_stub(const std::string& manifest_path) {
  return {{"format_version", kFormatVersion},
          {"type", "retrain_config"},
          {"manifest", manifest_path},
          {"epochs", 20},
          {"batch_size", 64},
          {"learning_rate", 1e-4},
          {"weight_decay", 1e-3},
          {"optimizer", "adam"},
          {"loss", "cross_entropy"},
          {"synthetic_weight", 1.0}};
}

// ---------------------------------------------------------------------------
// Report

namespace {

std::vector<std::string> val_ids(const Dataset& ds) {
  std::vector<std::string> ids;
  ids.reserve(ds.split_size(Split::kVal));
  for (auto row : ds.split_rows(Split::kVal)) ids.push_back(ds.records()[row].image_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::uint64_t count_bugs(const Dataset& ds, MinerConfig cfg, Split rarity) {
  cfg.rarity_split = rarity;
  return mine_bug_slices(ds, cfg).bug_count;
}

json accuracy_json(const Accuracy& a) {
  return {{"correct", a.correct},
          {"total", a.total},
          {"accuracy", a.total ? json(a.value()) : json(nullptr)}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

RepairReport repair_report(const Dataset& before, const Dataset& after,
                           const std::vector<Slice>& slices, const MinerConfig& cfg) {
  cfg.validate();
  if (val_ids(before) != val_ids(after)) {
    fail(ErrorKind::kReport, "before and after predictions cover different val ids; "
                             "the validation split must stay fixed");
  }
  RepairReport r;
  r.config = cfg;
  r.overall_before = split_accuracy(before, Split::kVal);
  r.overall_after = split_accuracy(after, Split::kVal);
  for (const auto& s : slices) {
    SliceStats b = slice_stats(before, s);
    SliceStats a = slice_stats(after, s);
    SliceDelta d;
    d.slice = s;
    d.before = {b.val_correct, b.val_support};
    d.after = {a.val_correct, a.val_support};
    d.acc_before = b.val_accuracy;
    d.acc_after = a.val_accuracy;
    if (d.acc_before && d.acc_after) d.delta = *d.acc_after - *d.acc_before;
    r.per_slice.push_back(std::move(d));
  }
  for (Split rarity : {Split::kTrain, Split::kVal}) {
    BugCounts c{count_bugs(before, cfg, rarity), count_bugs(after, cfg, rarity)};
    r.bugs_by_rarity_split[to_string(rarity)] = c;
    if (rarity == cfg.rarity_split) r.bugs = c;
  }
  return r;
}

json report_to_json(const RepairReport& r) {
  json slices = json::array();
  for (const auto& d : r.per_slice) {
    slices.push_back({{"slice", d.slice.key()},
                      {"before", accuracy_json(d.before)},
                      {"after", accuracy_json(d.after)},
                      {"acc_before", optional_json(d.acc_before)},
                      {"acc_after", optional_json(d.acc_after)},
                      {"delta", optional_json(d.delta)}});
  }
  json by_split = json::object();
  for (const auto& [split, c] : r.bugs_by_rarity_split) {
    by_split[split] = {{"before", c.before}, {"after", c.after}};
  }
  json out = {{"format_version", kFormatVersion},
              {"type", "repair_report"},
              {"overall_before", accuracy_json(r.overall_before)},
              {"overall_after", accuracy_json(r.overall_after)},
              {"overall_delta", r.overall_after.value() - r.overall_before.value()},
              {"per_slice", slices},
              {"bug_count_before", r.bugs.before},
              {"bug_count_after", r.bugs.after},
              {"bug_counts_by_rarity_split", by_split},
              {"config", r.config.to_json()}};
  out["ledger"] = r.ledger ? r.ledger->to_json() : json(nullptr);
  return out;
}

}  // namespace slicemend
