#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "filter.hpp"
#include "protocol.hpp"
#include "repair_planner.hpp"
#include "slice_miner.hpp"

namespace slicemend {

struct Provenance {
  std::string source_image_id;
  Slice slice;
  std::string job_id;
};

struct SyntheticEntry {
  std::string generated_ref;
  std::string label;
  std::map<std::string, std::string> attributes;
  Provenance provenance;
  // Left to the trainer; 1 means "same as a real sample".
  double weight = 1.0;

  // Unique across manifests built for different slices.
  std::string image_id() const;
};

struct AugmentationManifest {
  std::string base_dataset_ref;
  std::vector<SyntheticEntry> entries;
  std::map<std::string, std::uint64_t> counts_per_slice;
  std::map<std::string, std::uint64_t> target_per_slice;
  std::vector<std::string> warnings;
};

// Keeps the first target_count kept jobs in plan order. Fewer keeps than the
// target is not an error: the manifest carries a shortfall warning instead.
AugmentationManifest build_manifest(const Dataset& base, const std::vector<GenerationJob>& jobs,
                                    const std::vector<GenerationResponse>& generations,
                                    const std::vector<FilterVerdict>& verdicts,
                                    std::uint64_t target_count,
                                    const std::string& base_dataset_ref = "");

AugmentationManifest merge_manifests(const std::vector<AugmentationManifest>& parts);

// Synthetic entries as train-split records (prediction = label).
std::vector<PredictionRecord> synthetic_records(const AugmentationManifest& manifest);
Dataset augmented_dataset(const Dataset& base, const AugmentationManifest& manifest);

json entry_to_json(const SyntheticEntry& e);
SyntheticEntry entry_from_json(const json& obj);
void write_manifest(const std::string& path, const AugmentationManifest& manifest);
AugmentationManifest read_manifest(const std::string& path);

json retrain_stub(const std::string& manifest_path);

struct SliceDelta {
  Slice slice;
  Accuracy before;
  Accuracy after;
  std::optional<double> acc_before;
  std::optional<double> acc_after;
  std::optional<double> delta;  // acc_after - acc_before
};

struct BugCounts {
  std::uint64_t before = 0;
  std::uint64_t after = 0;
};

struct RepairReport {
  Accuracy overall_before;
  Accuracy overall_after;
  std::vector<SliceDelta> per_slice;
  MinerConfig config;
  BugCounts bugs;                  // with config.rarity_split
  std::map<std::string, BugCounts> bugs_by_rarity_split;  // "train", "val"
  std::optional<PassRateLedger> ledger;
};

// Both datasets must hold the same val ids; only val records are read for
// accuracy, so synthetic train entries never leak into the numbers.
RepairReport repair_report(const Dataset& before, const Dataset& after,
                           const std::vector<Slice>& slices, const MinerConfig& cfg);

json report_to_json(const RepairReport& report);

}  // namespace slicemend
