#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "augmentor.hpp"
#include "filter.hpp"
#include "mock_backend.hpp"
#include "protocol.hpp"
#include "records.hpp"
#include "slice_miner.hpp"
#include "synth_bench.hpp"

namespace slicemend::testing {

// Spreads `hits` hits evenly over `n` positions: position i is a hit iff the
// running quota crosses an integer there.
inline bool spread_hit(std::uint64_t i, std::uint64_t hits, std::uint64_t n) {
  return (i + 1) * hits / n > i * hits / n;
}

std::string make_id(const char* prefix, std::uint64_t i);

PredictionRecord make_record(std::string id, Split split, const std::string& label, bool correct,
                             std::map<std::string, std::string> attributes);

// Face-attribute red-hair case: 2,484 of 80,000 train records have red hair;
// val has 20,000 records, 18,136 correct overall, red hair 8,901 of 10,000.
Dataset red_hair_dataset();

// Before/after pair for the red-hair report: 621 red-hair val records with
// 559 correct before and 568 after; train grows by `synthetic` red records.
struct ReportPair {
  Dataset before;
  Dataset after;
};
ReportPair red_hair_report_pair(std::uint64_t synthetic = 10'000);

// Random dataset for the brute-force comparison: up to 6 attributes with up
// to 4 values, skewed marginals, some "unknown" values and per-value error
// rates so that rare low-accuracy slices appear.
Dataset random_mining_dataset(std::uint64_t seed);

// Brute-force reference for mine_bug_slices, written without bitsets,
// Apriori joins or the shared threshold helpers. Thresholds are passed as
// exact fractions; the returned list is ranked like the miner's report.
struct OracleBug {
  std::string key;
  std::uint64_t train_support = 0;
  std::uint64_t val_support = 0;
  std::uint64_t val_correct = 0;
};
struct OracleConfig {
  std::int64_t rho_num = 5, rho_den = 100;
  std::int64_t eps_num = 1, eps_den = 100;
  std::size_t max_depth = 2;
  std::uint64_t min_val_support = 20;
  std::uint64_t min_train_support = 5;
  bool rarity_on_train = true;

  MinerConfig miner() const;
};
std::vector<OracleBug> brute_force_bugs(const Dataset& ds, const OracleConfig& cfg);
// Threshold mix for seeded oracle runs.
OracleConfig oracle_config(std::uint64_t seed);

// Simulator run with three injected depth-1 bugs, repaired through the
// planner, a mock backend, the filter and the augmentor.
struct EndToEndResult {
  std::vector<std::string> injected;
  std::vector<std::string> found_before;
  std::vector<std::string> found_after;
  std::uint64_t kept = 0;
  std::uint64_t synthetic = 0;
  double precision = 0.0;
  double recall = 0.0;
  bool new_bug = false;
};
PopulationSpec three_bug_spec(std::uint64_t seed);
MinerConfig end_to_end_miner();
EndToEndResult run_end_to_end(std::uint64_t seed);

// `n` two-edit jobs (hair black->red, emotion happy->sad) answered by a mock
// that passes emotion questions with probability 0.80 and every other
// question with 0.95.
FilterOutcome run_filter_scenario(std::size_t n, std::uint64_t seed);

// Wire messages checked against tests/fixtures/protocol: file stem -> frame.
GenerationRequest sample_generation_request();
std::vector<std::pair<std::string, std::string>> golden_frames();
std::string read_golden(const std::string& name);

// Generate then filter `n` jobs against a shuffling mock served over `kind`;
// empty when every response came back in request order with the answers a
// serial in-process run gives, otherwise the first mismatch.
std::string ordering_mismatch(Endpoint::Kind kind, unsigned max_in_flight, std::size_t n);

// Schema with the three simulator attributes used by the end-to-end spec.
AttributeSchema face_schema();
TokenMap face_tokens(const AttributeSchema& schema);

}  // namespace slicemend::testing
