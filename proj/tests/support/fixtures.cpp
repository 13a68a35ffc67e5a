#include "fixtures.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "filter.hpp"
#include "protocol.hpp"
#include "repair_planner.hpp"
#include "rng.hpp"

namespace slicemend::testing {

std::string make_id(const char* prefix, std::uint64_t i) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s-%06llu", prefix, static_cast<unsigned long long>(i));
  return buf;
}

PredictionRecord make_record(std::string id, Split split, const std::string& label, bool correct,
                             std::map<std::string, std::string> attributes) {
  PredictionRecord r;
  r.image_id = std::move(id);
  r.split = split;
  r.label = label;
  r.prediction = correct ? label : (label == "female" ? "male" : "female");
  r.attributes = std::move(attributes);
  r.source_ref = "img://" + r.image_id;
  return r;
}

namespace {

const std::vector<std::string> kHair = {"auburn", "black", "blond", "brown", "gray", "red", "white"};

AttributeSchema hair_schema() {
  return AttributeSchema({{"hair", kHair, "", ""}});
}

const std::string& other_hair(std::uint64_t i) {
  static const std::vector<std::string> others = {"auburn", "black", "blond", "brown", "gray", "white"};
  return others[i % others.size()];
}

}  // namespace

Dataset red_hair_dataset() {
  std::vector<PredictionRecord> records;
  records.reserve(100'000);
  const std::uint64_t n_train = 80'000;
  const std::uint64_t red_train = 2'484;
  for (std::uint64_t i = 0; i < n_train; ++i) {
    const bool red = spread_hit(i, red_train, n_train);
    records.push_back(make_record(make_id("train", i + 1), Split::kTrain,
                                  i % 2 ? "male" : "female", true,
                                  {{"hair", red ? "red" : other_hair(i)}}));
  }
  // 10,000 red val records with 8,901 correct; 10,000 others with 9,235.
  for (std::uint64_t i = 0; i < 10'000; ++i) {
    records.push_back(make_record(make_id("val-red", i + 1), Split::kVal, "female",
                                  spread_hit(i, 8'901, 10'000), {{"hair", "red"}}));
  }
  for (std::uint64_t i = 0; i < 10'000; ++i) {
    records.push_back(make_record(make_id("val", i + 1), Split::kVal, "male",
                                  spread_hit(i, 9'235, 10'000), {{"hair", other_hair(i)}}));
  }
  return Dataset(hair_schema(), std::move(records));
}

ReportPair red_hair_report_pair(std::uint64_t synthetic) {
  std::vector<PredictionRecord> train;
  const std::uint64_t n_train = 20'000;
  for (std::uint64_t i = 0; i < n_train; ++i) {
    const bool red = spread_hit(i, 600, n_train);
    train.push_back(make_record(make_id("train", i + 1), Split::kTrain, i % 2 ? "male" : "female",
                                true, {{"hair", red ? "red" : other_hair(i)}}));
  }
  auto val = [&](std::uint64_t red_correct) {
    std::vector<PredictionRecord> out;
    for (std::uint64_t i = 0; i < 621; ++i) {
      out.push_back(make_record(make_id("val-red", i + 1), Split::kVal, "female",
                                spread_hit(i, red_correct, 621), {{"hair", "red"}}));
    }
    for (std::uint64_t i = 0; i < 4'379; ++i) {
      out.push_back(make_record(make_id("val", i + 1), Split::kVal, "male",
                                spread_hit(i, 4'050, 4'379), {{"hair", other_hair(i)}}));
    }
    return out;
  };
  std::vector<PredictionRecord> before = train;
  for (auto& r : val(559)) before.push_back(std::move(r));
  std::vector<PredictionRecord> after = train;
  for (std::uint64_t i = 0; i < synthetic; ++i) {
    after.push_back(make_record(make_id("syn", i + 1), Split::kTrain, "female", true,
                                {{"hair", "red"}}));
  }
  for (auto& r : val(568)) after.push_back(std::move(r));
  return {Dataset(hair_schema(), std::move(before)), Dataset(hair_schema(), std::move(after))};
}

// ---------------------------------------------------------------------------
// Brute-force mining reference

Dataset random_mining_dataset(std::uint64_t seed) {
  Rng rng(seed * 7919 + 17);
  std::vector<std::string> names = {"pose", "hair", "age", "skin", "glasses", "emotion"};
  rng.shuffle(names);
  const std::size_t n_attrs = 2 + rng.below(5);
  std::vector<Attribute> attrs;
  std::vector<std::vector<double>> cdfs;
  std::map<std::pair<std::string, std::string>, double> extra_error;
  for (std::size_t a = 0; a < n_attrs; ++a) {
    Attribute attr;
    attr.name = names[a];
    const std::size_t n_values = 2 + rng.below(3);
    std::vector<double> cdf;
    double total = 0.0;
    for (std::size_t v = 0; v < n_values; ++v) {
      attr.values.push_back("v" + std::to_string(v));
      const double u = rng.unit();
      total += 0.01 + u * u * u;
      cdf.push_back(total);
      if (rng.unit() < 0.35) extra_error[{attr.name, attr.values.back()}] = 0.5 * rng.unit();
    }
    attrs.push_back(std::move(attr));
    cdfs.push_back(std::move(cdf));
  }
  const std::uint64_t n_train = 300 + rng.below(1200);
  const std::uint64_t n_val = 200 + rng.below(600);
  std::vector<PredictionRecord> records;
  for (std::uint64_t i = 0; i < n_train + n_val; ++i) {
    const bool train = i < n_train;
    std::map<std::string, std::string> values;
    double err = 0.08;
    for (std::size_t a = 0; a < n_attrs; ++a) {
      const double roll = rng.unit();
      const std::size_t v = rng.categorical(cdfs[a]);
      if (roll < 0.03) {
        values[attrs[a].name] = "unknown";
        continue;
      }
      if (roll < 0.05) continue;  // attribute omitted
      values[attrs[a].name] = attrs[a].values[v];
      auto it = extra_error.find({attrs[a].name, attrs[a].values[v]});
      if (it != extra_error.end()) err += it->second;
    }
    const bool correct = rng.unit() >= std::min(err, 0.95);
    records.push_back(make_record(make_id(train ? "train" : "val", i + 1),
                                  train ? Split::kTrain : Split::kVal,
                                  rng.below(2) ? "male" : "female", correct, std::move(values)));
  }
  rng.shuffle(records);
  return Dataset(AttributeSchema(std::move(attrs)), std::move(records));
}

MinerConfig OracleConfig::miner() const {
  MinerConfig c;
  c.rho = static_cast<double>(rho_num) / static_cast<double>(rho_den);
  c.epsilon = static_cast<double>(eps_num) / static_cast<double>(eps_den);
  c.max_depth = max_depth;
  c.min_val_support = min_val_support;
  c.min_train_support = min_train_support;
  c.rarity_split = rarity_on_train ? Split::kTrain : Split::kVal;
  c.top_k = 1'000'000;
  return c;
}

namespace {

using Conds = std::vector<std::pair<std::string, std::string>>;

struct Counted {
  Conds conds;
  std::uint64_t train = 0, val = 0, val_correct = 0;
};

Counted count(const Dataset& ds, Conds conds) {
  std::sort(conds.begin(), conds.end());
  Counted c{conds};
  for (const auto& r : ds.records()) {
    bool member = true;
    for (const auto& [a, v] : conds) {
      auto it = r.attributes.find(a);
      if (it == r.attributes.end() || it->second != v) member = false;
    }
    if (!member) continue;
    if (r.split == Split::kTrain) {
      ++c.train;
    } else {
      ++c.val;
      if (r.prediction == r.label) ++c.val_correct;
    }
  }
  return c;
}

std::string key_of(const Conds& conds) {
  std::string k;
  for (const auto& [a, v] : conds) {
    if (!k.empty()) k += ",";
    k += a + "=" + v;
  }
  return k;
}

}  // namespace

OracleConfig oracle_config(std::uint64_t seed) {
  static const std::pair<int, int> rhos[] = {{5, 100}, {1, 10}, {2, 10}, {35, 100}};
  static const std::pair<int, int> epss[] = {{0, 1}, {1, 100}, {5, 100}};
  OracleConfig c;
  c.rho_num = rhos[seed % 4].first;
  c.rho_den = rhos[seed % 4].second;
  c.eps_num = epss[seed % 3].first;
  c.eps_den = epss[seed % 3].second;
  c.max_depth = seed % 5 == 0 ? 1 : 2;
  c.min_val_support = std::vector<std::uint64_t>{1, 5, 20}[seed % 3];
  c.min_train_support = std::vector<std::uint64_t>{0, 5, 30}[(seed / 3) % 3];
  c.rarity_on_train = seed % 7 != 3;
  return c;
}

std::vector<OracleBug> brute_force_bugs(const Dataset& ds, const OracleConfig& cfg) {
  using I = __int128;
  std::uint64_t train_size = 0, val_size = 0, val_correct = 0;
  for (const auto& r : ds.records()) {
    if (r.split == Split::kTrain) {
      ++train_size;
    } else {
      ++val_size;
      if (r.prediction == r.label) ++val_correct;
    }
  }
  auto is_bug = [&](const Counted& c) {
    if (c.val < cfg.min_val_support) return false;
    const std::uint64_t support = cfg.rarity_on_train ? c.train : c.val;
    const std::uint64_t size = cfg.rarity_on_train ? train_size : val_size;
    // support / size < rho_num / rho_den
    if (!(I(support) * cfg.rho_den < I(cfg.rho_num) * size)) return false;
    // c.val_correct / c.val < val_correct / val_size - eps_num / eps_den
    const I lhs = I(c.val_correct) * val_size * cfg.eps_den;
    const I rhs = (I(val_correct) * cfg.eps_den - I(cfg.eps_num) * val_size) * c.val;
    return lhs < rhs;
  };

  const auto& attrs = ds.schema().attributes();
  std::vector<Counted> singles;
  for (const auto& a : attrs) {
    for (const auto& v : a.values) singles.push_back(count(ds, {{a.name, v}}));
  }
  std::vector<Counted> all = singles;
  if (cfg.max_depth >= 2) {
    for (std::size_t i = 0; i < singles.size(); ++i) {
      for (std::size_t j = i + 1; j < singles.size(); ++j) {
        const auto& x = singles[i].conds[0];
        const auto& y = singles[j].conds[0];
        if (x.first == y.first) continue;
        if (singles[i].train < cfg.min_train_support || singles[j].train < cfg.min_train_support) {
          continue;
        }
        all.push_back(count(ds, {x, y}));
      }
    }
  }

  std::map<std::string, Counted> bugs;
  for (const auto& c : all) {
    if (is_bug(c)) bugs.emplace(key_of(c.conds), c);
  }
  std::vector<OracleBug> out;
  for (const auto& [key, c] : bugs) {
    bool dominated = false;
    if (c.conds.size() == 2) {
      for (const auto& cond : c.conds) {
        auto it = bugs.find(key_of({cond}));
        if (it == bugs.end()) continue;
        // sub accuracy <= this accuracy
        if (I(it->second.val_correct) * c.val <= I(c.val_correct) * it->second.val) dominated = true;
      }
    }
    if (!dominated) out.push_back({key, c.train, c.val, c.val_correct});
  }
  std::sort(out.begin(), out.end(), [](const OracleBug& a, const OracleBug& b) {
    const I l = I(a.val_correct) * b.val_support;
    const I r = I(b.val_correct) * a.val_support;
    if (l != r) return l < r;
    if (a.val_support != b.val_support) return a.val_support > b.val_support;
    return a.key < b.key;
  });
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end simulator run

AttributeSchema face_schema() {
  return AttributeSchema({{"emotion", {"happy", "neutral", "sad"}, "", ""},
                          {"hair", {"black", "blond", "brown", "red"}, "", ""},
                          {"skin", {"light", "medium", "brown"}, "", ""}});
}

TokenMap face_tokens(const AttributeSchema& schema) {
  TokenMap map;
  for (const auto& a : schema.attributes()) {
    for (const auto& v : a.values) map.set(a.name, v, v + " " + a.name);
  }
  map.set("hair", "red", "vibrant red hair");
  return map;
}

PopulationSpec three_bug_spec(std::uint64_t seed) {
  PopulationSpec spec;
  spec.schema = face_schema();
  spec.n_train = 20'000;
  spec.n_val = 5'000;
  spec.seed = seed;
  spec.base_error_rate = 0.10;
  spec.labels = {"female", "male"};
  for (const char* s : {"emotion=sad", "hair=red", "skin=brown"}) {
    spec.injected_bugs.push_back({Slice::parse(s), 0.03, 0.35});
  }
  return spec;
}

MinerConfig end_to_end_miner() {
  MinerConfig cfg;
  cfg.rho = 0.05;
  cfg.epsilon = 0.05;
  cfg.max_depth = 1;
  return cfg;
}

namespace {

std::vector<std::string> bug_keys(const BugSliceReport& r) {
  std::vector<std::string> keys;
  for (const auto& s : r.bugs) keys.push_back(s.slice.key());
  std::sort(keys.begin(), keys.end());
  return keys;
}

}  // namespace

EndToEndResult run_end_to_end(std::uint64_t seed) {
  const PopulationSpec spec = three_bug_spec(seed);
  const Population pop = synthesize_population(spec);
  const Dataset& ds = pop.dataset;
  const MinerConfig miner = end_to_end_miner();

  EndToEndResult res;
  for (const auto& b : spec.injected_bugs) res.injected.push_back(b.slice.key());
  std::sort(res.injected.begin(), res.injected.end());
  res.found_before = bug_keys(mine_bug_slices(ds, miner));

  std::size_t hits = 0;
  for (const auto& k : res.found_before) {
    hits += std::binary_search(res.injected.begin(), res.injected.end(), k) ? 1 : 0;
  }
  res.precision = res.found_before.empty() ? 0.0 : double(hits) / double(res.found_before.size());
  res.recall = double(hits) / double(res.injected.size());

  MockScript script;
  script.seed = seed;
  script.default_pass_probability = 0.96;
  script.label_pass_probability = 0.99;
  script.permanent_failure_rate = 0.01;
  auto backend = std::make_shared<MockBackend>(script);
  ClientLimits limits;
  limits.max_in_flight = 4;
  limits.timeout = std::chrono::milliseconds(2000);
  BackendClient client(in_process_factory(backend), limits);

  std::vector<AugmentationManifest> parts;
  for (const auto& key : res.found_before) {
    const Slice slice = Slice::parse(key);
    PlanConfig plan_cfg;
    plan_cfg.target_count = 700;
    plan_cfg.token_map = face_tokens(ds.schema());
    plan_cfg.source_selection_seed = seed * 31 + parts.size();
    const auto jobs = plan(ds, slice, plan_cfg);
    std::vector<GenerationRequest> reqs;
    for (const auto& j : jobs) reqs.push_back(GenerationRequest::from_job(j));
    const auto gens = client.generate_batch(reqs);
    const auto outcome = run_filter(filter_jobs(jobs, gens), ds.schema(), Task::kFace, client);
    res.kept += outcome.ledger.kept;
    parts.push_back(build_manifest(ds, jobs, gens, outcome.verdicts, plan_cfg.target_count));
  }
  const AugmentationManifest manifest = merge_manifests(parts);
  res.synthetic = manifest.entries.size();
  const Dataset after = simulate_repair(ds, manifest, pop.model);
  res.found_after = bug_keys(mine_bug_slices(after, miner));
  for (const auto& k : res.found_after) {
    if (!std::binary_search(res.found_before.begin(), res.found_before.end(), k)) res.new_bug = true;
  }
  return res;
}

GenerationRequest sample_generation_request() {
  GenerationRequest r;
  r.job_id = "job-000001";
  r.source_ref = "img://train-000042";
  r.prompt =
      "a person with vibrant red hair and brown skin, in sad emotion, not change other previous "
      "color, high detail, natural lighting";
  r.positive_prompt = kPositivePrompt;
  r.negative_prompt = kNegativePrompt;
  r.condition_kind = "soft_hed";
  r.inference_steps = 30;
  r.seed = 12345678901234ULL;
  r.edits = {{"hair", "black", "red"}, {"skin", "light", "brown"}};
  return r;
}

std::vector<std::pair<std::string, std::string>> golden_frames() {
  auto frame = [](const json& doc) { return encode_frame(serialize(doc)); };
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("generate_request", frame(to_json(sample_generation_request())));
  out.emplace_back("generate_result_ok",
                   frame(to_json(GenerationResponse{"job-000001", GenerationStatus::kOk,
                                                    "gen/job-000001.png",
                                                    {{"model", "sd15-hed"}}})));
  out.emplace_back("generate_result_failed",
                   frame(to_json(GenerationResponse{"job-000002", GenerationStatus::kFailed, "",
                                                    {{"error", "out of memory"}}})));
  FilterRequest fr;
  fr.job_id = "job-000001";
  fr.generated_ref = "gen/job-000001.png";
  fr.questions = {"Does the person in this picture have red hair?",
                  "Is the person in this picture female?"};
  out.emplace_back("filter_request", frame(to_json(fr)));
  out.emplace_back("filter_result", frame(filter_response_json("job-000001", "1 0")));
  out.emplace_back("hello", frame(hello_request_json()));
  out.emplace_back("hello_result", frame(to_json(Hello{"café-mock", {"filter", "generate"}, true})));
  return out;
}

std::string read_golden(const std::string& name) {
  std::ifstream in(std::string(SLICEMEND_FIXTURES) + "/protocol/" + name, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string ordering_mismatch(Endpoint::Kind kind, unsigned max_in_flight, std::size_t n) {
  MockScript script;
  script.seed = 5;
  script.shuffle_window = 16;
  script.default_pass_probability = 0.7;
  auto backend = std::make_shared<MockBackend>(script);
  MockServer server(backend, kind);
  server.start();
  ClientLimits limits;
  limits.max_in_flight = max_in_flight;
  limits.timeout = std::chrono::milliseconds(5000);
  BackendClient client(connection_factory(server.endpoint()), limits);

  if (client.handshake().capabilities.size() != 2) return "handshake capabilities";
  std::vector<GenerationRequest> reqs;
  for (std::size_t i = 0; i < n; ++i) {
    GenerationRequest r = sample_generation_request();
    r.job_id = "job-" + std::to_string(i + 1);
    r.seed = i;
    reqs.push_back(r);
  }
  const auto gens = client.generate_batch(reqs);
  if (gens.size() != reqs.size()) return "generation count";
  std::vector<FilterRequest> freqs;
  for (std::size_t i = 0; i < gens.size(); ++i) {
    if (gens[i].job_id != reqs[i].job_id) return "generation " + std::to_string(i) + " is " + gens[i].job_id;
    if (gens[i].generated_ref != mock_generated_ref(reqs[i].job_id, reqs[i].edits)) {
      return "generated_ref of " + reqs[i].job_id + ": " + json(gens[i].backend_meta).dump();
    }
    FilterRequest f;
    f.job_id = gens[i].job_id;
    f.generated_ref = gens[i].generated_ref;
    f.questions = {"Does the person in this picture have red hair?",
                   "Is the person in this picture female?"};
    freqs.push_back(f);
  }
  const auto answers = client.filter_batch(freqs);
  if (answers.size() != freqs.size()) return "answer count";

  auto reference = std::make_shared<MockBackend>(script);
  ClientLimits serial;
  serial.max_in_flight = 1;
  const auto expected = BackendClient(in_process_factory(reference), serial).filter_batch(freqs);
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i].job_id != freqs[i].job_id) return "answer " + std::to_string(i) + " is " + answers[i].job_id;
    if (answers[i].raw_answer != expected[i].raw_answer) {
      return "answer text of " + freqs[i].job_id + ": \"" + answers[i].raw_answer + "\" vs \"" +
             expected[i].raw_answer + "\" " + answers[i].error;
    }
  }
  return {};
}

FilterOutcome run_filter_scenario(std::size_t n, std::uint64_t seed) {
  MockScript script;
  script.seed = seed;
  script.pass_probability["emotion"] = 0.80;
  script.default_pass_probability = 0.95;
  script.label_pass_probability = 0.95;
  auto backend = std::make_shared<MockBackend>(script);
  ClientLimits limits;
  limits.max_in_flight = 8;
  BackendClient client(in_process_factory(backend), limits);

  std::vector<FilterJob> jobs;
  for (std::size_t i = 0; i < n; ++i) {
    FilterJob j;
    j.job_id = make_id("job", i + 1);
    j.spec.source_image_id = make_id("train", i + 1);
    j.spec.preserved_label = i % 2 ? "male" : "female";
    j.spec.target_slice = Slice::parse("emotion=sad,hair=red");
    j.spec.substitutions = {{"emotion", "happy", "sad"}, {"hair", "black", "red"}};
    j.generated_ref = mock_generated_ref(j.job_id, j.spec.substitutions);
    jobs.push_back(std::move(j));
  }
  return run_filter(jobs, face_schema(), Task::kFace, client);
}

}  // namespace slicemend::testing
