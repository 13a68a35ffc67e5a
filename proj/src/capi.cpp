#include "slicemend/slicemend.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <stdexcept>

#include "augmentor.hpp"
#include "filter.hpp"
#include "metrics.hpp"
#include "mock_backend.hpp"
#include "protocol.hpp"
#include "records.hpp"
#include "repair_planner.hpp"
#include "slice_miner.hpp"
#include "synth_bench.hpp"

using namespace slicemend;

struct sm_dataset {
  Dataset data;
};

struct sm_mock_server {
  std::unique_ptr<MockServer> server;
};

namespace {

thread_local std::string g_last_error;

sm_status status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return SM_ERR_PARSE;
    case ErrorKind::kSchema: return SM_ERR_SCHEMA;
    case ErrorKind::kConflict: return SM_ERR_CONFLICT;
    case ErrorKind::kDomain: return SM_ERR_DOMAIN;
    case ErrorKind::kConfig: return SM_ERR_CONFIG;
    case ErrorKind::kPlanning: return SM_ERR_PLANNING;
    case ErrorKind::kBudget: return SM_ERR_BUDGET;
    case ErrorKind::kProtocol: return SM_ERR_PROTOCOL;
    case ErrorKind::kNumeric: return SM_ERR_NUMERIC;
    case ErrorKind::kIo: return SM_ERR_IO;
    case ErrorKind::kVersion: return SM_ERR_VERSION;
    case ErrorKind::kAccounting: return SM_ERR_ACCOUNTING;
    case ErrorKind::kReport: return SM_ERR_REPORT;
    case ErrorKind::kSpec: return SM_ERR_SPEC;
    case ErrorKind::kNoOp: return SM_ERR_NOOP;
  }
  return SM_ERR_INTERNAL;
}

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename Fn>
sm_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return SM_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const InvalidArgument& e) {
    g_last_error = e.what();
    return SM_ERR_INVALID_ARGUMENT;
  } catch (const json::exception& e) {
    g_last_error = std::string("parse error: ") + e.what();
    return SM_ERR_PARSE;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return SM_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = std::string("internal error: ") + e.what();
    return SM_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "internal error";
    return SM_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const json& j) {
  if (out) *out = dup_string(j.dump(2));
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(std::string("invalid argument: ") + what);
}

json parse_request(const char* text) {
  if (!text || !*text) return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, std::string("request is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kConfig, "request must be a JSON object");
  return j;
}

std::string need_string(const json& req, const char* key) {
  auto it = req.find(key);
  if (it == req.end() || !it->is_string() || it->get<std::string>().empty()) {
    fail(ErrorKind::kConfig, std::string("request needs \"") + key + "\"");
  }
  return it->get<std::string>();
}

std::vector<std::string> string_list(const json& req, const char* key) {
  auto it = req.find(key);
  if (it == req.end()) fail(ErrorKind::kConfig, std::string("request needs \"") + key + "\"");
  if (it->is_string()) return {it->get<std::string>()};
  return it->get<std::vector<std::string>>();
}

ClientLimits limits_from(const json& req) {
  ClientLimits l;
  l.max_in_flight = req.value("max_in_flight", l.max_in_flight);
  l.timeout = std::chrono::milliseconds(req.value("timeout_ms", static_cast<std::int64_t>(l.timeout.count())));
  l.retries = req.value("retries", l.retries);
  l.validate();
  return l;
}

Split split_arg(const char* split) {
  require(split != nullptr, "split");
  return parse_split(split);
}

Eigen::MatrixXd matrix_from(const double* data, size_t rows, size_t cols) {
  require(data != nullptr || rows * cols == 0, "matrix data");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (size_t i = 0; i < rows; ++i) {
    for (size_t j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i * cols + j];
    }
  }
  return m;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed for " + path);
}

}  // namespace

extern "C" {

const char* sm_version(void) { return "0.3.0"; }
const char* sm_format_version(void) { return kFormatVersion; }

const char* sm_status_name(sm_status status) {
  switch (status) {
    case SM_OK: return "ok";
    case SM_ERR_PARSE: return "parse error";
    case SM_ERR_SCHEMA: return "schema error";
    case SM_ERR_CONFLICT: return "conflict error";
    case SM_ERR_DOMAIN: return "domain error";
    case SM_ERR_CONFIG: return "config error";
    case SM_ERR_PLANNING: return "planning error";
    case SM_ERR_BUDGET: return "budget error";
    case SM_ERR_PROTOCOL: return "protocol error";
    case SM_ERR_NUMERIC: return "numeric error";
    case SM_ERR_IO: return "io error";
    case SM_ERR_VERSION: return "version error";
    case SM_ERR_ACCOUNTING: return "accounting error";
    case SM_ERR_REPORT: return "report error";
    case SM_ERR_SPEC: return "spec error";
    case SM_ERR_NOOP: return "no-op error";
    case SM_ERR_INVALID_ARGUMENT: return "invalid argument";
    case SM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* sm_last_error(void) { return g_last_error.c_str(); }

void sm_free_string(char* s) { std::free(s); }

sm_status sm_dataset_open(const char* records_path, const char* schema_path, int lenient,
                          sm_dataset** out, char** rejected_json) {
  if (!records_path || !schema_path || !out) {
    g_last_error = "sm_dataset_open: null argument";
    return SM_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] {
    AttributeSchema schema = AttributeSchema::load(schema_path);
    auto handle = std::make_unique<sm_dataset>();
    json rejected = json::array();
    if (lenient) {
      IngestResult r = ingest_records_lenient(std::string(records_path), schema);
      handle->data = std::move(r.dataset);
      for (const auto& rej : r.rejected) {
        rejected.push_back({{"line", rej.line}, {"kind", to_string(rej.kind)}, {"message", rej.message}});
      }
    } else {
      handle->data = ingest_records(std::string(records_path), schema);
    }
    put(rejected_json, rejected);
    *out = handle.release();
  });
}

void sm_dataset_close(sm_dataset* ds) { delete ds; }

sm_status sm_dataset_split_size(const sm_dataset* ds, const char* split, uint64_t* out) {
  return guarded([&] {
    require(ds && out, "dataset/out");
    *out = ds->data.split_size(split_arg(split));
  });
}

sm_status sm_dataset_overall_accuracy(const sm_dataset* ds, const char* split, double* out) {
  return guarded([&] {
    require(ds && out, "dataset/out");
    *out = overall_accuracy(ds->data, split_arg(split));
  });
}

sm_status sm_dataset_write(const sm_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds && path, "dataset/path");
    write_records_file(ds->data, path);
  });
}

sm_status sm_mine(const sm_dataset* ds, const char* config_json, char** report_json) {
  return guarded([&] {
    require(ds && report_json, "dataset/out");
    MinerConfig cfg = MinerConfig::from_json(parse_request(config_json));
    put(report_json, report_to_json(mine_bug_slices(ds->data, cfg)));
  });
}

sm_status sm_rank_attributes(const sm_dataset* ds, const char* config_json, char** ranking_json) {
  return guarded([&] {
    require(ds && ranking_json, "dataset/out");
    MinerConfig cfg = MinerConfig::from_json(parse_request(config_json));
    json out = json::array();
    for (const auto& r : rank_attributes_by_error(ds->data, cfg)) {
      out.push_back({{"attribute", r.attribute},
                     {"value", r.value},
                     {"val_accuracy", r.val_accuracy},
                     {"val_support", r.val_support},
                     {"val_correct", r.val_correct}});
    }
    put(ranking_json, out);
  });
}

sm_status sm_plan(const sm_dataset* ds, const char* request_json, char** summary_json) {
  return guarded([&] {
    require(ds != nullptr, "dataset");
    json req = parse_request(request_json);
    const Slice slice = Slice::parse(need_string(req, "slice"));
    PlanConfig cfg;
    cfg.target_count = req.value("target_count", std::uint64_t{0});
    if (cfg.target_count == 0) fail(ErrorKind::kConfig, "target_count must be positive");
    cfg.overgen_factor = req.value("overgen_factor", cfg.overgen_factor);
    cfg.source_selection_seed = req.value("seed", std::uint64_t{0});
    cfg.prompt_template = req.value("prompt_template", "");
    cfg.condition_kind = req.value("condition_kind", cfg.condition_kind);
    cfg.inference_steps = req.value("inference_steps", cfg.inference_steps);
    if (!req.contains("token_map")) fail(ErrorKind::kConfig, "request needs \"token_map\"");
    const json& tm = req.at("token_map");
    cfg.token_map = tm.is_string() ? TokenMap::load(tm.get<std::string>(), ds->data.schema())
                                   : TokenMap::from_json(tm, ds->data.schema());
    JobsFile file;
    file.slice = slice;
    file.target_count = cfg.target_count;
    file.overgen_factor = cfg.overgen_factor;
    file.seed = cfg.source_selection_seed;
    file.jobs = plan(ds->data, slice, cfg);
    const std::string out = need_string(req, "out");
    write_jobs(out, file);
    put(summary_json, {{"slice", slice.key()},
                       {"target_count", cfg.target_count},
                       {"requested_sources", requested_sources(cfg)},
                       {"jobs", file.jobs.size()},
                       {"out", out}});
  });
}

sm_status sm_generate(const char* request_json, char** summary_json) {
  return guarded([&] {
    json req = parse_request(request_json);
    JobsFile jobs = read_jobs(need_string(req, "jobs"));
    Endpoint ep = Endpoint::parse(need_string(req, "endpoint"));
    auto results = generate_batch(jobs.jobs, ep, limits_from(req));
    const std::string out = need_string(req, "out");
    write_generations(out, results);
    std::uint64_t ok = 0;
    for (const auto& r : results) ok += r.status == GenerationStatus::kOk ? 1 : 0;
    put(summary_json, {{"jobs", results.size()}, {"ok", ok}, {"failed", results.size() - ok}, {"out", out}});
  });
}

sm_status sm_filter(const char* request_json, char** summary_json) {
  return guarded([&] {
    json req = parse_request(request_json);
    JobsFile jobs = read_jobs(need_string(req, "jobs"));
    auto generations = read_generations(need_string(req, "generations"));
    AttributeSchema schema = AttributeSchema::load(need_string(req, "schema"));
    Task task = parse_task(req.value("task", "object"));
    BackendClient client(connection_factory(Endpoint::parse(need_string(req, "endpoint"))),
                         limits_from(req));
    FilterOutcome outcome = run_filter(filter_jobs(jobs.jobs, generations), schema, task, client);
    write_verdicts(need_string(req, "verdicts_out"), outcome.verdicts);
    const json ledger = outcome.ledger.to_json();
    write_json_file(need_string(req, "ledger_out"), ledger);
    put(summary_json, ledger);
  });
}

sm_status sm_augment(const sm_dataset* base, const char* request_json, char** summary_json) {
  return guarded([&] {
    require(base != nullptr, "dataset");
    json req = parse_request(request_json);
    auto job_paths = string_list(req, "jobs");
    auto gen_paths = string_list(req, "generations");
    auto verdict_paths = string_list(req, "verdicts");
    if (job_paths.size() != gen_paths.size() || job_paths.size() != verdict_paths.size()) {
      fail(ErrorKind::kConfig, "jobs, generations and verdicts must list the same number of files");
    }
    const std::uint64_t target = req.value("target_count", std::uint64_t{0});
    const std::string ref = req.value("base_dataset_ref", "");
    std::vector<AugmentationManifest> parts;
    for (std::size_t i = 0; i < job_paths.size(); ++i) {
      JobsFile jobs = read_jobs(job_paths[i]);
      parts.push_back(build_manifest(base->data, jobs.jobs, read_generations(gen_paths[i]),
                                     read_verdicts(verdict_paths[i]),
                                     target ? target : jobs.target_count, ref));
    }
    AugmentationManifest m = merge_manifests(parts);
    const std::string out = need_string(req, "out");
    write_manifest(out, m);
    if (req.contains("retrain_out")) {
      write_json_file(req.at("retrain_out").get<std::string>(), retrain_stub(out));
    }
    put(summary_json, {{"synthetic_count", m.entries.size()},
                       {"counts_per_slice", m.counts_per_slice},
                       {"target_per_slice", m.target_per_slice},
                       {"warnings", m.warnings},
                       {"out", out}});
  });
}

sm_status sm_repair_report(const sm_dataset* before, const sm_dataset* after,
                           const char* request_json, char** report_json) {
  return guarded([&] {
    require(before && after && report_json, "datasets/out");
    json req = parse_request(request_json);
    std::vector<Slice> slices;
    for (const auto& s : req.value("slices", std::vector<std::string>{})) slices.push_back(Slice::parse(s));
    MinerConfig cfg = MinerConfig::from_json(req.value("miner", json::object()));
    RepairReport r = repair_report(before->data, after->data, slices, cfg);
    if (req.contains("ledger") && req.at("ledger").is_string()) {
      r.ledger = PassRateLedger::from_json(parse_json_file(req.at("ledger").get<std::string>()));
    }
    put(report_json, report_to_json(r));
  });
}

sm_status sm_handshake(const char* endpoint, uint32_t timeout_ms, char** hello_json) {
  return guarded([&] {
    require(endpoint && hello_json, "endpoint/out");
    ClientLimits l;
    l.timeout = std::chrono::milliseconds(timeout_ms ? timeout_ms : 5000);
    Hello h = BackendClient(connection_factory(Endpoint::parse(endpoint)), l).handshake();
    put(hello_json, to_json(h));
  });
}

sm_status sm_metrics(const char* request_json, char** metrics_json) {
  return guarded([&] {
    json req = parse_request(request_json);
    MetricsInputs in;
    in.real = read_fvec(need_string(req, "real"));
    in.generated = read_fvec(need_string(req, "generated"));
    if (req.contains("distances")) in.distances = read_fvec(req.at("distances").get<std::string>()).vectors;
    if (req.contains("pairs_u") || req.contains("pairs_v")) {
      in.pairs = std::make_pair(read_fvec(need_string(req, "pairs_u")).vectors,
                                read_fvec(need_string(req, "pairs_v")).vectors);
    }
    put(metrics_json, metrics_report(in));
  });
}

sm_status sm_frechet_distance(const double* a, size_t rows_a, const double* b, size_t rows_b,
                              size_t dim, double* out) {
  return guarded([&] {
    require(out != nullptr, "out");
    *out = frechet_distance(FeatureSet{matrix_from(a, rows_a, dim), "a"},
                            FeatureSet{matrix_from(b, rows_b, dim), "b"});
  });
}

sm_status sm_gaussian_kl(const double* a, size_t rows_a, const double* b, size_t rows_b, size_t dim,
                         double* out) {
  return guarded([&] {
    require(out != nullptr, "out");
    *out = gaussian_kl(FeatureSet{matrix_from(a, rows_a, dim), "a"},
                       FeatureSet{matrix_from(b, rows_b, dim), "b"});
  });
}

sm_status sm_mean_pairwise_diversity(const double* distances, size_t n, double* out) {
  return guarded([&] {
    require(out != nullptr, "out");
    *out = mean_pairwise_diversity(matrix_from(distances, n, n));
  });
}

sm_status sm_mean_consistency(const double* u, const double* v, size_t rows, size_t dim, double* out) {
  return guarded([&] {
    require(out != nullptr, "out");
    *out = mean_consistency(matrix_from(u, rows, dim), matrix_from(v, rows, dim));
  });
}

sm_status sm_simulate(const char* spec_json, const char* out_dir, char** ground_truth_json) {
  return guarded([&] {
    require(spec_json && out_dir, "spec/out_dir");
    PopulationSpec spec = PopulationSpec::from_json(parse_request(spec_json));
    Population pop = synthesize_population(spec);
    std::filesystem::path dir(out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
    write_records_file(pop.dataset, (dir / "records.jsonl").string());
    write_json_file((dir / "schema.json").string(), spec.schema.to_json());
    write_json_file((dir / "ground_truth.json").string(), pop.ground_truth);
    put(ground_truth_json, pop.ground_truth);
  });
}

sm_status sm_simulate_repair(const sm_dataset* ds, const char* request_json, char** summary_json) {
  return guarded([&] {
    require(ds != nullptr, "dataset");
    json req = parse_request(request_json);
    AugmentationManifest m = read_manifest(need_string(req, "manifest"));
    json truth = parse_json_file(need_string(req, "ground_truth"));
    if (!truth.contains("surrogate")) fail(ErrorKind::kParse, "ground truth has no surrogate model");
    SurrogateModel model = SurrogateModel::from_json(truth.at("surrogate"));
    Dataset after = simulate_repair(ds->data, m, model);
    const std::string out = need_string(req, "out");
    write_records_file(after, out);
    put(summary_json, {{"train", after.split_size(Split::kTrain)},
                       {"val", after.split_size(Split::kVal)},
                       {"synthetic", m.entries.size()},
                       {"val_accuracy", overall_accuracy(after, Split::kVal)},
                       {"out", out}});
  });
}

sm_status sm_mock_server_start(const char* script_json, const char* transport, const char* host,
                               uint16_t port, sm_mock_server** out) {
  return guarded([&] {
    require(out != nullptr, "out");
    json doc = parse_request(script_json);
    const std::string kind = transport ? transport : "tcp";
    if (kind != "tcp" && kind != "http") fail(ErrorKind::kConfig, "transport must be tcp or http");
    auto backend = std::make_shared<MockBackend>(MockScript::from_json(doc));
    auto handle = std::make_unique<sm_mock_server>();
    handle->server = std::make_unique<MockServer>(
        backend, kind == "tcp" ? Endpoint::Kind::kTcp : Endpoint::Kind::kHttp,
        host && *host ? host : "127.0.0.1", port);
    handle->server->start();
    *out = handle.release();
  });
}

sm_status sm_mock_server_endpoint(const sm_mock_server* server, char** endpoint) {
  return guarded([&] {
    require(server && endpoint, "server/out");
    *endpoint = dup_string(server->server->endpoint().to_string());
  });
}

sm_status sm_mock_server_attempts(const sm_mock_server* server, const char* type,
                                  const char* job_id, uint32_t* out) {
  return guarded([&] {
    require(server && type && job_id && out, "server/type/job/out");
    *out = server->server->backend().attempts(type, job_id);
  });
}

void sm_mock_server_close(sm_mock_server* server) {
  if (!server) return;
  server->server->stop();
  delete server;
}

}  // extern "C"
