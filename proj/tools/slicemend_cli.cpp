// Command-line front end. Talks to the library only through the C API.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slicemend/slicemend.h"

using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

constexpr const char* kFormats = R"(File formats (all versioned with "format_version": "1"):
  records.jsonl     header {"format_version":"1","type":"prediction_records"}, then one
                    record per line: image_id, split (train|val), label, prediction,
                    attributes {name: value}, source_ref. "unknown" is a valid value.
  schema.json       {"format_version":"1","attributes":[{"name","values":[...],
                    "prompt_template","question_template"}]}
  token map         {"format_version":"1","entries":[{"attribute","value","phrase"}]}
                    or {"format_version":"1","map":{"redhair":"vibrant red hair"}}
  jobs.jsonl        type "generation_jobs"; one edit job per line
  generations.jsonl type "generation_results"; job_id, status ok|failed, generated_ref
  verdicts.jsonl    type "filter_verdicts"; job_id, decision keep|reject|needs_review
  manifest.jsonl    type "augmentation_manifest"; synthetic entries with provenance
  *.fvec            "FVEC1", u32 N, u32 D (little endian), N*D float32
  --config FILE     JSON with keys records, schema, token_map, task, out_dir and the
                    sections miner{}, plan{}, backend{}; flags override it.
Exit status: 0 success, 1 domain error, 2 usage error.)";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Kind { kString, kInt, kNumber, kList, kFlag };

struct Binding {
  std::string pointer;
  Kind kind;
  std::string text;
  std::vector<std::string> list;
  bool flag = false;
  CLI::Option* opt = nullptr;
};

// A subcommand whose flags write into a JSON context at fixed pointers, on
// top of whatever the config file provided.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& help,
          std::string& config_path)
      : app_(parent.add_subcommand(name, help)) {
    app_->add_option("--config", config_path, "JSON config file; flags override its values");
  }

  CLI::App* app() const { return app_; }

  Command& bind(const std::string& flag, const std::string& pointer, Kind kind,
                const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->pointer = pointer;
    b->kind = kind;
    switch (kind) {
      case Kind::kString: b->opt = app_->add_option(flag, b->text, help); break;
      case Kind::kInt:
        b->opt = app_->add_option(flag, b->text, help)->check(CLI::NonNegativeNumber);
        break;
      case Kind::kNumber: b->opt = app_->add_option(flag, b->text, help)->check(CLI::Number); break;
      case Kind::kList: b->opt = app_->add_option(flag, b->list, help); break;
      case Kind::kFlag: b->opt = app_->add_flag(flag, b->flag, help); break;
    }
    bindings_.push_back(std::move(b));
    return *this;
  }

  void apply(json& ctx) const {
    for (const auto& b : bindings_) {
      if (b->opt->count() == 0) continue;
      json::json_pointer ptr(b->pointer);
      switch (b->kind) {
        case Kind::kString: ctx[ptr] = b->text; break;
        case Kind::kInt: ctx[ptr] = std::stoull(b->text); break;
        case Kind::kNumber: ctx[ptr] = std::stod(b->text); break;
        case Kind::kList: ctx[ptr] = b->list; break;
        case Kind::kFlag: ctx[ptr] = b->flag; break;
      }
    }
  }

 private:
  CLI::App* app_;
  std::vector<std::unique_ptr<Binding>> bindings_;
};

void check(sm_status st) {
  if (st == SM_OK) return;
  if (st == SM_ERR_INVALID_ARGUMENT) throw UsageError(sm_last_error());
  throw DomainError(sm_last_error());
}

std::string take(char* s) {
  std::string out = s ? s : "";
  sm_free_string(s);
  return out;
}

std::string need(const json& ctx, const std::string& pointer, const std::string& flag) {
  json::json_pointer ptr(pointer);
  if (!ctx.contains(ptr) || !ctx[ptr].is_string() || ctx[ptr].get<std::string>().empty()) {
    throw UsageError("missing " + flag + " (or its config entry)");
  }
  return ctx[ptr].get<std::string>();
}

json section(const json& ctx, const char* name) {
  return ctx.contains(name) && ctx[name].is_object() ? ctx[name] : json::object();
}

void emit(const std::string& text, const json& ctx) {
  if (ctx.contains("out") && ctx["out"].is_string()) {
    std::ofstream f(ctx["out"].get<std::string>(), std::ios::binary);
    if (!f) throw DomainError("cannot write " + ctx["out"].get<std::string>());
    f << text << '\n';
  } else {
    std::cout << text << '\n';
  }
}

struct DatasetHandle {
  sm_dataset* ds = nullptr;
  ~DatasetHandle() { sm_dataset_close(ds); }
};

void open_dataset(DatasetHandle& h, const std::string& records, const std::string& schema) {
  check(sm_dataset_open(records.c_str(), schema.c_str(), 0, &h.ds, nullptr));
}

json backend_request(const json& ctx) {
  json req = section(ctx, "backend");
  if (!req.contains("endpoint")) throw UsageError("missing --endpoint (or backend.endpoint)");
  return req;
}

int run_mock_backend(const json& ctx) {
  const std::string script_path = need(ctx, "/script", "--script");
  std::ifstream in(script_path);
  if (!in) throw DomainError("cannot open " + script_path);
  std::string script((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  // Block the signals before the server thread starts so only sigwait sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  sm_mock_server* server = nullptr;
  const std::string transport = ctx.value("transport", "tcp");
  const std::string host = ctx.value("host", "127.0.0.1");
  const auto port = static_cast<uint16_t>(ctx.value("port", 0));
  check(sm_mock_server_start(script.c_str(), transport.c_str(), host.c_str(), port, &server));
  char* ep = nullptr;
  check(sm_mock_server_endpoint(server, &ep));
  const std::string endpoint = take(ep);
  std::cout << endpoint << std::endl;
  if (ctx.contains("ready_file")) {
    std::ofstream(ctx["ready_file"].get<std::string>()) << endpoint << '\n';
  }
  int sig = 0;
  sigwait(&set, &sig);
  sm_mock_server_close(server);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rare-case slice mining and targeted repair pipeline"};
  app.footer(kFormats);
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("slicemend ") + sm_version() +
                                        " (file formats v" + sm_format_version() + ")");
  std::string config_path;

  auto miner_flags = [](Command& c) {
    c.bind("--rho", "/miner/rho", Kind::kNumber, "rarity threshold on support fraction")
        .bind("--epsilon", "/miner/epsilon", Kind::kNumber, "accuracy gap threshold")
        .bind("--max-depth", "/miner/max_depth", Kind::kInt, "largest slice depth")
        .bind("--min-val-support", "/miner/min_val_support", Kind::kInt,
              "val records needed for a verdict")
        .bind("--min-train-support", "/miner/min_train_support", Kind::kInt,
              "train records needed to extend a slice")
        .bind("--rarity-split", "/miner/rarity_split", Kind::kString, "train or val")
        .bind("--top-k", "/miner/top_k", Kind::kInt, "bug slices to report")
        .bind("--max-candidates", "/miner/max_candidates", Kind::kInt, "candidate budget")
        .bind("--workers", "/miner/workers", Kind::kInt, "evaluation threads");
  };
  auto backend_flags = [](Command& c) {
    c.bind("--endpoint", "/backend/endpoint", Kind::kString, "tcp://host:port or http://host:port")
        .bind("--max-in-flight", "/backend/max_in_flight", Kind::kInt, "concurrent requests")
        .bind("--timeout-ms", "/backend/timeout_ms", Kind::kInt, "per-attempt timeout")
        .bind("--retries", "/backend/retries", Kind::kInt, "extra attempts per job");
  };

  Command ingest(app, "ingest", "validate and index a records file", config_path);
  ingest.bind("--records", "/records", Kind::kString, "records.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--lenient", "/lenient", Kind::kFlag, "skip bad lines instead of failing")
      .bind("--out", "/normalized", Kind::kString, "write the accepted records here");

  Command mine(app, "mine", "mine rare-case bug slices", config_path);
  mine.bind("--records", "/records", Kind::kString, "records.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--out", "/out", Kind::kString, "report path (default stdout)")
      .bind("--rank", "/rank", Kind::kFlag, "print depth-1 values ranked by error instead");
  miner_flags(mine);

  Command plan(app, "plan", "plan attribute-edit generation jobs for one slice", config_path);
  plan.bind("--records", "/records", Kind::kString, "records.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--slice", "/plan/slice", Kind::kString, "e.g. hair=red,skin=brown")
      .bind("--target-count", "/plan/target_count", Kind::kInt, "validated images wanted")
      .bind("--overgen", "/plan/overgen_factor", Kind::kNumber, "over-generation factor")
      .bind("--seed", "/plan/seed", Kind::kInt, "source selection seed")
      .bind("--prompt-template", "/plan/prompt_template", Kind::kString, "prompt template")
      .bind("--token-map", "/token_map", Kind::kString, "token map JSON")
      .bind("--out", "/out", Kind::kString, "jobs.jsonl");

  Command generate(app, "generate", "send jobs to a generation backend", config_path);
  generate.bind("--jobs", "/jobs", Kind::kString, "jobs.jsonl")
      .bind("--out", "/out", Kind::kString, "generations.jsonl");
  backend_flags(generate);

  Command filter(app, "filter", "verify generated images with a question-answering backend", config_path);
  filter.bind("--jobs", "/jobs", Kind::kString, "jobs.jsonl")
      .bind("--generations", "/generations", Kind::kString, "generations.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--task", "/task", Kind::kString, "object or face")
      .bind("--ledger-out", "/ledger_out", Kind::kString, "pass-rate ledger JSON")
      .bind("--verdicts-out", "/verdicts_out", Kind::kString, "verdicts.jsonl");
  backend_flags(filter);

  Command augment(app, "augment", "build the augmentation manifest from kept jobs", config_path);
  augment.bind("--records", "/records", Kind::kString, "base records.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--jobs", "/jobs", Kind::kList, "jobs.jsonl (repeatable, one per slice)")
      .bind("--generations", "/generations", Kind::kList, "generations.jsonl (repeatable)")
      .bind("--verdicts", "/verdicts", Kind::kList, "verdicts.jsonl (repeatable)")
      .bind("--target-count", "/target_count", Kind::kInt, "entries per slice (default: plan target)")
      .bind("--retrain-out", "/retrain_out", Kind::kString, "retrain config stub")
      .bind("--out", "/out", Kind::kString, "manifest.jsonl");

  Command report(app, "report", "before/after repair report", config_path);
  report.bind("--before", "/before", Kind::kString, "records before repair")
      .bind("--after", "/after", Kind::kString, "records after repair")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--slice", "/slices", Kind::kList, "slice to report (repeatable)")
      .bind("--ledger", "/ledger", Kind::kString, "pass-rate ledger to include")
      .bind("--out", "/out", Kind::kString, "report path (default stdout)");
  miner_flags(report);

  Command metrics(app, "metrics", "generation-quality metrics over feature files", config_path);
  metrics.bind("--real", "/real", Kind::kString, "real features (.fvec)")
      .bind("--gen", "/generated", Kind::kString, "generated features (.fvec)")
      .bind("--distances", "/distances", Kind::kString, "pairwise distance matrix (.fvec)")
      .bind("--pairs-u", "/pairs_u", Kind::kString, "first embeddings of each pair (.fvec)")
      .bind("--pairs-v", "/pairs_v", Kind::kString, "second embeddings of each pair (.fvec)")
      .bind("--out", "/out", Kind::kString, "metrics JSON (default stdout)");

  Command simulate(app, "simulate", "synthesize a population with injected bugs", config_path);
  simulate.bind("--spec", "/spec", Kind::kString, "population spec JSON")
      .bind("--out-dir", "/out_dir", Kind::kString, "output directory");

  Command simulate_repair(app, "simulate-repair", "redraw predictions after augmentation", config_path);
  simulate_repair.bind("--records", "/records", Kind::kString, "records.jsonl")
      .bind("--schema", "/schema", Kind::kString, "schema.json")
      .bind("--manifest", "/manifest", Kind::kString, "manifest.jsonl")
      .bind("--ground-truth", "/ground_truth", Kind::kString, "ground_truth.json from simulate")
      .bind("--out", "/out", Kind::kString, "records after repair");

  Command mock(app, "mock-backend", "run the scripted mock backend until interrupted", config_path);
  mock.bind("--script", "/script", Kind::kString, "mock script JSON")
      .bind("--transport", "/transport", Kind::kString, "tcp or http")
      .bind("--host", "/host", Kind::kString, "bind address")
      .bind("--port", "/port", Kind::kInt, "port (0 picks one)")
      .bind("--ready-file", "/ready_file", Kind::kString, "write the endpoint here once listening");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    json ctx = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw UsageError("cannot open config " + config_path);
      try {
        ctx = json::parse(in);
      } catch (const json::parse_error& e) {
        throw UsageError("config " + config_path + " is not valid JSON: " + e.what());
      }
      if (!ctx.is_object()) throw UsageError("config must be a JSON object");
      if (ctx.contains("format_version") && ctx["format_version"] != sm_format_version()) {
        throw DomainError("version error: config format_version " + ctx["format_version"].dump() +
                          " is not supported; this build reads format_version \"" +
                          sm_format_version() + "\". Re-save the config with the current field names.");
      }
      ctx.erase("out");
    }

    char* out = nullptr;
    if (ingest.app()->parsed()) {
      ingest.apply(ctx);
      sm_dataset* ds = nullptr;
      char* rejected = nullptr;
      check(sm_dataset_open(need(ctx, "/records", "--records").c_str(),
                            need(ctx, "/schema", "--schema").c_str(), ctx.value("lenient", false) ? 1 : 0,
                            &ds, &rejected));
      DatasetHandle h{ds};
      uint64_t train = 0, val = 0;
      check(sm_dataset_split_size(ds, "train", &train));
      check(sm_dataset_split_size(ds, "val", &val));
      if (ctx.contains("normalized")) check(sm_dataset_write(ds, ctx["normalized"].get<std::string>().c_str()));
      json summary = {{"train", train}, {"val", val}, {"rejected", json::parse(take(rejected))}};
      std::cout << summary.dump(2) << '\n';
    } else if (mine.app()->parsed()) {
      mine.apply(ctx);
      DatasetHandle h;
      open_dataset(h, need(ctx, "/records", "--records"), need(ctx, "/schema", "--schema"));
      const std::string cfg = section(ctx, "miner").dump();
      if (ctx.value("rank", false)) {
        check(sm_rank_attributes(h.ds, cfg.c_str(), &out));
      } else {
        check(sm_mine(h.ds, cfg.c_str(), &out));
      }
      emit(take(out), ctx);
    } else if (plan.app()->parsed()) {
      plan.apply(ctx);
      DatasetHandle h;
      open_dataset(h, need(ctx, "/records", "--records"), need(ctx, "/schema", "--schema"));
      json req = section(ctx, "plan");
      req["token_map"] = need(ctx, "/token_map", "--token-map");
      req["out"] = need(ctx, "/out", "--out");
      if (!req.contains("slice")) throw UsageError("missing --slice");
      if (!req.contains("target_count")) throw UsageError("missing --target-count");
      check(sm_plan(h.ds, req.dump().c_str(), &out));
      std::cout << take(out) << '\n';
    } else if (generate.app()->parsed()) {
      generate.apply(ctx);
      json req = backend_request(ctx);
      req["jobs"] = need(ctx, "/jobs", "--jobs");
      req["out"] = need(ctx, "/out", "--out");
      check(sm_generate(req.dump().c_str(), &out));
      std::cout << take(out) << '\n';
    } else if (filter.app()->parsed()) {
      filter.apply(ctx);
      json req = backend_request(ctx);
      req["jobs"] = need(ctx, "/jobs", "--jobs");
      req["generations"] = need(ctx, "/generations", "--generations");
      req["schema"] = need(ctx, "/schema", "--schema");
      req["task"] = ctx.value("task", "object");
      req["ledger_out"] = need(ctx, "/ledger_out", "--ledger-out");
      req["verdicts_out"] = need(ctx, "/verdicts_out", "--verdicts-out");
      check(sm_filter(req.dump().c_str(), &out));
      std::cout << take(out) << '\n';
    } else if (augment.app()->parsed()) {
      augment.apply(ctx);
      DatasetHandle h;
      open_dataset(h, need(ctx, "/records", "--records"), need(ctx, "/schema", "--schema"));
      json req = {{"out", need(ctx, "/out", "--out")}, {"base_dataset_ref", ctx["records"]}};
      for (const char* key : {"jobs", "generations", "verdicts"}) {
        if (!ctx.contains(key)) throw UsageError(std::string("missing --") + key);
        req[key] = ctx[key];
      }
      if (ctx.contains("target_count")) req["target_count"] = ctx["target_count"];
      if (ctx.contains("retrain_out")) req["retrain_out"] = ctx["retrain_out"];
      check(sm_augment(h.ds, req.dump().c_str(), &out));
      std::cout << take(out) << '\n';
    } else if (report.app()->parsed()) {
      report.apply(ctx);
      const std::string schema = need(ctx, "/schema", "--schema");
      DatasetHandle before, after;
      open_dataset(before, need(ctx, "/before", "--before"), schema);
      open_dataset(after, need(ctx, "/after", "--after"), schema);
      json req = {{"slices", ctx.value("slices", std::vector<std::string>{})},
                  {"miner", section(ctx, "miner")}};
      if (ctx.contains("ledger")) req["ledger"] = ctx["ledger"];
      check(sm_repair_report(before.ds, after.ds, req.dump().c_str(), &out));
      emit(take(out), ctx);
    } else if (metrics.app()->parsed()) {
      metrics.apply(ctx);
      json req = {{"real", need(ctx, "/real", "--real")}, {"generated", need(ctx, "/generated", "--gen")}};
      for (const char* key : {"distances", "pairs_u", "pairs_v"}) {
        if (ctx.contains(key)) req[key] = ctx[key];
      }
      check(sm_metrics(req.dump().c_str(), &out));
      emit(take(out), ctx);
    } else if (simulate.app()->parsed()) {
      simulate.apply(ctx);
      const std::string spec_path = need(ctx, "/spec", "--spec");
      std::ifstream in(spec_path);
      if (!in) throw DomainError("cannot open " + spec_path);
      std::string spec((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      check(sm_simulate(spec.c_str(), need(ctx, "/out_dir", "--out-dir").c_str(), &out));
      const json truth = json::parse(take(out));
      std::cout << json({{"injected_bugs", truth["injected_bugs"]}}).dump(2) << '\n';
    } else if (simulate_repair.app()->parsed()) {
      simulate_repair.apply(ctx);
      DatasetHandle h;
      open_dataset(h, need(ctx, "/records", "--records"), need(ctx, "/schema", "--schema"));
      json req = {{"manifest", need(ctx, "/manifest", "--manifest")},
                  {"ground_truth", need(ctx, "/ground_truth", "--ground-truth")},
                  {"out", need(ctx, "/out", "--out")}};
      check(sm_simulate_repair(h.ds, req.dump().c_str(), &out));
      std::cout << take(out) << '\n';
    } else if (mock.app()->parsed()) {
      mock.apply(ctx);
      return run_mock_backend(ctx);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  } catch (const DomainError& e) {
    std::cerr << e.what() << '\n';
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  }
  return kExitOk;
}
