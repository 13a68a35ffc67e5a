#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "protocol.hpp"

namespace slicemend {

// Behaviour of the scripted generation/filter mock. Every random outcome is a
// keyed draw on (seed, job_id, question), so it does not depend on request
// order or concurrency.
struct MockScript {
  std::uint64_t seed = 0;
  // job_id -> number of leading attempts answered with status "failed".
  std::map<std::string, unsigned> transient_failures;
  std::set<std::string> permanent_failures;
  double permanent_failure_rate = 0.0;
  // job_id -> number of leading attempts that get no reply at all.
  std::map<std::string, unsigned> stall_attempts;
  // attribute -> probability that its question is answered "1".
  std::map<std::string, double> pass_probability;
  double default_pass_probability = 1.0;
  double label_pass_probability = 1.0;
  // Probability that a filter reply is not a well-formed 0/1 list.
  double undecided_rate = 0.0;
  // The TCP server holds up to this many replies and releases them in a
  // seeded random order.
  std::size_t shuffle_window = 1;

  void validate() const;
  json to_json() const;
  static MockScript from_json(const json& doc);
  static MockScript load(const std::string& path);
};

// "mock://gen/<job_id>?hair=red&emotion=sad"
std::string mock_generated_ref(const std::string& job_id, const std::vector<Substitution>& edits);
// Edits recorded in a mock ref, or nullopt for foreign refs.
std::optional<std::vector<std::pair<std::string, std::string>>> parse_mock_ref(
    const std::string& ref);

bool mock_permanent_failure(const MockScript& script, const std::string& job_id);

class MockBackend {
 public:
  explicit MockBackend(MockScript script);

  // Reply payload for one request payload; nullopt when the script stalls it.
  std::optional<std::string> handle(const std::string& payload);

  unsigned attempts(const std::string& type, const std::string& job_id) const;
  unsigned max_attempts() const;
  std::uint64_t requests() const;
  const MockScript& script() const { return script_; }

 private:
  std::string generate(const GenerationRequest& req, unsigned attempt);
  std::string filter(const FilterRequest& req);

  MockScript script_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, unsigned> attempts_;
  std::uint64_t requests_ = 0;
};

// Connections that call the backend directly; a stall surfaces as a timeout.
ConnectionFactory in_process_factory(std::shared_ptr<MockBackend> backend);

// The http transport serves at most 96 keep-alive clients at once; the tcp
// transport has no such limit.
class MockServer {
 public:
  MockServer(std::shared_ptr<MockBackend> backend, Endpoint::Kind kind,
             std::string host = "127.0.0.1", std::uint16_t port = 0);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  void start();
  void stop();
  Endpoint endpoint() const;
  MockBackend& backend() { return *backend_; }

  struct Impl;

 private:
  std::shared_ptr<MockBackend> backend_;
  Endpoint endpoint_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace slicemend
