#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repair_planner.hpp"

namespace slicemend {

using json = nlohmann::json;

// Wire schema v1. Every message is a JSON object with "type" and
// "version":"1"; object keys are serialised in sorted order and without
// whitespace, so a message has exactly one byte representation.
inline constexpr const char* kWireVersion = "1";
inline constexpr const char* kFilterInstruction =
    "For each question, only answer with 1 (yes) or 0 (no). Provide answers separated by "
    "spaces.";

struct GenerationRequest {
  std::string job_id;
  std::string source_ref;
  std::string prompt;
  std::string positive_prompt;
  std::string negative_prompt;
  std::string condition_kind;
  std::uint32_t inference_steps = 30;
  std::uint64_t seed = 0;
  std::vector<Substitution> edits;

  static GenerationRequest from_job(const GenerationJob& job);
};

enum class GenerationStatus { kOk, kFailed };

struct GenerationResponse {
  std::string job_id;
  GenerationStatus status = GenerationStatus::kFailed;
  std::string generated_ref;
  std::map<std::string, std::string> backend_meta;
};

struct FilterRequest {
  std::string job_id;
  std::string generated_ref;
  std::vector<std::string> questions;
  std::string instruction = kFilterInstruction;
};

struct FilterResponse {
  std::string job_id;
  std::string raw_answer;
  // Empty when the answer could not be parsed or the transport failed.
  std::optional<std::vector<std::uint8_t>> parsed;
  bool transport_ok = true;
  std::string error;
};

struct Hello {
  std::string backend;
  std::vector<std::string> capabilities;  // "generate", "filter"
  bool deterministic = true;
};

json to_json(const GenerationRequest& m);
json to_json(const GenerationResponse& m);
json to_json(const FilterRequest& m);
// raw_answer only; parsing happens client side.
json filter_response_json(const std::string& job_id, const std::string& raw_answer);
json to_json(const Hello& m);
json hello_request_json();

GenerationRequest generation_request_from_json(const json& j);
FilterRequest filter_request_from_json(const json& j);
// Protocol errors name the expected job when the payload is malformed.
GenerationResponse generation_response_from_json(const json& j, const std::string& job_id);
FilterResponse filter_response_from_json(const json& j, const std::string& job_id,
                                         std::size_t question_count);
Hello hello_from_json(const json& j);

std::string serialize(const json& message);
// 4-byte big-endian payload length followed by the payload.
std::string encode_frame(const std::string& payload);
inline constexpr std::uint32_t kMaxFrameBytes = 16u << 20;

// Strict answer parsing: whitespace-separated tokens, each
// exactly "1" or "0", one per question. Anything else is a parse failure.
std::optional<std::vector<std::uint8_t>> parse_answer(const std::string& raw,
                                                      std::size_t question_count);

// ---------------------------------------------------------------------------
// Transport

struct Endpoint {
  enum class Kind { kTcp, kHttp };
  Kind kind = Kind::kTcp;
  std::string host;
  std::uint16_t port = 0;

  static Endpoint parse(const std::string& text);
  std::string to_string() const;
};

// Raised by connections for anything the retry loop should absorb.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Connection {
 public:
  virtual ~Connection() = default;
  // Sends one request payload and returns the response payload. Throws
  // TransportError on connect/IO failure or timeout.
  virtual std::string exchange(const std::string& payload, std::chrono::milliseconds timeout) = 0;
};

using ConnectionFactory = std::function<std::unique_ptr<Connection>()>;

ConnectionFactory connection_factory(const Endpoint& endpoint);

struct ClientLimits {
  unsigned max_in_flight = 4;
  std::chrono::milliseconds timeout{30000};
  unsigned retries = 2;

  void validate() const;
};

// Up to max_in_flight requests run concurrently, each on its own connection;
// responses come back in input order. A job whose attempts are exhausted is
// reported as failed, never dropped. Malformed responses abort the batch with
// a protocol error naming the job.
class BackendClient {
 public:
  BackendClient(ConnectionFactory factory, ClientLimits limits);

  std::vector<GenerationResponse> generate_batch(const std::vector<GenerationRequest>& jobs);
  std::vector<FilterResponse> filter_batch(const std::vector<FilterRequest>& requests);
  Hello handshake();

 private:
  ConnectionFactory factory_;
  ClientLimits limits_;
};

std::vector<GenerationResponse> generate_batch(const std::vector<GenerationJob>& jobs,
                                               const Endpoint& endpoint,
                                               const ClientLimits& limits);
std::vector<FilterResponse> filter_batch(const std::vector<FilterRequest>& requests,
                                         const Endpoint& endpoint, const ClientLimits& limits);

json generation_result_to_json(const GenerationResponse& r);
GenerationResponse generation_result_from_json(const json& j);
void write_generations(const std::string& path, const std::vector<GenerationResponse>& results);
std::vector<GenerationResponse> read_generations(const std::string& path);

}  // namespace slicemend
