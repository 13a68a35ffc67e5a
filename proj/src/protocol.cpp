#include "protocol.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "jsonl.hpp"

namespace slicemend {

// ---------------------------------------------------------------------------
// Messages

GenerationRequest GenerationRequest::from_job(const GenerationJob& job) {
  GenerationRequest r;
  r.job_id = job.job_id;
  r.source_ref = job.source_ref;
  r.prompt = job.prompt.prompt;
  r.positive_prompt = job.prompt.positive_prompt;
  r.negative_prompt = job.prompt.negative_prompt;
  r.condition_kind = job.prompt.condition_kind;
  r.inference_steps = job.prompt.inference_steps;
  r.seed = job.seed;
  r.edits = job.spec.substitutions;
  return r;
}

namespace {

json edits_json(const std::vector<Substitution>& edits) {
  json out = json::array();
  for (const auto& e : edits) {
    out.push_back({{"attribute", e.attribute}, {"from", e.old_value}, {"to", e.new_value}});
  }
  return out;
}

[[noreturn]] void protocol_fail(const std::string& job_id, const std::string& what) {
  fail(ErrorKind::kProtocol, "job \"" + job_id + "\": " + what);
}

void require_envelope(const json& j, const char* type, const std::string& job_id) {
  if (!j.is_object()) protocol_fail(job_id, "response is not a JSON object");
  if (j.value("type", "") != type) {
    protocol_fail(job_id, std::string("expected message type \"") + type + "\"");
  }
  if (j.value("version", "") != kWireVersion) protocol_fail(job_id, "unsupported wire version");
}

std::string string_field(const json& j, const char* field, const std::string& job_id) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_string()) {
    protocol_fail(job_id, std::string("field \"") + field + "\" missing or not a string");
  }
  return it->get<std::string>();
}

}  // namespace

json to_json(const GenerationRequest& m) {
  return {{"type", "generate"},
          {"version", kWireVersion},
          {"job_id", m.job_id},
          {"source_ref", m.source_ref},
          {"prompt", m.prompt},
          {"positive_prompt", m.positive_prompt},
          {"negative_prompt", m.negative_prompt},
          {"condition_kind", m.condition_kind},
          {"inference_steps", m.inference_steps},
          {"seed", m.seed},
          {"edits", edits_json(m.edits)}};
}

json to_json(const GenerationResponse& m) {
  return {{"type", "generate_result"},
          {"version", kWireVersion},
          {"job_id", m.job_id},
          {"status", m.status == GenerationStatus::kOk ? "ok" : "failed"},
          {"generated_ref", m.generated_ref},
          {"backend_meta", m.backend_meta}};
}

json to_json(const FilterRequest& m) {
  return {{"type", "filter"},
          {"version", kWireVersion},
          {"job_id", m.job_id},
          {"generated_ref", m.generated_ref},
          {"questions", m.questions},
          {"instruction", m.instruction}};
}

json filter_response_json(const std::string& job_id, const std::string& raw_answer) {
  return {{"type", "filter_result"},
          {"version", kWireVersion},
          {"job_id", job_id},
          {"raw_answer", raw_answer}};
}

json to_json(const Hello& m) {
  return {{"type", "hello_result"},
          {"version", kWireVersion},
          {"backend", m.backend},
          {"capabilities", m.capabilities},
          {"deterministic", m.deterministic}};
}

json hello_request_json() { return {{"type", "hello"}, {"version", kWireVersion}}; }

GenerationRequest generation_request_from_json(const json& j) {
  const std::string id = j.is_object() ? j.value("job_id", "") : "";
  require_envelope(j, "generate", id);
  GenerationRequest r;
  r.job_id = string_field(j, "job_id", id);
  r.source_ref = string_field(j, "source_ref", id);
  r.prompt = string_field(j, "prompt", id);
  r.positive_prompt = string_field(j, "positive_prompt", id);
  r.negative_prompt = string_field(j, "negative_prompt", id);
  r.condition_kind = string_field(j, "condition_kind", id);
  try {
    r.inference_steps = j.at("inference_steps").get<std::uint32_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("edits")) {
      r.edits.push_back({e.at("attribute").get<std::string>(), e.at("from").get<std::string>(),
                         e.at("to").get<std::string>()});
    }
  } catch (const json::exception& e) {
    protocol_fail(id, e.what());
  }
  return r;
}

FilterRequest filter_request_from_json(const json& j) {
  const std::string id = j.is_object() ? j.value("job_id", "") : "";
  require_envelope(j, "filter", id);
  FilterRequest r;
  r.job_id = string_field(j, "job_id", id);
  r.generated_ref = string_field(j, "generated_ref", id);
  r.instruction = string_field(j, "instruction", id);
  try {
    r.questions = j.at("questions").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    protocol_fail(id, e.what());
  }
  return r;
}

GenerationResponse generation_response_from_json(const json& j, const std::string& job_id) {
  require_envelope(j, "generate_result", job_id);
  GenerationResponse r;
  r.job_id = string_field(j, "job_id", job_id);
  if (r.job_id != job_id) protocol_fail(job_id, "response carries job_id \"" + r.job_id + "\"");
  const std::string status = string_field(j, "status", job_id);
  if (status == "ok") {
    r.status = GenerationStatus::kOk;
  } else if (status == "failed") {
    r.status = GenerationStatus::kFailed;
  } else {
    protocol_fail(job_id, "unknown status \"" + status + "\"");
  }
  r.generated_ref = string_field(j, "generated_ref", job_id);
  if (r.status == GenerationStatus::kOk && r.generated_ref.empty()) {
    protocol_fail(job_id, "status ok with an empty generated_ref");
  }
  if (j.contains("backend_meta")) {
    try {
      r.backend_meta = j.at("backend_meta").get<std::map<std::string, std::string>>();
    } catch (const json::exception&) {
      protocol_fail(job_id, "backend_meta must map strings to strings");
    }
  }
  return r;
}

FilterResponse filter_response_from_json(const json& j, const std::string& job_id,
                                         std::size_t question_count) {
  require_envelope(j, "filter_result", job_id);
  FilterResponse r;
  r.job_id = string_field(j, "job_id", job_id);
  if (r.job_id != job_id) protocol_fail(job_id, "response carries job_id \"" + r.job_id + "\"");
  r.raw_answer = string_field(j, "raw_answer", job_id);
  r.parsed = parse_answer(r.raw_answer, question_count);
  return r;
}

Hello hello_from_json(const json& j) {
  require_envelope(j, "hello_result", "");
  Hello h;
  h.backend = j.value("backend", "");
  try {
    h.capabilities = j.at("capabilities").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kProtocol, std::string("hello: ") + e.what());
  }
  h.deterministic = j.value("deterministic", false);
  return h;
}

std::string serialize(const json& message) { return message.dump(); }

std::string encode_frame(const std::string& payload) {
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(payload.size() + 4);
  out.push_back(static_cast<char>((n >> 24) & 0xFF));
  out.push_back(static_cast<char>((n >> 16) & 0xFF));
  out.push_back(static_cast<char>((n >> 8) & 0xFF));
  out.push_back(static_cast<char>(n & 0xFF));
  out += payload;
  return out;
}

std::optional<std::vector<std::uint8_t>> parse_answer(const std::string& raw,
                                                      std::size_t question_count) {
  std::vector<std::uint8_t> out;
  std::istringstream in(raw);
  std::string token;
  while (in >> token) {
    if (token == "1") {
      out.push_back(1);
    } else if (token == "0") {
      out.push_back(0);
    } else {
      return std::nullopt;
    }
  }
  if (out.size() != question_count || out.empty()) return std::nullopt;
  return out;
}

// ---------------------------------------------------------------------------
// Endpoints and connections

Endpoint Endpoint::parse(const std::string& text) {
  Endpoint ep;
  std::string rest;
  if (text.rfind("tcp://", 0) == 0) {
    ep.kind = Kind::kTcp;
    rest = text.substr(6);
  } else if (text.rfind("http://", 0) == 0) {
    ep.kind = Kind::kHttp;
    rest = text.substr(7);
  } else {
    fail(ErrorKind::kConfig, "endpoint \"" + text + "\" must start with tcp:// or http://");
  }
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0) {
    fail(ErrorKind::kConfig, "endpoint \"" + text + "\" needs host:port");
  }
  ep.host = rest.substr(0, colon);
  try {
    const int port = std::stoi(rest.substr(colon + 1));
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(port);
  } catch (const std::exception&) {
    fail(ErrorKind::kConfig, "endpoint \"" + text + "\" has an invalid port");
  }
  return ep;
}

std::string Endpoint::to_string() const {
  return std::string(kind == Kind::kTcp ? "tcp://" : "http://") + host + ":" +
         std::to_string(port);
}

namespace {

using Clock = std::chrono::steady_clock;

int remaining_ms(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return left.count() < 0 ? 0 : static_cast<int>(left.count());
}

class TcpConnection final : public Connection {
 public:
  TcpConnection(std::string host, std::uint16_t port) : host_(std::move(host)), port_(port) {}
  ~TcpConnection() override { close_fd(); }

  std::string exchange(const std::string& payload, std::chrono::milliseconds timeout) override {
    const auto deadline = Clock::now() + timeout;
    try {
      if (fd_ < 0) connect_to(deadline);
      const std::string frame = encode_frame(payload);
      write_all(frame.data(), frame.size(), deadline);
      unsigned char header[4];
      read_exact(reinterpret_cast<char*>(header), 4, deadline);
      const std::uint32_t n = (std::uint32_t{header[0]} << 24) | (std::uint32_t{header[1]} << 16) |
                              (std::uint32_t{header[2]} << 8) | std::uint32_t{header[3]};
      if (n > kMaxFrameBytes) throw TransportError("frame too large");
      std::string body(n, '\0');
      read_exact(body.data(), n, deadline);
      return body;
    } catch (const TransportError&) {
      close_fd();
      throw;
    }
  }

 private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void connect_to(Clock::time_point deadline) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res) != 0 || !res) {
      throw TransportError("cannot resolve " + host_);
    }
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
    int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd < 0) throw TransportError("socket() failed");
    fd_ = fd;
    ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
      if (errno != EINPROGRESS) throw TransportError("connect failed: " + std::string(std::strerror(errno)));
      pollfd p{fd, POLLOUT, 0};
      if (::poll(&p, 1, remaining_ms(deadline)) <= 0) throw TransportError("connect timed out");
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) throw TransportError("connect failed: " + std::string(std::strerror(err)));
    }
  }

  void write_all(const char* data, std::size_t n, Clock::time_point deadline) {
    while (n > 0) {
      ssize_t w = ::send(fd_, data, n, MSG_NOSIGNAL);
      if (w > 0) {
        data += w;
        n -= static_cast<std::size_t>(w);
        continue;
      }
      if (w < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) {
        pollfd p{fd_, POLLOUT, 0};
        if (::poll(&p, 1, remaining_ms(deadline)) <= 0) throw TransportError("send timed out");
        continue;
      }
      throw TransportError("send failed");
    }
  }

  void read_exact(char* data, std::size_t n, Clock::time_point deadline) {
    while (n > 0) {
      ssize_t r = ::recv(fd_, data, n, 0);
      if (r > 0) {
        data += r;
        n -= static_cast<std::size_t>(r);
        continue;
      }
      if (r == 0) throw TransportError("connection closed by peer");
      if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) {
        pollfd p{fd_, POLLIN, 0};
        if (::poll(&p, 1, remaining_ms(deadline)) <= 0) throw TransportError("receive timed out");
        continue;
      }
      throw TransportError("recv failed");
    }
  }

  std::string host_;
  std::uint16_t port_;
  int fd_ = -1;
};

class HttpConnection final : public Connection {
 public:
  HttpConnection(std::string host, std::uint16_t port) : client_(std::move(host), port) {
    client_.set_keep_alive(true);
    client_.set_tcp_nodelay(true);
  }

  std::string exchange(const std::string& payload, std::chrono::milliseconds timeout) override {
    std::string type;
    try {
      type = json::parse(payload).value("type", "");
    } catch (const json::exception&) {
      throw TransportError("request payload is not JSON");
    }
    const auto secs = timeout.count() / 1000;
    const auto usecs = (timeout.count() % 1000) * 1000;
    client_.set_connection_timeout(secs, usecs);
    client_.set_read_timeout(secs, usecs);
    client_.set_write_timeout(secs, usecs);
    auto res = client_.Post(("/v1/" + type).c_str(), payload, "application/json");
    if (!res) throw TransportError("http request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError("http status " + std::to_string(res->status));
    return res->body;
  }

 private:
  httplib::Client client_;
};

}  // namespace

ConnectionFactory connection_factory(const Endpoint& endpoint) {
  if (endpoint.kind == Endpoint::Kind::kHttp) {
    return [endpoint] { return std::make_unique<HttpConnection>(endpoint.host, endpoint.port); };
  }
  return [endpoint] { return std::make_unique<TcpConnection>(endpoint.host, endpoint.port); };
}

// ---------------------------------------------------------------------------
// Client

void ClientLimits::validate() const {
  if (max_in_flight < 1) fail(ErrorKind::kConfig, "max_in_flight must be >= 1");
  if (timeout.count() < 1) fail(ErrorKind::kConfig, "timeout must be >= 1 ms");
}

BackendClient::BackendClient(ConnectionFactory factory, ClientLimits limits)
    : factory_(std::move(factory)), limits_(limits) {
  limits_.validate();
}

namespace {

// Drives `attempt(conn, i)` for every index on up to max_in_flight threads.
// Each thread owns one connection and replaces it after a transport failure.
template <typename Result, typename Attempt, typename OnExhausted>
std::vector<Result> run_batch(std::size_t n, const ConnectionFactory& factory,
                              const ClientLimits& limits, Attempt attempt,
                              OnExhausted on_exhausted) {
  std::vector<Result> results(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr error;
  std::mutex error_mu;

  auto worker = [&] {
    std::unique_ptr<Connection> conn;
    for (;;) {
      if (abort.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        std::string last_error;
        bool done = false;
        for (unsigned a = 0; a <= limits.retries && !done; ++a) {
          if (!conn) conn = factory();
          try {
            std::optional<Result> r = attempt(*conn, i);
            if (r) {
              results[i] = std::move(*r);
              done = true;
            } else {
              last_error = "backend reported failure";
            }
          } catch (const TransportError& e) {
            conn.reset();
            last_error = e.what();
          }
        }
        if (!done) results[i] = on_exhausted(i, last_error, limits.retries + 1);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        abort.store(true);
        return;
      }
    }
  };

  const std::size_t threads_wanted = std::min<std::size_t>(limits.max_in_flight, n);
  std::vector<std::thread> threads;
  threads.reserve(threads_wanted);
  for (std::size_t t = 0; t < threads_wanted; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return results;
}

json parse_payload(const std::string& payload, const std::string& job_id) {
  try {
    return json::parse(payload);
  } catch (const json::parse_error&) {
    fail(ErrorKind::kProtocol, "job \"" + job_id + "\": response is not valid JSON");
  }
}

}  // namespace

std::vector<GenerationResponse> BackendClient::generate_batch(
    const std::vector<GenerationRequest>& jobs) {
  std::vector<std::string> payloads;
  payloads.reserve(jobs.size());
  for (const auto& j : jobs) payloads.push_back(serialize(to_json(j)));
  const auto timeout = limits_.timeout;
  return run_batch<GenerationResponse>(
      jobs.size(), factory_, limits_,
      [&](Connection& conn, std::size_t i) -> std::optional<GenerationResponse> {
        std::string reply = conn.exchange(payloads[i], timeout);
        GenerationResponse r = generation_response_from_json(parse_payload(reply, jobs[i].job_id),
                                                             jobs[i].job_id);
        if (r.status == GenerationStatus::kFailed) return std::nullopt;
        return r;
      },
      [&](std::size_t i, const std::string& why, unsigned attempts) {
        GenerationResponse r;
        r.job_id = jobs[i].job_id;
        r.status = GenerationStatus::kFailed;
        r.backend_meta["error"] = why;
        r.backend_meta["attempts"] = std::to_string(attempts);
        return r;
      });
}

std::vector<FilterResponse> BackendClient::filter_batch(
    const std::vector<FilterRequest>& requests) {
  std::vector<std::string> payloads;
  payloads.reserve(requests.size());
  for (const auto& r : requests) payloads.push_back(serialize(to_json(r)));
  const auto timeout = limits_.timeout;
  return run_batch<FilterResponse>(
      requests.size(), factory_, limits_,
      [&](Connection& conn, std::size_t i) -> std::optional<FilterResponse> {
        std::string reply = conn.exchange(payloads[i], timeout);
        return filter_response_from_json(parse_payload(reply, requests[i].job_id),
                                         requests[i].job_id, requests[i].questions.size());
      },
      [&](std::size_t i, const std::string& why, unsigned) {
        FilterResponse r;
        r.job_id = requests[i].job_id;
        r.transport_ok = false;
        r.error = why;
        return r;
      });
}

Hello BackendClient::handshake() {
  auto conn = factory_();
  std::string reply;
  try {
    reply = conn->exchange(serialize(hello_request_json()), limits_.timeout);
  } catch (const TransportError& e) {
    fail(ErrorKind::kProtocol, std::string("handshake failed: ") + e.what());
  }
  return hello_from_json(parse_payload(reply, "<hello>"));
}

std::vector<GenerationResponse> generate_batch(const std::vector<GenerationJob>& jobs,
                                               const Endpoint& endpoint,
                                               const ClientLimits& limits) {
  std::vector<GenerationRequest> requests;
  requests.reserve(jobs.size());
  for (const auto& j : jobs) requests.push_back(GenerationRequest::from_job(j));
  return BackendClient(connection_factory(endpoint), limits).generate_batch(requests);
}

std::vector<FilterResponse> filter_batch(const std::vector<FilterRequest>& requests,
                                         const Endpoint& endpoint, const ClientLimits& limits) {
  return BackendClient(connection_factory(endpoint), limits).filter_batch(requests);
}

// ---------------------------------------------------------------------------
// Generations file

json generation_result_to_json(const GenerationResponse& r) {
  return {{"job_id", r.job_id},
          {"status", r.status == GenerationStatus::kOk ? "ok" : "failed"},
          {"generated_ref", r.generated_ref},
          {"backend_meta", r.backend_meta}};
}

GenerationResponse generation_result_from_json(const json& j) {
  GenerationResponse r;
  r.job_id = require_string(j, "job_id", "generation");
  const std::string status = require_string(j, "status", "generation");
  if (status != "ok" && status != "failed") {
    fail(ErrorKind::kParse, "generation \"" + r.job_id + "\": unknown status " + status);
  }
  r.status = status == "ok" ? GenerationStatus::kOk : GenerationStatus::kFailed;
  r.generated_ref = j.value("generated_ref", "");
  if (j.contains("backend_meta")) {
    r.backend_meta = j.at("backend_meta").get<std::map<std::string, std::string>>();
  }
  return r;
}

void write_generations(const std::string& path, const std::vector<GenerationResponse>& results) {
  std::size_t ok = 0;
  std::vector<json> rows;
  rows.reserve(results.size());
  for (const auto& r : results) {
    ok += r.status == GenerationStatus::kOk ? 1 : 0;
    rows.push_back(generation_result_to_json(r));
  }
  json header = {{"format_version", kFormatVersion},
                 {"type", "generation_results"},
                 {"count", results.size()},
                 {"ok", ok},
                 {"failed", results.size() - ok}};
  write_jsonl(path, header, rows);
}

std::vector<GenerationResponse> read_generations(const std::string& path) {
  JsonLines lines = read_jsonl(path, "generation_results");
  std::vector<GenerationResponse> out;
  for (auto& [lineno, obj] : lines.rows) {
    try {
      out.push_back(generation_result_from_json(obj));
    } catch (const std::exception& e) {
      throw Error(ErrorKind::kParse, path + ": " + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace slicemend
