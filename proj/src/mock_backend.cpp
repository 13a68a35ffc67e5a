#include "mock_backend.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>

#include <httplib.h>

#include "rng.hpp"

namespace slicemend {

// ---------------------------------------------------------------------------
// Script

namespace {

void check_probability(double p, const std::string& what) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::kConfig, "mock script: " + what + " must be in [0,1]");
}

constexpr std::uint64_t kUndecidedSalt = 0x5eedULL << 32;
constexpr std::uint64_t kPermanentSalt = 0xfa11ULL << 32;

}  // namespace

void MockScript::validate() const {
  check_probability(permanent_failure_rate, "permanent_failure_rate");
  check_probability(default_pass_probability, "default_pass_probability");
  check_probability(label_pass_probability, "label_pass_probability");
  check_probability(undecided_rate, "undecided_rate");
  for (const auto& [attr, p] : pass_probability) check_probability(p, "pass_probability." + attr);
  if (shuffle_window < 1) fail(ErrorKind::kConfig, "mock script: shuffle_window must be >= 1");
}

json MockScript::to_json() const {
  return {{"format_version", kFormatVersion},
          {"seed", seed},
          {"transient_failures", transient_failures},
          {"permanent_failures", permanent_failures},
          {"permanent_failure_rate", permanent_failure_rate},
          {"stall_attempts", stall_attempts},
          {"pass_probability", pass_probability},
          {"default_pass_probability", default_pass_probability},
          {"label_pass_probability", label_pass_probability},
          {"undecided_rate", undecided_rate},
          {"shuffle_window", shuffle_window}};
}

MockScript MockScript::from_json(const json& doc) {
  static const std::set<std::string> known = {
      "format_version",   "seed",          "transient_failures",       "permanent_failures",
      "permanent_failure_rate", "stall_attempts", "pass_probability", "default_pass_probability",
      "label_pass_probability", "undecided_rate", "shuffle_window"};
  if (!doc.is_object()) fail(ErrorKind::kConfig, "mock script must be a JSON object");
  if (doc.contains("format_version")) {
    require_format_version(doc.at("format_version").get<std::string>(), "mock script");
  }
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!known.count(it.key())) fail(ErrorKind::kConfig, "mock script: unknown field \"" + it.key() + "\"");
  }
  MockScript s;
  try {
    s.seed = doc.value("seed", std::uint64_t{0});
    s.transient_failures = doc.value("transient_failures", s.transient_failures);
    s.permanent_failures = doc.value("permanent_failures", s.permanent_failures);
    s.permanent_failure_rate = doc.value("permanent_failure_rate", 0.0);
    s.stall_attempts = doc.value("stall_attempts", s.stall_attempts);
    s.pass_probability = doc.value("pass_probability", s.pass_probability);
    s.default_pass_probability = doc.value("default_pass_probability", 1.0);
    s.label_pass_probability = doc.value("label_pass_probability", 1.0);
    s.undecided_rate = doc.value("undecided_rate", 0.0);
    s.shuffle_window = doc.value("shuffle_window", std::size_t{1});
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("mock script: ") + e.what());
  }
  s.validate();
  return s;
}

MockScript MockScript::load(const std::string& path) {
  return from_json(parse_json_file(path));
}

// ---------------------------------------------------------------------------
// Generated refs

namespace {

std::string percent_encode(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (c == '%' || c == '&' || c == '=' || c == '?' || c == ' ' || c < 0x20) {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    } else {
      out += static_cast<char>(c);
    }
  }
  return out;
}

std::optional<std::string> percent_decode(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '%') {
      out += s[i];
      continue;
    }
    if (i + 2 >= s.size()) return std::nullopt;
    try {
      out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
    } catch (const std::exception&) {
      return std::nullopt;
    }
    i += 2;
  }
  return out;
}

constexpr std::string_view kRefPrefix = "mock://gen/";

}  // namespace

std::string mock_generated_ref(const std::string& job_id, const std::vector<Substitution>& edits) {
  std::string ref = std::string(kRefPrefix) + percent_encode(job_id);
  char sep = '?';
  for (const auto& e : edits) {
    ref += sep;
    ref += percent_encode(e.attribute) + "=" + percent_encode(e.new_value);
    sep = '&';
  }
  return ref;
}

std::optional<std::vector<std::pair<std::string, std::string>>> parse_mock_ref(
    const std::string& ref) {
  if (ref.rfind(kRefPrefix, 0) != 0) return std::nullopt;
  std::vector<std::pair<std::string, std::string>> edits;
  auto q = ref.find('?');
  if (q == std::string::npos) return edits;
  std::size_t pos = q + 1;
  while (pos <= ref.size()) {
    auto amp = ref.find('&', pos);
    if (amp == std::string::npos) amp = ref.size();
    const std::string pair = ref.substr(pos, amp - pos);
    auto eq = pair.find('=');
    if (eq == std::string::npos) return std::nullopt;
    auto a = percent_decode(pair.substr(0, eq));
    auto v = percent_decode(pair.substr(eq + 1));
    if (!a || !v) return std::nullopt;
    edits.emplace_back(*a, *v);
    pos = amp + 1;
  }
  return edits;
}

bool mock_permanent_failure(const MockScript& script, const std::string& job_id) {
  if (script.permanent_failures.count(job_id)) return true;
  return script.permanent_failure_rate > 0.0 &&
         keyed_unit(script.seed, job_id, kPermanentSalt) < script.permanent_failure_rate;
}

// ---------------------------------------------------------------------------
// Backend state machine

MockBackend::MockBackend(MockScript script) : script_(std::move(script)) { script_.validate(); }

unsigned MockBackend::attempts(const std::string& type, const std::string& job_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = attempts_.find({type, job_id});
  return it == attempts_.end() ? 0 : it->second;
}

unsigned MockBackend::max_attempts() const {
  std::lock_guard<std::mutex> lock(mu_);
  unsigned m = 0;
  for (const auto& [key, n] : attempts_) m = std::max(m, n);
  return m;
}

std::uint64_t MockBackend::requests() const {
  std::lock_guard<std::mutex> lock(mu_);
  return requests_;
}

std::optional<std::string> MockBackend::handle(const std::string& payload) {
  json req;
  try {
    req = json::parse(payload);
  } catch (const json::parse_error&) {
    return serialize({{"type", "error"}, {"version", kWireVersion}, {"message", "invalid JSON"}});
  }
  const std::string type = req.is_object() ? req.value("type", "") : "";
  if (type == "hello") {
    Hello h;
    h.backend = "slicemend-mock";
    h.capabilities = {"generate", "filter"};
    h.deterministic = true;
    return serialize(to_json(h));
  }
  const std::string job_id = req.is_object() ? req.value("job_id", "") : "";
  unsigned attempt = 0;
  {
    std::lock_guard<std::mutex> lock(mu_);
    ++requests_;
    attempt = ++attempts_[{type, job_id}];
  }
  auto stall = script_.stall_attempts.find(job_id);
  if (stall != script_.stall_attempts.end() && attempt <= stall->second) return std::nullopt;
  try {
    if (type == "generate") return generate(generation_request_from_json(req), attempt);
    if (type == "filter") return filter(filter_request_from_json(req));
  } catch (const Error& e) {
    return serialize({{"type", "error"}, {"version", kWireVersion}, {"message", e.what()}});
  }
  return serialize({{"type", "error"}, {"version", kWireVersion},
                    {"message", "unknown message type \"" + type + "\""}});
}

std::string MockBackend::generate(const GenerationRequest& req, unsigned attempt) {
  GenerationResponse r;
  r.job_id = req.job_id;
  auto transient = script_.transient_failures.find(req.job_id);
  const bool failing = mock_permanent_failure(script_, req.job_id) ||
                       (transient != script_.transient_failures.end() && attempt <= transient->second);
  if (failing) {
    r.status = GenerationStatus::kFailed;
    r.backend_meta["error"] = "scripted failure";
  } else {
    r.status = GenerationStatus::kOk;
    r.generated_ref = mock_generated_ref(req.job_id, req.edits);
    r.backend_meta["seed"] = std::to_string(req.seed);
  }
  return serialize(to_json(r));
}

std::string MockBackend::filter(const FilterRequest& req) {
  if (script_.undecided_rate > 0.0 &&
      keyed_unit(script_.seed, req.job_id, kUndecidedSalt) < script_.undecided_rate) {
    return serialize(filter_response_json(req.job_id, "I cannot tell from this picture."));
  }
  const auto edits = parse_mock_ref(req.generated_ref);
  std::string answer;
  for (std::size_t i = 0; i < req.questions.size(); ++i) {
    double p = script_.default_pass_probability;
    if (i + 1 == req.questions.size()) {
      p = script_.label_pass_probability;
    } else if (edits && i < edits->size()) {
      auto it = script_.pass_probability.find((*edits)[i].first);
      if (it != script_.pass_probability.end()) p = it->second;
    }
    if (i) answer += ' ';
    answer += keyed_unit(script_.seed, req.job_id, i) < p ? '1' : '0';
  }
  return serialize(filter_response_json(req.job_id, answer));
}

// ---------------------------------------------------------------------------
// In-process transport

namespace {

class InProcessConnection final : public Connection {
 public:
  explicit InProcessConnection(std::shared_ptr<MockBackend> backend)
      : backend_(std::move(backend)) {}

  std::string exchange(const std::string& payload, std::chrono::milliseconds) override {
    auto reply = backend_->handle(payload);
    if (!reply) throw TransportError("receive timed out");
    return *reply;
  }

 private:
  std::shared_ptr<MockBackend> backend_;
};

}  // namespace

ConnectionFactory in_process_factory(std::shared_ptr<MockBackend> backend) {
  return [backend] { return std::make_unique<InProcessConnection>(backend); };
}

// ---------------------------------------------------------------------------
// Servers

struct MockServer::Impl {
  Endpoint::Kind kind = Endpoint::Kind::kTcp;
  std::thread thread;
  std::atomic<bool> stopping{false};
  int listen_fd = -1;
  int wake[2] = {-1, -1};
  std::unique_ptr<httplib::Server> http;

  ~Impl() {
    if (listen_fd >= 0) ::close(listen_fd);
    if (wake[0] >= 0) ::close(wake[0]);
    if (wake[1] >= 0) ::close(wake[1]);
  }
};

MockServer::MockServer(std::shared_ptr<MockBackend> backend, Endpoint::Kind kind, std::string host,
                       std::uint16_t port)
    : backend_(std::move(backend)), impl_(std::make_unique<Impl>()) {
  endpoint_.kind = kind;
  endpoint_.host = std::move(host);
  endpoint_.port = port;
  impl_->kind = kind;
}

MockServer::~MockServer() { stop(); }

Endpoint MockServer::endpoint() const { return endpoint_; }

namespace {

constexpr std::size_t kHttpWorkers = 96;

struct Peer {
  int fd = -1;
  std::string in;
  std::string out;
};

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

void flush_out(Peer& p) {
  while (!p.out.empty()) {
    ssize_t w = ::send(p.fd, p.out.data(), p.out.size(), MSG_NOSIGNAL);
    if (w <= 0) return;
    p.out.erase(0, static_cast<std::size_t>(w));
  }
}

// Single-threaded event loop: frames are answered in arrival order by the
// backend, but replies are held back and released in shuffled batches.
void tcp_loop(MockServer::Impl* impl, MockBackend* backend) {
  std::map<std::uint64_t, Peer> peers;
  std::uint64_t next_id = 0;
  std::vector<std::pair<std::uint64_t, std::string>> pending;
  Rng rng(backend->script().seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t window = backend->script().shuffle_window;

  while (!impl->stopping.load()) {
    std::vector<pollfd> fds;
    std::vector<std::uint64_t> ids;
    fds.push_back({impl->wake[0], POLLIN, 0});
    fds.push_back({impl->listen_fd, POLLIN, 0});
    for (auto& [id, p] : peers) {
      fds.push_back({p.fd, static_cast<short>(POLLIN | (p.out.empty() ? 0 : POLLOUT)), 0});
      ids.push_back(id);
    }
    const int n = ::poll(fds.data(), fds.size(), pending.empty() ? 100 : 2);
    if (n < 0 && errno != EINTR) break;
    if (fds[0].revents & POLLIN) break;
    if (fds[1].revents & POLLIN) {
      for (;;) {
        int fd = ::accept4(impl->listen_fd, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0) break;
        peers[next_id++].fd = fd;
      }
    }
    for (std::size_t k = 2; k < fds.size(); ++k) {
      const std::uint64_t id = ids[k - 2];
      Peer& p = peers[id];
      bool closed = (fds[k].revents & (POLLERR | POLLHUP | POLLNVAL)) != 0;
      if (fds[k].revents & POLLIN) {
        char buf[65536];
        for (;;) {
          ssize_t r = ::recv(p.fd, buf, sizeof(buf), 0);
          if (r > 0) {
            p.in.append(buf, static_cast<std::size_t>(r));
            continue;
          }
          if (r == 0) closed = true;
          break;
        }
        while (p.in.size() >= 4) {
          const auto* h = reinterpret_cast<const unsigned char*>(p.in.data());
          const std::uint32_t len = (std::uint32_t{h[0]} << 24) | (std::uint32_t{h[1]} << 16) |
                                    (std::uint32_t{h[2]} << 8) | std::uint32_t{h[3]};
          if (len > kMaxFrameBytes) {
            closed = true;
            break;
          }
          if (p.in.size() < 4 + std::size_t{len}) break;
          std::string payload = p.in.substr(4, len);
          p.in.erase(0, 4 + std::size_t{len});
          if (auto reply = backend->handle(payload)) pending.emplace_back(id, encode_frame(*reply));
        }
      }
      if (fds[k].revents & POLLOUT) flush_out(p);
      if (closed && p.in.size() < 4) {
        ::close(p.fd);
        peers.erase(id);
      }
    }
    if (!pending.empty() && (pending.size() >= window || n == 0)) {
      rng.shuffle(pending);
      for (auto& [id, frame] : pending) {
        auto it = peers.find(id);
        if (it == peers.end()) continue;
        it->second.out += frame;
        flush_out(it->second);
      }
      pending.clear();
    }
  }
  for (auto& [id, p] : peers) ::close(p.fd);
}

}  // namespace

void MockServer::start() {
  if (impl_->thread.joinable()) return;
  if (impl_->kind == Endpoint::Kind::kHttp) {
    impl_->http = std::make_unique<httplib::Server>();
    impl_->http->set_tcp_nodelay(true);
    // Each keep-alive client pins a worker thread, so size the pool for the
    // largest fan-out the tests use.
    impl_->http->new_task_queue = [] { return new httplib::ThreadPool(kHttpWorkers); };
    auto backend = backend_;
    impl_->http->Post(R"(/v1/(generate|filter|hello))",
                      [backend](const httplib::Request& req, httplib::Response& res) {
                        auto reply = backend->handle(req.body);
                        if (!reply) {
                          res.status = 504;
                          return;
                        }
                        res.set_content(*reply, "application/json");
                      });
    if (endpoint_.port == 0) {
      int port = impl_->http->bind_to_any_port(endpoint_.host);
      if (port < 0) fail(ErrorKind::kIo, "cannot bind " + endpoint_.host);
      endpoint_.port = static_cast<std::uint16_t>(port);
    } else if (!impl_->http->bind_to_port(endpoint_.host, endpoint_.port)) {
      fail(ErrorKind::kIo, "cannot bind " + endpoint_.to_string());
    }
    impl_->thread = std::thread([srv = impl_->http.get()] { srv->listen_after_bind(); });
    return;
  }

  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) fail(ErrorKind::kIo, "socket() failed");
  impl_->listen_fd = fd;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(endpoint_.port);
  if (::inet_pton(AF_INET, endpoint_.host.c_str(), &addr.sin_addr) != 1) {
    fail(ErrorKind::kConfig, "mock server host must be an IPv4 address, got " + endpoint_.host);
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 128) != 0) {
    fail(ErrorKind::kIo, "cannot listen on " + endpoint_.to_string() + ": " + std::strerror(errno));
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  endpoint_.port = ntohs(addr.sin_port);
  set_nonblocking(fd);
  if (::pipe2(impl_->wake, O_CLOEXEC | O_NONBLOCK) != 0) fail(ErrorKind::kIo, "pipe() failed");
  impl_->thread = std::thread(tcp_loop, impl_.get(), backend_.get());
}

void MockServer::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  impl_->stopping.store(true);
  if (impl_->http) {
    impl_->http->stop();
  } else {
    const char byte = 1;
    [[maybe_unused]] auto w = ::write(impl_->wake[1], &byte, 1);
  }
  impl_->thread.join();
}

}  // namespace slicemend
