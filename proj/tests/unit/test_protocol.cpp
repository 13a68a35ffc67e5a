#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "mock_backend.hpp"
#include "protocol.hpp"
#include "fixtures.hpp"

using namespace slicemend;
using namespace slicemend::testing;

namespace {

std::string golden(const std::string& name) {
  const std::string bytes = read_golden(name);
  EXPECT_FALSE(bytes.empty()) << name;
  return bytes;
}

GenerationRequest sample_request() { return sample_generation_request(); }

std::vector<GenerationRequest> numbered_requests(std::size_t n) {
  std::vector<GenerationRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    GenerationRequest r = sample_request();
    r.job_id = "job-" + std::to_string(i + 1);
    r.seed = i;
    out.push_back(r);
  }
  return out;
}

class FixedReply : public Connection {
 public:
  explicit FixedReply(std::string reply) : reply_(std::move(reply)) {}
  std::string exchange(const std::string&, std::chrono::milliseconds) override { return reply_; }

 private:
  std::string reply_;
};

}  // namespace

TEST(Wire, MessagesMatchGoldenBytes) {
  EXPECT_EQ(serialize(to_json(sample_request())), golden("generate_request.json"));
  for (const auto& [name, frame] : golden_frames()) EXPECT_EQ(frame, golden(name + ".bin")) << name;
}

TEST(Wire, GoldenMessagesParseBack) {
  const GenerationRequest r =
      generation_request_from_json(json::parse(golden("generate_request.json")));
  EXPECT_EQ(serialize(to_json(r)), golden("generate_request.json"));
  const auto resp = generation_response_from_json(json::parse(golden("generate_result_ok.json")),
                                                  "job-000001");
  EXPECT_EQ(resp.status, GenerationStatus::kOk);
  EXPECT_EQ(resp.generated_ref, "gen/job-000001.png");
  const auto fres =
      filter_response_from_json(json::parse(golden("filter_result.json")), "job-000001", 2);
  ASSERT_TRUE(fres.parsed.has_value());
  EXPECT_EQ(*fres.parsed, (std::vector<std::uint8_t>{1, 0}));
  const FilterRequest fr = filter_request_from_json(json::parse(golden("filter_request.json")));
  EXPECT_EQ(fr.questions.size(), 2u);
  EXPECT_EQ(hello_from_json(json::parse(golden("hello_result.json"))).backend, "café-mock");
}

TEST(Wire, MalformedMessagesNameTheJob) {
  json j = json::parse(golden("generate_result_ok.json"));
  j.erase("status");
  try {
    generation_response_from_json(j, "job-000001");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProtocol);
    EXPECT_NE(std::string(e.what()).find("job-000001"), std::string::npos);
  }
  json wrong_version = json::parse(golden("filter_result.json"));
  wrong_version["version"] = "2";
  EXPECT_THROW(filter_response_from_json(wrong_version, "job-000001", 2), Error);
  json other_job = json::parse(golden("filter_result.json"));
  EXPECT_THROW(filter_response_from_json(other_job, "job-000009", 2), Error);
}

TEST(Wire, ParseAnswer) {
  using V = std::vector<std::uint8_t>;
  EXPECT_EQ(parse_answer("1 1", 2), V({1, 1}));
  EXPECT_EQ(parse_answer("1 0", 2), V({1, 0}));
  EXPECT_EQ(parse_answer("  0\t1\n", 2), V({0, 1}));
  EXPECT_FALSE(parse_answer("1", 2));
  EXPECT_FALSE(parse_answer("1 1 1", 2));
  EXPECT_FALSE(parse_answer("yes 1", 2));
  EXPECT_FALSE(parse_answer("1, 1", 2));
  EXPECT_FALSE(parse_answer("2 1", 2));
  EXPECT_FALSE(parse_answer("01 1", 2));
  EXPECT_FALSE(parse_answer("", 0));
  EXPECT_FALSE(parse_answer("", 1));
}

TEST(Wire, EndpointParsing) {
  Endpoint e = Endpoint::parse("tcp://127.0.0.1:9000");
  EXPECT_EQ(e.kind, Endpoint::Kind::kTcp);
  EXPECT_EQ(e.port, 9000);
  EXPECT_EQ(Endpoint::parse("http://localhost:80").to_string(), "http://localhost:80");
  EXPECT_THROW(Endpoint::parse("udp://x:1"), Error);
  EXPECT_THROW(Endpoint::parse("tcp://x"), Error);
  EXPECT_THROW(Endpoint::parse("tcp://x:99999"), Error);
}

TEST(Client, TransientFailureSucceedsWithinRetries) {
  MockScript script;
  script.transient_failures["job-7"] = 2;
  auto backend = std::make_shared<MockBackend>(script);
  ClientLimits limits;
  limits.retries = 2;
  BackendClient client(in_process_factory(backend), limits);
  const auto out = client.generate_batch(numbered_requests(10));
  ASSERT_EQ(out.size(), 10u);
  EXPECT_EQ(out[6].status, GenerationStatus::kOk);
  EXPECT_EQ(backend->attempts("generate", "job-7"), 3u);
  EXPECT_EQ(backend->attempts("generate", "job-6"), 1u);

  auto backend2 = std::make_shared<MockBackend>(script);
  limits.retries = 1;
  BackendClient strict(in_process_factory(backend2), limits);
  const auto out2 = strict.generate_batch(numbered_requests(10));
  EXPECT_EQ(out2[6].status, GenerationStatus::kFailed);
  EXPECT_EQ(out2[6].backend_meta.at("attempts"), "2");
  EXPECT_EQ(backend2->attempts("generate", "job-7"), 2u);
}

TEST(Client, PermanentFailuresAreReportedNeverDropped) {
  MockScript script;
  script.seed = 21;
  script.permanent_failure_rate = 0.10;
  auto backend = std::make_shared<MockBackend>(script);
  ClientLimits limits;
  limits.retries = 2;
  limits.max_in_flight = 8;
  BackendClient client(in_process_factory(backend), limits);
  const auto reqs = numbered_requests(1000);
  const auto out = client.generate_batch(reqs);
  ASSERT_EQ(out.size(), reqs.size());
  std::size_t failed = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].job_id, reqs[i].job_id);
    const bool expect_fail = mock_permanent_failure(script, reqs[i].job_id);
    EXPECT_EQ(out[i].status == GenerationStatus::kFailed, expect_fail) << reqs[i].job_id;
    failed += expect_fail;
  }
  EXPECT_GT(failed, 70u);
  EXPECT_LT(failed, 130u);
  EXPECT_LE(backend->max_attempts(), limits.retries + 1);
}

TEST(Client, StalledAttemptIsRetriedAfterTimeout) {
  MockScript script;
  script.stall_attempts["job-2"] = 1;
  auto backend = std::make_shared<MockBackend>(script);
  MockServer server(backend, Endpoint::Kind::kTcp);
  server.start();
  ClientLimits limits;
  limits.timeout = std::chrono::milliseconds(200);
  limits.retries = 1;
  const auto out = BackendClient(connection_factory(server.endpoint()), limits)
                       .generate_batch(numbered_requests(3));
  EXPECT_EQ(out[1].status, GenerationStatus::kOk);
  EXPECT_EQ(backend->attempts("generate", "job-2"), 2u);
}

TEST(Client, UnreachableBackendExhaustsRetries) {
  MockServer server(std::make_shared<MockBackend>(MockScript{}), Endpoint::Kind::kTcp);
  server.start();
  const Endpoint dead = server.endpoint();
  server.stop();
  ClientLimits limits;
  limits.timeout = std::chrono::milliseconds(200);
  limits.retries = 1;
  const auto out = BackendClient(connection_factory(dead), limits).generate_batch(numbered_requests(2));
  for (const auto& r : out) {
    EXPECT_EQ(r.status, GenerationStatus::kFailed);
    EXPECT_EQ(r.backend_meta.at("attempts"), "2");
  }
}

TEST(Client, ProtocolViolationAbortsBatch) {
  ConnectionFactory garbage = [] { return std::make_unique<FixedReply>("{\"type\":\"nonsense\"}"); };
  BackendClient client(garbage, ClientLimits{});
  try {
    client.generate_batch(numbered_requests(4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProtocol);
    EXPECT_NE(std::string(e.what()).find("job-"), std::string::npos);
  }
  ConnectionFactory not_json = [] { return std::make_unique<FixedReply>("<html>"); };
  EXPECT_THROW(BackendClient(not_json, ClientLimits{}).generate_batch(numbered_requests(1)), Error);
}

TEST(Client, LimitsValidation) {
  ClientLimits limits;
  limits.max_in_flight = 0;
  EXPECT_THROW(limits.validate(), Error);
}

class Ordering : public ::testing::TestWithParam<std::tuple<Endpoint::Kind, unsigned>> {};

TEST_P(Ordering, ResponsesFollowRequestOrder) {
  const auto [kind, in_flight] = GetParam();
  EXPECT_EQ(ordering_mismatch(kind, in_flight, 300), "");
}

INSTANTIATE_TEST_SUITE_P(
    Transports, Ordering,
    ::testing::Combine(::testing::Values(Endpoint::Kind::kTcp, Endpoint::Kind::kHttp),
                       ::testing::Values(1u, 4u, 64u)),
    [](const auto& info) {
      return std::string(std::get<0>(info.param) == Endpoint::Kind::kTcp ? "tcp" : "http") +
             "_" + std::to_string(std::get<1>(info.param));
    });
