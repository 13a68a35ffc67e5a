#include <gtest/gtest.h>

#include "filter.hpp"
#include "fixtures.hpp"
#include "mock_backend.hpp"

using namespace slicemend;
using namespace slicemend::testing;

namespace {

EditSpec face_spec() {
  EditSpec s;
  s.source_image_id = "train-000001";
  s.preserved_label = "female";
  s.target_slice = Slice::parse("hair=red,emotion=sad");
  s.substitutions = {{"emotion", "happy", "sad"}, {"hair", "black", "red"}};
  return s;
}

FilterJob job(const std::string& id, bool generation_ok = true) {
  FilterJob j;
  j.job_id = id;
  j.spec = face_spec();
  j.generation_ok = generation_ok;
  j.generated_ref = generation_ok ? "gen/" + id + ".png" : "";
  return j;
}

FilterResponse answer(const std::string& id, const std::string& raw, std::size_t questions = 3) {
  FilterResponse r;
  r.job_id = id;
  r.raw_answer = raw;
  r.parsed = parse_answer(raw, questions);
  return r;
}

}  // namespace

TEST(Filter, FaceQuestionsFollowSubstitutionOrder) {
  QuestionSet qs = build_questions(face_spec(), face_schema(), Task::kFace);
  EXPECT_EQ(qs.all(), (std::vector<std::string>{
                          "Does the person in this picture have sad emotion?",
                          "Does the person in this picture have red hair?",
                          "Is the person in this picture female?"}));
  EXPECT_EQ(qs.instruction,
            "For each question, only answer with 1 (yes) or 0 (no). Provide answers separated "
            "by spaces.");
}

TEST(Filter, ObjectQuestionsAndSchemaOverride) {
  AttributeSchema schema({{"color", {"green", "pink"}, "", ""},
                          {"texture", {"smooth", "furry"}, "", "Is the {label} {value}?"}});
  EditSpec s;
  s.preserved_label = "goldfish";
  s.target_slice = Slice::parse("color=pink,texture=furry");
  s.substitutions = {{"color", "green", "pink"}, {"texture", "smooth", "furry"}};
  QuestionSet qs = build_questions(s, schema, Task::kObject);
  EXPECT_EQ(qs.all(), (std::vector<std::string>{"Does the goldfish have pink color?",
                                                "Is the goldfish furry?",
                                                "Is there a goldfish in the picture?"}));
  EXPECT_EQ(parse_task("face"), Task::kFace);
  EXPECT_THROW(parse_task("scene"), Error);
}

TEST(Filter, KeepRequiresEveryAnswerYes) {
  std::vector<FilterJob> jobs = {job("a"), job("b"), job("c"), job("d")};
  FilterOutcome out = decide({answer("d", "1 1 1"), answer("a", "1 1 1"), answer("b", "1 0 1"),
                              answer("c", "0 1 0")},
                             jobs);
  ASSERT_EQ(out.verdicts.size(), 4u);
  EXPECT_EQ(out.verdicts[0].decision, Decision::kKeep);
  EXPECT_EQ(out.verdicts[1].decision, Decision::kReject);
  EXPECT_EQ(out.verdicts[1].reasons, std::vector<std::string>{"failed hair=red"});
  EXPECT_EQ(out.verdicts[2].reasons,
            (std::vector<std::string>{"failed emotion=sad", "failed label"}));
  EXPECT_EQ(out.verdicts[3].decision, Decision::kKeep);
  const auto& l = out.ledger;
  EXPECT_EQ(l.kept, 2u);
  EXPECT_EQ(l.rejected, 2u);
  EXPECT_EQ(l.attributes.at({"emotion", "sad"}).passes, 3u);
  EXPECT_EQ(l.attributes.at({"hair", "red"}).passes, 3u);
  EXPECT_EQ(l.label.attempts, 4u);
  EXPECT_EQ(l.label.passes, 3u);
  EXPECT_DOUBLE_EQ(l.keep_fraction(), 0.5);
}

TEST(Filter, UndecidedAndTransportFailuresNeedReview) {
  std::vector<FilterJob> jobs = {job("a"), job("b"), job("c")};
  FilterResponse lost;
  lost.job_id = "c";
  lost.transport_ok = false;
  lost.error = "receive timed out";
  FilterOutcome out = decide({answer("a", "yes yes yes"), answer("b", "1 1 1"), lost}, jobs);
  EXPECT_EQ(out.verdicts[0].decision, Decision::kNeedsReview);
  EXPECT_TRUE(out.verdicts[0].per_question.empty());
  EXPECT_EQ(out.verdicts[2].decision, Decision::kNeedsReview);
  EXPECT_EQ(out.ledger.needs_review, 2u);
  EXPECT_EQ(out.ledger.kept, 1u);
  EXPECT_EQ(out.ledger.label.attempts, 1u);  // review cases never count as attempts
  EXPECT_DOUBLE_EQ(out.ledger.keep_fraction(), 1.0);
}

TEST(Filter, GenerationFailuresAreRejectedAndCountedApart) {
  std::vector<FilterJob> jobs = {job("a"), job("b", false)};
  FilterOutcome out = decide({answer("a", "1 1 1")}, jobs);
  EXPECT_EQ(out.verdicts[1].decision, Decision::kReject);
  EXPECT_EQ(out.verdicts[1].reasons, std::vector<std::string>{"generation failed"});
  EXPECT_EQ(out.ledger.generation_failed, 1u);
  EXPECT_EQ(out.ledger.rejected, 0u);
  EXPECT_DOUBLE_EQ(out.ledger.keep_fraction(), 1.0);
}

TEST(Filter, AccountingErrors) {
  std::vector<FilterJob> jobs = {job("a"), job("b")};
  try {
    decide({answer("a", "1 1 1")}, jobs);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kAccounting);
    EXPECT_NE(std::string(e.what()).find("\"b\""), std::string::npos);
  }
  EXPECT_THROW(decide({answer("a", "1 1 1"), answer("a", "1 1 1"), answer("b", "1 1 1")}, jobs),
               Error);
  EXPECT_THROW(decide({answer("a", "1 1", 2), answer("b", "1 1 1")}, jobs), Error);
  GenerationJob g;
  g.job_id = "z";
  EXPECT_THROW(filter_jobs({g}, {}), Error);
}

TEST(Filter, LedgerMatchesScriptedRates) {
  const FilterOutcome out = run_filter_scenario(4'000, 17);
  const auto& l = out.ledger;
  EXPECT_EQ(l.kept + l.rejected, 4'000u);
  EXPECT_NEAR(l.attributes.at({"emotion", "sad"}).rate(), 0.80, 0.02);
  EXPECT_NEAR(l.attributes.at({"hair", "red"}).rate(), 0.95, 0.02);
  EXPECT_NEAR(l.label.rate(), 0.95, 0.02);
  EXPECT_NEAR(l.keep_fraction(), 0.80 * 0.95 * 0.95, 0.02);
}

TEST(Filter, RunFilterThroughMockUsesEditsFromRef) {
  MockScript script;
  script.pass_probability["hair"] = 0.0;
  auto backend = std::make_shared<MockBackend>(script);
  BackendClient client(in_process_factory(backend), ClientLimits{});
  std::vector<FilterJob> jobs = {job("a"), job("b", false)};
  jobs[0].generated_ref = mock_generated_ref("a", jobs[0].spec.substitutions);
  FilterOutcome out = run_filter(jobs, face_schema(), Task::kFace, client);
  EXPECT_EQ(out.verdicts[0].per_question, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(backend->requests(), 1u);  // failed generation never reaches the backend
}

TEST(Filter, UndecidedMockRepliesBecomeReviewItems) {
  MockScript script;
  script.undecided_rate = 0.3;
  auto backend = std::make_shared<MockBackend>(script);
  BackendClient client(in_process_factory(backend), ClientLimits{});
  std::vector<FilterJob> jobs;
  for (int i = 0; i < 500; ++i) jobs.push_back(job(make_id("job", i)));
  FilterOutcome out = run_filter(jobs, face_schema(), Task::kFace, client);
  EXPECT_NEAR(double(out.ledger.needs_review) / 500.0, 0.3, 0.06);
  EXPECT_EQ(out.ledger.needs_review + out.ledger.kept + out.ledger.rejected, 500u);
}

TEST(Filter, VerdictsAndLedgerRoundTrip) {
  FilterOutcome out = decide({answer("a", "1 0 1")}, {job("a"), job("b", false)});
  const std::string path = ::testing::TempDir() + "/verdicts.jsonl";
  write_verdicts(path, out.verdicts);
  const auto back = read_verdicts(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(verdict_to_json(back[0]), verdict_to_json(out.verdicts[0]));
  EXPECT_EQ(verdict_to_json(back[1]), verdict_to_json(out.verdicts[1]));
  EXPECT_EQ(PassRateLedger::from_json(out.ledger.to_json()).to_json(), out.ledger.to_json());
}
