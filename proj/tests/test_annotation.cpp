#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <thread>

#include "spurious/annotation.hpp"
#include "test_support.hpp"

namespace spurious::annotation {
namespace {

using spurious::testing::TempDir;

std::string fixed_clock() { return "2024-01-01T00:00:00.000Z"; }

const std::string kReason = "the heatmap highlights the branch, not the bird";

Hit discovery_hit(int cls, std::size_t feature) {
  return {"d-" + std::to_string(cls) + "-" + std::to_string(feature), Study::kDiscovery, cls, feature, {}, {}};
}

Hit validation_hit(int cls, std::size_t feature) {
  return {"v-" + std::to_string(cls) + "-" + std::to_string(feature), Study::kValidation, cls, feature, {}, {}};
}

std::vector<AnnotationRecord> records(const std::string& hit, const std::vector<std::string>& answers) {
  std::vector<AnnotationRecord> out;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    out.push_back({hit, "W" + std::to_string(i), answers[i], 4, kReason, ""});
  }
  return out;
}

TEST(Qc, StoplistAndLength) {
  AnnotationRecord r{"h", "w", "background", 3, "good", ""};
  EXPECT_FALSE(validate_response(r, Study::kDiscovery).accepted);
  r.reason = "   Looks Good   ";
  EXPECT_FALSE(validate_response(r, Study::kDiscovery).accepted);
  r.reason = "I don't know";
  EXPECT_FALSE(validate_response(r, Study::kDiscovery).accepted);
  r.reason = "  short    ";
  EXPECT_FALSE(validate_response(r, Study::kDiscovery).accepted);
  r.reason = kReason;
  EXPECT_TRUE(validate_response(r, Study::kDiscovery).accepted);
  r.reason = "exactly 10";
  EXPECT_TRUE(validate_response(r, Study::kDiscovery).accepted);
}

TEST(Qc, MalformedRecords) {
  AnnotationRecord r{"h", "w", "background", 7, kReason, ""};
  EXPECT_THROW(validate_response(r, Study::kDiscovery), MalformedRecord);
  r.confidence = 0;
  EXPECT_THROW(validate_response(r, Study::kDiscovery), MalformedRecord);
  r.confidence = 5;
  EXPECT_THROW(validate_response(r, Study::kValidation), MalformedRecord);
  r.worker_id = "";
  EXPECT_THROW(validate_response(r, Study::kDiscovery), MalformedRecord);
  EXPECT_THROW(record_from_json(nlohmann::json::array()), MalformedRecord);
  EXPECT_THROW(record_from_json({{"hit_id", "x"}}), MalformedRecord);
}

TEST(Qc, RecordJsonRoundTrip) {
  const AnnotationRecord r{"d-1", "W3", "main-object", 2, kReason, "2024-01-01T00:00:00.000Z"};
  EXPECT_EQ(record_from_json(to_json(r)), r);
}

// Every combination of five answers against a counting oracle.
TEST(Aggregation, DiscoveryExhaustive) {
  const Hit hit = discovery_hit(0, 0);
  std::size_t combos = 0;
  for (int code = 0; code < 243; ++code) {
    std::vector<std::string> answers;
    int main_object = 0;
    for (int k = 0, c = code; k < 5; ++k, c /= 3) {
      answers.push_back(kDiscoveryAnswers[c % 3]);
      main_object += c % 3 == 0;
    }
    const std::string expected = main_object >= 3 ? "causal" : "spurious";
    EXPECT_EQ(aggregate_discovery_kind(answers), expected);
    const Verdict v = aggregate_discovery(hit, records(hit.id, answers));
    EXPECT_EQ(v.kind, expected);
    EXPECT_EQ(v.votes.at("main-object"), main_object);
    ++combos;
  }
  EXPECT_EQ(combos, 243u);
}

TEST(Aggregation, ValidationExhaustive) {
  const Hit hit = validation_hit(0, 0);
  for (int code = 0; code < 1024; ++code) {
    std::vector<std::string> answers;
    int same = 0;
    for (int k = 0, c = code; k < 5; ++k, c /= 4) {
      answers.push_back(kValidationAnswers[c % 4]);
      same += c % 4 == 0;
    }
    const std::string expected = same >= 3 ? "validated" : "not-validated";
    EXPECT_EQ(aggregate_validation_kind(answers), expected);
    EXPECT_EQ(aggregate_validation(hit, records(hit.id, answers)).kind, expected);
  }
}

TEST(Aggregation, NamedExamples) {
  using V = std::vector<std::string>;
  EXPECT_EQ(aggregate_discovery_kind(V{"background", "background", "background", "main-object", "main-object"}),
            "spurious");
  EXPECT_EQ(aggregate_discovery_kind(V(5, "main-object")), "causal");
  EXPECT_EQ(aggregate_discovery_kind(V{"main-object", "main-object", "background", "background", "separate-object"}),
            "spurious");
  EXPECT_EQ(aggregate_validation_kind(V{"same", "same", "same", "different", "unclear-A"}), "validated");
  EXPECT_EQ(aggregate_validation_kind(V{"same", "same", "different", "different", "unclear-B"}), "not-validated");
}

TEST(Aggregation, Incomplete) {
  const Hit hit = discovery_hit(1, 2);
  EXPECT_THROW(aggregate_discovery(hit, records(hit.id, {"background", "background"})), IncompleteHit);
  EXPECT_THROW(aggregate(hit, records(hit.id, std::vector<std::string>(6, "background"))), InvalidInput);
  EXPECT_THROW(aggregate_validation(hit, records(hit.id, std::vector<std::string>(5, "same"))), InvalidInput);
}

TEST(Aggregation, VerdictMapUsesDiscoveryOnly) {
  const std::vector<Verdict> v{{"d-1", Study::kDiscovery, 1, 2, "spurious", {}},
                               {"d-2", Study::kDiscovery, 1, 3, "causal", {}},
                               {"v-1", Study::kValidation, 1, 2, "validated", {}}};
  const VerdictMap m = discovery_verdict_map(v);
  EXPECT_EQ(m, (VerdictMap{{{1, 2}, FeatureKind::kSpurious}, {{1, 3}, FeatureKind::kCausal}}));
  EXPECT_EQ(verdict_from_json(to_json(v[0])), v[0]);
}

TEST(Hits, DiscoveryHitPerClassFeature) {
  TempDir assets("assets");
  ClassSubset subset;
  subset.classes = {3, 8};
  std::map<int, std::vector<std::size_t>> top{{3, {0, 1, 2, 3, 4}}, {8, {9, 8, 7, 6, 5}}};
  for (const auto& [cls, features] : top) {
    for (std::size_t f : features) {
      for (const auto& a : discovery_assets(cls, f)) {
        std::filesystem::create_directories((assets.path() / a.path).parent_path());
        std::ofstream(assets.path() / a.path) << "x";
      }
    }
  }
  const auto hits = build_discovery_hits(subset, top, assets.path(), {{3, {"cat", "a small feline", {}}}});
  ASSERT_EQ(hits.size(), 10u);
  EXPECT_EQ(hits[0].id, "d-0003-0000");
  EXPECT_EQ(hits[0].assets.size(), 15u);
  EXPECT_EQ(hits[0].class_info.at("name"), "cat");
  EXPECT_EQ(hit_from_json(to_json(hits[5])), hits[5]);

  std::filesystem::remove(assets.path() / "discovery/8/7/2_heatmap.png");
  try {
    build_discovery_hits(subset, top, assets.path());
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("class 8, feature 7"), std::string::npos) << e.what();
  }
}

FeatureImageSet set_with(int cls, std::size_t feature, std::size_t members) {
  FeatureImageSet s;
  s.class_id = cls;
  s.feature_id = feature;
  s.members.resize(members);
  return s;
}

TEST(Hits, ValidationHitPerSpuriousSet) {
  EXPECT_TRUE(build_validation_hits({}).empty());
  std::vector<FeatureImageSet> sets;
  for (int i = 0; i < 160; ++i) sets.push_back(set_with(i, 3, 10));
  const auto hits = build_validation_hits(sets);
  EXPECT_EQ(hits.size(), 160u);
  EXPECT_EQ(hits[0].study, Study::kValidation);
  EXPECT_EQ(hits[0].assets.size(), 20u);
  sets.push_back(set_with(200, 1, 9));
  EXPECT_THROW(build_validation_hits(sets), FeatureSetTooSmall);
}

TEST(Workers, QualificationGate) {
  EXPECT_TRUE(qualified({"a", 0.95, 1000}));
  EXPECT_FALSE(qualified({"b", 0.949, 5000}));
  EXPECT_FALSE(qualified({"c", 0.99, 999}));
  const auto w = synthetic_workers(4, 3, 1);
  ASSERT_EQ(w.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(qualified(w[i]), i < 4);
  EXPECT_EQ(w[0].worker_id, "W0000");
}

class StoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    hits_ = {discovery_hit(0, 1), discovery_hit(0, 2), validation_hit(0, 1)};
    workers_ = synthetic_workers(8, 2, 3);
    AnnotationStore::initialize(dir_.path(), hits_, workers_);
  }
  AnnotationRecord rec(const std::string& hit, std::size_t worker, const std::string& answer) {
    return {hit, workers_[worker].worker_id, answer, 4, kReason, ""};
  }
  TempDir dir_{"store"};
  std::vector<Hit> hits_;
  std::vector<WorkerProfile> workers_;
};

TEST_F(StoreTest, FifthResponseCompletesAndSixthIsRejected) {
  AnnotationStore store(dir_.path(), 100, fixed_clock);
  for (std::size_t w = 0; w < 4; ++w) {
    const auto r = store.submit(rec("d-0-1", w, "background"));
    EXPECT_EQ(r.status, SubmitStatus::kAccepted);
    EXPECT_EQ(r.hit_status, HitStatus::kOpen);
    EXPECT_EQ(r.accepted_count, w + 1);
  }
  const auto fifth = store.submit(rec("d-0-1", 4, "main-object"));
  EXPECT_EQ(fifth.hit_status, HitStatus::kComplete);
  EXPECT_EQ(store.hit_status("d-0-1"), HitStatus::kComplete);
  const auto sixth = store.submit(rec("d-0-1", 5, "main-object"));
  EXPECT_EQ(sixth.status, SubmitStatus::kHitComplete);
  EXPECT_EQ(sixth.accepted_count, 5u);
  const auto v = store.verdicts();
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, "spurious");
  EXPECT_EQ(v[0].votes.at("background"), 4);
}

TEST_F(StoreTest, ResubmissionReplaces) {
  AnnotationStore store(dir_.path(), 100, fixed_clock);
  store.submit(rec("d-0-2", 0, "background"));
  const auto again = store.submit(rec("d-0-2", 0, "main-object"));
  EXPECT_EQ(again.status, SubmitStatus::kAccepted);
  EXPECT_TRUE(again.replaced);
  EXPECT_EQ(again.accepted_count, 1u);
  EXPECT_EQ(store.state().responses("d-0-2")[0].answer, "main-object");
}

TEST_F(StoreTest, RejectionsAndGates) {
  AnnotationStore store(dir_.path(), 100, fixed_clock);
  auto nice = rec("d-0-1", 0, "background");
  nice.reason = "nice";
  EXPECT_EQ(store.submit(nice).status, SubmitStatus::kRejected);
  EXPECT_EQ(store.submit(rec("d-0-1", 9, "background")).status, SubmitStatus::kUnqualified);
  auto stranger = rec("d-0-1", 0, "background");
  stranger.worker_id = "nobody";
  EXPECT_EQ(store.submit(stranger).status, SubmitStatus::kUnqualified);
  EXPECT_EQ(store.submit(rec("d-9-9", 0, "background")).status, SubmitStatus::kUnknownHit);
  EXPECT_THROW(store.submit(rec("v-0-1", 0, "background")), MalformedRecord);
  const auto stats = store.stats();
  EXPECT_EQ(stats.rejected_responses, 1u);
  EXPECT_EQ(stats.accepted_responses, 0u);
  EXPECT_EQ(stats.open_hits.at("discovery"), 2u);
  EXPECT_EQ(stats.open_hits.at("validation"), 1u);
}

TEST_F(StoreTest, NextHitSkipsAnsweredAndComplete) {
  AnnotationStore store(dir_.path(), 100, fixed_clock);
  EXPECT_EQ(store.next_hit(Study::kDiscovery, "W0000")->id, "d-0-1");
  store.submit(rec("d-0-1", 0, "background"));
  EXPECT_EQ(store.next_hit(Study::kDiscovery, "W0000")->id, "d-0-2");
  store.submit(rec("d-0-2", 0, "background"));
  EXPECT_FALSE(store.next_hit(Study::kDiscovery, "W0000").has_value());
  EXPECT_EQ(store.next_hit(Study::kValidation, "W0000")->id, "v-0-1");
}

TEST_F(StoreTest, StatePersistsAcrossRestarts) {
  StudyState live;
  {
    AnnotationStore store(dir_.path(), 2, fixed_clock);
    for (std::size_t w = 0; w < 5; ++w) store.submit(rec("v-0-1", w, w < 3 ? "same" : "different"));
    store.submit(rec("d-0-2", 1, "background"));
    store.flush();
    live = store.state();
    EXPECT_TRUE(std::filesystem::exists(dir_ / "snapshot.json"));
  }
  EXPECT_EQ(AnnotationStore::replay(dir_.path()), live);
  AnnotationStore reopened(dir_.path(), 100, fixed_clock);
  EXPECT_EQ(reopened.state(), live);
  EXPECT_EQ(reopened.verdicts()[0].kind, "validated");
  EXPECT_EQ(reopened.submit(rec("d-0-2", 2, "background")).sequence, 7u);
}

TEST_F(StoreTest, ReplayIgnoresTornFinalLine) {
  {
    AnnotationStore store(dir_.path(), 100, fixed_clock);
    store.submit(rec("d-0-2", 1, "background"));
    store.flush();
  }
  std::ofstream(dir_ / "responses.ndjson", std::ios::app) << "{\"type\":\"resp";
  EXPECT_EQ(AnnotationStore::replay(dir_.path()).responses("d-0-2").size(), 1u);
}

TEST_F(StoreTest, InitializeKeepsExistingHits) {
  AnnotationStore::initialize(dir_.path(), std::vector<Hit>{discovery_hit(5, 5), discovery_hit(0, 1)}, workers_);
  EXPECT_EQ(AnnotationStore::replay(dir_.path()).hits().size(), 4u);
}

TEST(Replay, ConcurrentSubmissionsReplayExactly) {
  TempDir dir("replay");
  std::vector<Hit> hits;
  for (int c = 0; c < 30; ++c) {
    for (std::size_t f = 0; f < 5; ++f) hits.push_back(discovery_hit(c, f));
  }
  for (int c = 0; c < 20; ++c) hits.push_back(validation_hit(c, 0));
  const auto workers = synthetic_workers(12, 2, 9);
  AnnotationStore::initialize(dir.path(), hits, workers);

  StudyState live;
  std::vector<Verdict> live_verdicts;
  std::atomic<std::size_t> accepted{0};
  {
    AnnotationStore store(dir.path(), 37);
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&, t] {
        std::mt19937_64 rng(100 + t);
        std::uniform_int_distribution<std::size_t> hit(0, hits.size() - 1), worker(0, workers.size() - 1);
        std::uniform_int_distribution<int> answer(0, 3);
        for (int n = 0; n < 125; ++n) {
          const Hit& h = hits[hit(rng)];
          const auto& legal = legal_answers(h.study);
          AnnotationRecord r{h.id, workers[worker(rng)].worker_id, legal[answer(rng) % legal.size()], 3, kReason, ""};
          if (store.submit(r).status == SubmitStatus::kAccepted) ++accepted;
        }
      });
    }
    for (auto& th : threads) th.join();
    store.flush();
    live = store.state();
    live_verdicts = store.verdicts();
  }
  EXPECT_GT(accepted.load(), 500u);
  EXPECT_FALSE(live_verdicts.empty());
  const StudyState replayed = AnnotationStore::replay(dir.path());
  EXPECT_EQ(replayed, live);
  EXPECT_EQ(replayed.verdicts(), live_verdicts);
}

TEST(Simulation, CompletesEveryHit) {
  TempDir dir("sim");
  const std::vector<Hit> hits{discovery_hit(0, 0), discovery_hit(0, 1), discovery_hit(1, 4)};
  const auto workers = synthetic_workers(6, 3, 2);
  AnnotationStore::initialize(dir.path(), hits, workers);
  AnnotationStore store(dir.path());
  const auto n = simulate_study(store, workers, Study::kDiscovery, [](const Hit& h, const WorkerProfile&) {
    return SimulatedResponse{h.feature_id == 1 ? "background" : "main-object", 5};
  });
  EXPECT_EQ(n, 15u);
  const auto v = store.verdicts();
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].kind, "causal");
  EXPECT_EQ(v[1].kind, "spurious");
}

TEST(Text, StudyAndStatusNames) {
  EXPECT_EQ(parse_study("validation"), Study::kValidation);
  EXPECT_THROW(parse_study("other"), InvalidInput);
  EXPECT_EQ(to_string(HitStatus::kComplete), "complete");
  EXPECT_EQ(to_string(SubmitStatus::kHitComplete), "hit-complete");
}

}  // namespace
}  // namespace spurious::annotation
