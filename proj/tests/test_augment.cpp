#include "mmdistill/augment.hpp"
#include "mmdistill/synthetic.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace mmdistill;
using mmdistill::testing::FnBackend;
using mmdistill::testing::last_user;
using mmdistill::testing::make_record;
using mmdistill::testing::make_records;

namespace {

std::vector<InstructionRecord> distinct_questions(std::size_t n, const std::string& prefix) {
  static const std::vector<std::string> words = {"zebra", "violin", "harbor", "lantern", "meadow", "quartz",
                                                 "saddle", "tunnel", "walrus", "yacht",  "orchid", "pylon"};
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(make_record(prefix + std::to_string(100 + i), "img://" + prefix + std::to_string(i),
                              "Where is the " + words[i % words.size()] + " " + std::to_string(i) + "?"));
  }
  return out;
}

// Generates a question with no token overlap with its source.
FnBackend novel_augmentor() {
  return FnBackend([](const ChatRequest& r) {
    const auto fields = extract_augment_prompt(last_user(r));
    return "Novel " + std::to_string(std::hash<std::string>{}(fields->question) % 100000) + " inquiry draw" +
           std::to_string(r.sample_index);
  });
}

}  // namespace

TEST(SampleEasy, Counts) {
  const auto easy = make_records(100, "e");
  EXPECT_EQ(sample_easy(easy, 40, 1).size(), 40u);
  EXPECT_EQ(sample_easy(make_records(10, "e"), 40, 1).size(), 10u);
  EXPECT_TRUE(sample_easy(easy, 0, 1).empty());
}

TEST(SampleEasy, DeterministicSortedSubset) {
  const auto easy = make_records(50, "e");
  const auto a = sample_easy(easy, 20, 77);
  EXPECT_EQ(a, sample_easy(easy, 20, 77));
  EXPECT_NE(a, sample_easy(easy, 20, 78));
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ids.insert(a[i].id);
    if (i > 0) EXPECT_LT(a[i - 1].id, a[i].id);
  }
  EXPECT_EQ(ids.size(), 20u);
  auto shuffled = easy;
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_EQ(sample_easy(shuffled, 20, 77), a);
}

TEST(SampleEasy, RoughlyUniform) {
  const auto easy = make_records(10, "e");
  std::map<std::string, int> hits;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    for (const auto& r : sample_easy(easy, 3, seed)) ++hits[r.id];
  }
  for (const auto& [id, n] : hits) {
    EXPECT_GT(n, 480) << id;
    EXPECT_LT(n, 720) << id;
  }
}

TEST(AugmentPrompt, CarriesTaskTypeAndQuestion) {
  auto rec = make_record("a", "u", "Why is the man holding an umbrella?", TaskType::complex_reasoning);
  const auto msgs = build_augment_prompt(rec, DifficultyClass::difficult);
  const auto& user = msgs.back().text;
  EXPECT_NE(user.find("Why is the man holding an umbrella?"), std::string::npos);
  EXPECT_NE(user.find("complex reasoning"), std::string::npos);
  const auto fields = extract_augment_prompt(user);
  ASSERT_TRUE(fields);
  EXPECT_EQ(fields->question, rec.question);
  EXPECT_EQ(fields->task_type, TaskType::complex_reasoning);
  EXPECT_EQ(fields->cls, DifficultyClass::difficult);
}

TEST(AugmentPrompt, EasyChangesOnlyTheDifficultyWording) {
  const auto rec = make_record("a", "u", "What is on the table?");
  const auto hard = build_augment_prompt(rec, DifficultyClass::difficult);
  const auto easy = build_augment_prompt(rec, DifficultyClass::easy);
  EXPECT_EQ(hard.front().text, easy.front().text);
  EXPECT_NE(hard.back().text, easy.back().text);
  EXPECT_EQ(extract_augment_prompt(easy.back().text)->cls, DifficultyClass::easy);
}

TEST(AugmentPrompt, UnknownTaskTypeFallsBack) {
  auto rec = make_record("a", "u", "What is on the table?", TaskType::unknown);
  EXPECT_NE(build_augment_prompt(rec, DifficultyClass::easy).back().text.find("same kind of question"),
            std::string::npos);
}

TEST(NoveltyGate, Decisions) {
  const std::vector<InstructionRecord> peers = {make_record("p", "u", "what color is the small cat")};
  const auto same = novelty_gate("what color is the small cat", peers, 0.7);
  EXPECT_FALSE(same.accepted);
  EXPECT_EQ(same.reason, RejectReason::duplicate);
  const auto worked = novelty_gate("what color is the large dog", peers, 0.7);
  EXPECT_TRUE(worked.accepted);
  EXPECT_NEAR(worked.max_rouge, 2.0 / 3.0, 1e-12);
  EXPECT_TRUE(novelty_gate("zebras graze quietly", peers, 0.7).accepted);
  EXPECT_EQ(novelty_gate(" ?! ", peers, 0.7).reason, RejectReason::empty);
  EXPECT_TRUE(novelty_gate("anything", std::vector<InstructionRecord>{}, 0.7).accepted);
  EXPECT_THROW(novelty_gate("x", peers, 0.0), ValidationError);
}

TEST(AugmentIteration, EqualSampling) {
  const auto difficult = distinct_questions(6, "d");
  const auto easy = distinct_questions(9, "e");
  auto all = difficult;
  all.insert(all.end(), easy.begin(), easy.end());
  const auto pools = init_pools(all);
  auto aug = novel_augmentor();
  const auto batch = augment_iteration(difficult, easy, aug, pools, {});
  EXPECT_EQ(batch.difficult.size(), 6u);
  EXPECT_EQ(batch.easy_sampled.size(), 6u);
  EXPECT_EQ(batch.accepted.size(), 12u);
  EXPECT_EQ(batch.generated, 12u);
  EXPECT_EQ(refresh(pools, batch.accepted).tuning.size(), 12u);
  for (const auto& r : batch.accepted) {
    EXPECT_EQ(r.origin, Origin::augmented);
    EXPECT_EQ(r.iteration, 1u);
    ASSERT_TRUE(r.parent_id);
    EXPECT_EQ(pools.cache.at(*r.parent_id).image, r.image);
  }
}

TEST(AugmentIteration, EchoIsAlwaysRejected) {
  const auto difficult = distinct_questions(40, "d");
  const auto easy = distinct_questions(60, "e");
  auto all = difficult;
  all.insert(all.end(), easy.begin(), easy.end());
  const auto pools = init_pools(all);
  FnBackend echo([](const ChatRequest& r) { return extract_augment_prompt(last_user(r))->question; });
  const auto batch = augment_iteration(difficult, easy, echo, pools, {});
  EXPECT_TRUE(batch.accepted.empty());
  EXPECT_EQ(batch.rejected_count_by_reason.at(RejectReason::duplicate), 80u);
}

TEST(AugmentIteration, NearDuplicatesMatchGateOracle) {
  // Every third source gets a near-copy; the rest get novel text.
  const auto difficult = distinct_questions(12, "d");
  const auto easy = distinct_questions(12, "e");
  auto all = difficult;
  all.insert(all.end(), easy.begin(), easy.end());
  const auto pools = init_pools(all);
  FnBackend aug([](const ChatRequest& r) {
    const auto q = extract_augment_prompt(last_user(r))->question;
    if (std::hash<std::string>{}(q) % 3 == 0) return q + " Answer briefly.";
    return "Completely different inquiry " + std::to_string(std::hash<std::string>{}(q) % 1000);
  });
  const auto batch = augment_iteration(difficult, easy, aug, pools, {});
  std::size_t expected = 0;
  for (const auto& src : batch.difficult) {
    const auto q = src.question;
    const auto cand = std::hash<std::string>{}(q) % 3 == 0 ? q + " Answer briefly."
                                                           : "Completely different inquiry " +
                                                                 std::to_string(std::hash<std::string>{}(q) % 1000);
    expected += rouge_l(cand, q) < 0.7 ? 1 : 0;
  }
  for (const auto& src : batch.easy_sampled) {
    const auto q = src.question;
    const auto cand = std::hash<std::string>{}(q) % 3 == 0 ? q + " Answer briefly."
                                                           : "Completely different inquiry " +
                                                                 std::to_string(std::hash<std::string>{}(q) % 1000);
    expected += rouge_l(cand, q) < 0.7 ? 1 : 0;
  }
  EXPECT_EQ(batch.accepted.size(), expected);
  EXPECT_EQ(batch.accepted.size() + batch.rejected_total(), 24u);
}

TEST(AugmentIteration, SiblingsGateEachOther) {
  // Two sources on one image receive the same candidate: the second is a duplicate.
  std::vector<InstructionRecord> difficult = {make_record("a1", "img://same", "What is the dog eating?"),
                                              make_record("a2", "img://same", "Where is the cat sleeping?")};
  const auto pools = init_pools(difficult);
  FnBackend aug([](const ChatRequest&) { return std::string("How many windows does the house have?"); });
  const auto batch = augment_iteration(difficult, {}, aug, pools, {});
  EXPECT_EQ(batch.accepted.size(), 1u);
  EXPECT_EQ(batch.rejected_count_by_reason.at(RejectReason::duplicate), 1u);
}

TEST(AugmentIteration, OversizeAndBackendErrors) {
  const auto difficult = distinct_questions(4, "d");
  const auto pools = init_pools(difficult);
  FnBackend aug([](const ChatRequest& r) -> std::string {
    const auto q = extract_augment_prompt(last_user(r))->question;
    if (q.find("zebra") != std::string::npos) return std::string(3000, 'x');
    if (q.find("violin") != std::string::npos) throw BackendError(BackendErrorKind::permanent, "down");
    return "fresh question about " + std::to_string(q.size()) + " things";
  });
  const auto batch = augment_iteration(difficult, {}, aug, pools, {});
  EXPECT_EQ(batch.rejected_count_by_reason.at(RejectReason::oversize), 1u);
  EXPECT_EQ(batch.rejected_count_by_reason.at(RejectReason::backend_error), 1u);
  EXPECT_EQ(batch.accepted.size(), 2u);
  EXPECT_EQ(batch.generated, 3u);
}

TEST(AugmentIteration, RetriesOnRejectionUseNewDraws) {
  const auto difficult = distinct_questions(1, "d");
  const auto pools = init_pools(difficult);
  FnBackend aug([](const ChatRequest& r) {
    const auto q = extract_augment_prompt(last_user(r))->question;
    return r.sample_index == 0 ? q : std::string("A brand new question");
  });
  AugmentOptions opt;
  EXPECT_TRUE(augment_iteration(difficult, {}, aug, pools, opt).accepted.empty());
  opt.retries_on_rejection = 1;
  const auto batch = augment_iteration(difficult, {}, aug, pools, opt);
  ASSERT_EQ(batch.accepted.size(), 1u);
  EXPECT_EQ(batch.generated, 2u);
  EXPECT_EQ(batch.accepted[0].id, augmented_id(difficult[0].id, 1, 1));
}

TEST(AugmentIteration, DeterministicForSeed) {
  const auto difficult = distinct_questions(5, "d");
  const auto easy = distinct_questions(20, "e");
  auto all = difficult;
  all.insert(all.end(), easy.begin(), easy.end());
  const auto pools = init_pools(all);
  auto aug = novel_augmentor();
  AugmentOptions opt;
  opt.rng_seed = 4;
  opt.max_in_flight = 4;
  const auto a = augment_iteration(difficult, easy, aug, pools, opt);
  const auto b = augment_iteration(difficult, easy, aug, pools, opt);
  EXPECT_EQ(refresh(pools, a.accepted), refresh(pools, b.accepted));
}
