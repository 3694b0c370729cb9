#include "mmdistill/core.hpp"
#include "mmdistill/error.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace mmdistill;
using mmdistill::testing::TempDir;

namespace {

ConversationSample sample_with_turns(const std::string& id, std::size_t m) {
  ConversationSample s;
  s.id = id;
  s.image.uri = "img://" + id;
  for (std::size_t t = 0; t < m; ++t) {
    s.turns.push_back({"question " + std::to_string(t) + " of " + id, "answer " + std::to_string(t) + " of " + id});
  }
  return s;
}

std::vector<SpanKind> kinds(const RenderedSequence& seq) {
  std::vector<SpanKind> out;
  for (const auto& s : seq.spans) out.push_back(s.kind);
  return out;
}

}  // namespace

TEST(SingleTurn, OneRecordPerTurnSharingTheImage) {
  const auto records = to_single_turn({sample_with_turns("a", 3)});
  ASSERT_EQ(records.size(), 3u);
  std::set<std::string> ids;
  for (const auto& r : records) {
    EXPECT_EQ(r.image.uri, "img://a");
    EXPECT_EQ(r.origin, Origin::seed);
    EXPECT_EQ(r.iteration, 0u);
    ids.insert(r.id);
  }
  EXPECT_EQ(ids.size(), 3u);
}

TEST(SingleTurn, TurnCountsAddUp) {
  std::vector<ConversationSample> dataset;
  const std::vector<std::size_t> m = {1, 2, 1, 3, 2};
  std::size_t expected = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    dataset.push_back(sample_with_turns("s" + std::to_string(i), m[i]));
    expected += m[i];
  }
  EXPECT_EQ(expected, 9u);
  EXPECT_EQ(to_single_turn(dataset).size(), expected);
}

TEST(SingleTurn, IdsAreContentAddressed) {
  const auto a = to_single_turn({sample_with_turns("x", 2)});
  const auto b = to_single_turn({sample_with_turns("x", 2)});
  EXPECT_EQ(a, b);
  EXPECT_NE(a[0].id, a[1].id);
}

TEST(Render, TwoTurnsImageBeforeQuestion) {
  RenderOptions opt;
  opt.system_prompt = "SYS ";
  opt.image_position = ImagePosition::before_question;
  const auto seq = render_conversation(sample_with_turns("t", 2), opt);
  EXPECT_EQ(kinds(seq), (std::vector<SpanKind>{SpanKind::prompt, SpanKind::image_token, SpanKind::question,
                                               SpanKind::stop, SpanKind::answer, SpanKind::stop,
                                               SpanKind::question, SpanKind::stop, SpanKind::answer,
                                               SpanKind::stop}));
  EXPECT_NO_THROW(seq.validate());
  EXPECT_EQ(seq.text, "SYS <image>question 0 of t###answer 0 of t###question 1 of t###answer 1 of t###");
}

TEST(Render, ImageAfterQuestion) {
  RenderOptions opt;
  opt.image_position = ImagePosition::after_question;
  const auto seq = render_conversation(sample_with_turns("t", 1), opt);
  EXPECT_EQ(kinds(seq), (std::vector<SpanKind>{SpanKind::question, SpanKind::image_token, SpanKind::stop,
                                               SpanKind::answer, SpanKind::stop}));
}

TEST(Render, EmptyPromptHasNoPromptSpan) {
  RenderOptions opt;
  opt.image_position = ImagePosition::before_question;
  const auto seq = render_conversation(sample_with_turns("t", 1), opt);
  EXPECT_EQ(seq.spans.front().kind, SpanKind::image_token);
  EXPECT_EQ(seq.spans.front().start, 0u);
}

TEST(Render, LossMaskIsAnswersAndTheirStops) {
  RenderOptions opt;
  opt.system_prompt = "prompt";
  const auto sample = sample_with_turns("m", 3);
  const auto seq = render_conversation(sample, opt);
  std::string expected;
  for (const auto& t : sample.turns) expected += t.answer + "###";
  EXPECT_EQ(seq.masked_text(), expected);
  for (const auto& s : seq.loss_mask()) EXPECT_TRUE(s.kind == SpanKind::answer || s.kind == SpanKind::stop);
  EXPECT_EQ(seq.loss_mask().size(), 6u);
}

TEST(Render, RandomizedIsDeterministicAndVaries) {
  RenderOptions opt;
  opt.rng_seed = 99;
  std::size_t before = 0;
  for (int i = 0; i < 64; ++i) {
    const auto s = sample_with_turns("r" + std::to_string(i), 1);
    const auto a = render_conversation(s, opt);
    const auto b = render_conversation(s, opt);
    EXPECT_EQ(a.text, b.text);
    before += image_first(s, opt) ? 1 : 0;
  }
  EXPECT_GT(before, 10u);
  EXPECT_LT(before, 54u);
}

TEST(Render, RejectsStopTokenInsideText) {
  auto s = sample_with_turns("bad", 1);
  s.turns[0].answer = "contains ### inside";
  EXPECT_THROW(render_conversation(s, RenderOptions{}), ValidationError);
  RenderOptions empty_stop;
  empty_stop.stop_token = "";
  EXPECT_THROW(render_conversation(sample_with_turns("ok", 1), empty_stop), ValidationError);
}

TEST(Records, RoundTripKeepsOrder) {
  TempDir dir;
  std::vector<InstructionRecord> recs = {mmdistill::testing::make_record("c", "u1", "q1"),
                                         mmdistill::testing::make_record("a", "u2", "q2"),
                                         mmdistill::testing::make_record("b", "u3", "q3")};
  recs[1].parent_id = "c";
  recs[1].origin = Origin::augmented;
  recs[1].iteration = 2;
  recs[2].image.content_hash = "abcd";
  write_records(recs, dir / "r.jsonl");
  EXPECT_EQ(read_records(dir / "r.jsonl"), recs);
}

TEST(Records, InvalidJsonReportsLine) {
  const std::string text =
      R"({"id":"a","image":"u","question":"q"})" "\n" "{not json\n";
  try {
    parse_records(text);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Records, DuplicateIdRejected) {
  const std::string text = R"({"id":"a","image":"u","question":"q"})" "\n"
                           R"({"id":"a","image":"v","question":"r"})" "\n";
  EXPECT_THROW(parse_records(text), DuplicateIdError);
}

TEST(Records, InvariantsEnforced) {
  EXPECT_THROW(parse_records(R"({"id":"a","image":"u","question":""})"), ParseError);
  EXPECT_THROW(parse_records(R"({"id":"a","image":"u","question":"q","origin":"augmented"})"), ParseError);
  EXPECT_THROW(parse_records(R"({"id":"a","image":{"uri":"u","content_hash":"XYZ"},"question":"q"})"), ParseError);
}

TEST(SeedDataset, ConversationLinesExpand) {
  TempDir dir;
  write_file_atomic(dir / "seed.jsonl",
                    R"({"id":"s1","image":"img/1.jpg","conversations":[{"from":"human","value":"<image>\nWhat is it?"},{"from":"gpt","value":"A cat."},{"from":"human","value":"Color?"},{"from":"gpt","value":"Black."}]})"
                    "\n");
  const auto recs = load_seed_dataset(dir / "seed.jsonl");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].question, "What is it?");
  EXPECT_EQ(recs[1].question, "Color?");
}

TEST(SeedDataset, MixedFormatsRejected) {
  TempDir dir;
  write_file_atomic(dir / "seed.jsonl",
                    R"({"id":"s1","image":"i","conversations":[{"from":"human","value":"q"},{"from":"gpt","value":"a"}]})"
                    "\n" R"({"id":"r1","image":"i","question":"q"})" "\n");
  EXPECT_THROW(load_seed_dataset(dir / "seed.jsonl"), ParseError);
}

TEST(SampleJson, ExportShape) {
  const auto s = sample_with_turns("e", 2);
  const json j = s;
  ASSERT_EQ(j.at("conversations").size(), 4u);
  EXPECT_EQ(j["conversations"][0]["from"], "human");
  EXPECT_EQ(j["conversations"][1]["from"], "gpt");
  EXPECT_EQ(j["image"], "img://e");
  EXPECT_EQ(j.get<ConversationSample>(), s);
}
