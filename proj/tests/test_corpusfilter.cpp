#include "mmdistill/corpusfilter.hpp"
#include "mmdistill/error.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mmdistill;
using mmdistill::testing::TempDir;

namespace {

CaptionPair pair(const std::string& id, const std::string& caption) {
  return CaptionPair{id, ImageRef{"img://" + id, std::nullopt}, caption, std::nullopt};
}

using Phrases = std::vector<std::string>;

}  // namespace

TEST(NounPhrases, WorkedExamples) {
  EXPECT_EQ(extract_noun_phrases("a red car on the road"), (Phrases{"red car", "road"}));
  EXPECT_TRUE(extract_noun_phrases("").empty());
  EXPECT_TRUE(extract_noun_phrases("the of and").empty());
  EXPECT_EQ(extract_noun_phrases("A Dog, a dog and the DOG."), (Phrases{"dog"}));
}

TEST(NounPhrases, LongRunsKeepTheirLastThreeTokens) {
  EXPECT_EQ(extract_noun_phrases("big old rusty red tractor in a field"), (Phrases{"rusty red tractor", "field"}));
}

TEST(NounPhrases, PunctuationEndsARun) {
  EXPECT_EQ(extract_noun_phrases("sunset beach; palm trees"), (Phrases{"sunset beach", "palm trees"}));
}

TEST(Index, HandBuiltTable) {
  const std::vector<CaptionPair> pairs = {
      pair("1", "a dog on the grass"), pair("2", "the dog with a ball"), pair("3", "a cat on the grass"),
      pair("4", "dog"),                pair("5", "a ball"),              pair("6", "a cat and a dog")};
  const auto idx = build_index(pairs);
  const std::map<std::string, std::size_t> expected = {{"dog", 4}, {"grass", 2}, {"ball", 2}, {"cat", 2}};
  EXPECT_EQ(idx.freq, expected);
  EXPECT_EQ(idx.postings.at("dog"), (std::set<std::string>{"1", "2", "4", "6"}));
  for (const auto& [p, f] : idx.freq) EXPECT_EQ(f, idx.postings.at(p).size());
}

TEST(Index, EmptyAndDuplicates) {
  EXPECT_TRUE(build_index({}).freq.empty());
  EXPECT_THROW(build_index({pair("1", "dog"), pair("1", "cat")}), DuplicateIdError);
}

TEST(Index, PrecomputedPhrasesAndCustomExtractor) {
  auto p = pair("1", "ignored text");
  p.phrases = Phrases{"golden retriever"};
  EXPECT_EQ(build_index({p}).freq.count("golden retriever"), 1u);
  const auto idx = build_index({pair("2", "alpha beta")}, [](const std::string& c) { return Phrases{c + "!"}; });
  EXPECT_EQ(idx.freq.count("alpha beta!"), 1u);
}

TEST(Filter, AllRareGivesNothing) {
  std::vector<CaptionPair> pairs;
  for (int i = 0; i < 20; ++i) pairs.push_back(pair(std::to_string(i), "unique" + std::to_string(i)));
  EXPECT_TRUE(filter_pairs(pairs, {}).empty());
}

TEST(Filter, CapsAFrequentPhrase) {
  std::vector<CaptionPair> pairs;
  for (int i = 0; i < 150; ++i) pairs.push_back(pair("p" + std::to_string(1000 + i), "a kite"));
  FilterOptions opt;
  opt.rng_seed = 9;
  const auto a = filter_pairs(pairs, opt);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_EQ(a, filter_pairs(pairs, opt));
  opt.rng_seed = 10;
  EXPECT_NE(a, filter_pairs(pairs, opt));
}

TEST(Filter, VisitsAscendingFrequency) {
  std::vector<CaptionPair> pairs;
  for (int i = 0; i < 5; ++i) pairs.push_back(pair("b" + std::to_string(i), "a boat"));
  for (int i = 0; i < 3; ++i) pairs.push_back(pair("a" + std::to_string(i), "an apple"));
  for (int i = 0; i < 3; ++i) pairs.push_back(pair("c" + std::to_string(i), "a cloud"));
  std::vector<FilterTrace> trace;
  const auto out = filter_pairs(pairs, {}, {}, &trace);
  ASSERT_EQ(trace.size(), 3u);
  EXPECT_EQ(trace[0].phrase, "apple");
  EXPECT_EQ(trace[1].phrase, "cloud");
  EXPECT_EQ(trace[2].phrase, "boat");
  EXPECT_EQ(out.size(), 11u);
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_LT(out[i - 1].pair_id, out[i].pair_id);
}

TEST(Filter, IdempotentWithoutCapping) {
  std::mt19937_64 gen(2);
  const Phrases words = {"tree", "river", "bridge", "house", "horse", "lamp", "clock", "vase"};
  std::vector<CaptionPair> pairs;
  for (int i = 0; i < 200; ++i) {
    pairs.push_back(pair("x" + std::to_string(10000 + i),
                         "a " + words[gen() % words.size()] + " near the " + words[gen() % words.size()]));
  }
  FilterOptions opt;
  opt.cap = 1000;
  const auto once = filter_pairs(pairs, opt);
  EXPECT_EQ(filter_pairs(once, opt), once);
}

TEST(Filter, RejectsBadParameters) {
  FilterOptions opt;
  opt.min_freq = 0;
  EXPECT_THROW(filter_pairs({}, opt), ValidationError);
  opt = FilterOptions{};
  opt.cap = 0;
  EXPECT_THROW(filter_pairs({}, opt), ValidationError);
}

TEST(Manifest, RoundTrip) {
  TempDir dir;
  auto p = pair("1", "a dog");
  p.phrases = Phrases{"dog"};
  const std::vector<CaptionPair> pairs = {p, pair("2", "a cat")};
  write_manifest(pairs, dir / "m.jsonl");
  EXPECT_EQ(read_manifest(dir / "m.jsonl"), pairs);
  const auto line = json::parse(read_file(dir / "m.jsonl").substr(0, read_file(dir / "m.jsonl").find('\n')));
  EXPECT_EQ(line.at("image_uri"), "img://1");
}
