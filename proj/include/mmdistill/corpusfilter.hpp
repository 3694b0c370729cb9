#pragma once

// Image-caption corpus subsampling by noun-phrase frequency. Rare phrases
// are dropped; over-represented ones are capped by seeded sampling.

#include "mmdistill/core.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mmdistill {

struct CaptionPair {
  std::string pair_id;
  ImageRef image;
  std::string caption;
  // Precomputed phrases from an external extractor; used instead of the
  // built-in heuristic when present.
  std::optional<std::vector<std::string>> phrases;

  void validate() const;
  friend bool operator==(const CaptionPair&, const CaptionPair&) = default;
};

void to_json(json& j, const CaptionPair& p);
void from_json(const json& j, CaptionPair& p);

using PhraseExtractor = std::function<std::vector<std::string>(const std::string&)>;

// Document frequency: freq[p] == postings[p].size().
struct PhraseIndex {
  std::map<std::string, std::size_t> freq;
  std::map<std::string, std::set<std::string>> postings;
};

const std::set<std::string>& default_stopwords();

// Lowercases and tokenizes, then emits each maximal run of non-stopword
// tokens (runs also end at punctuation). Runs longer than three tokens keep
// their last three. Phrases are unique and in order of first appearance.
//   "a red car on the road" -> {"red car", "road"}
std::vector<std::string> extract_noun_phrases(const std::string& caption);

// Throws DuplicateIdError on a repeated pair_id. A null extractor means
// extract_noun_phrases.
PhraseIndex build_index(const std::vector<CaptionPair>& pairs, const PhraseExtractor& extractor = {});

struct FilterOptions {
  std::size_t min_freq = 3;
  std::size_t cap = 100;
  std::uint64_t rng_seed = 0;
};

struct FilterTrace {
  std::string phrase;
  std::size_t freq = 0;
  std::size_t taken = 0;  // pairs drawn for this phrase, <= cap
  std::size_t added = 0;  // of those, pairs not already selected
};

// Visits phrases with freq >= min_freq by ascending frequency, then
// lexicographically. Each adds all its pairs, or a seeded uniform sample of
// cap of them drawn from all its pairs. Output is sorted by pair_id.
std::vector<CaptionPair> filter_pairs(const std::vector<CaptionPair>& pairs, const FilterOptions& options,
                                      const PhraseExtractor& extractor = {}, std::vector<FilterTrace>* trace = nullptr);

std::vector<CaptionPair> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<CaptionPair>& pairs, const std::filesystem::path& path);

}  // namespace mmdistill
