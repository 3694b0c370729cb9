#include "mmdistill/corpusfilter.hpp"

#include "mmdistill/error.hpp"
#include "mmdistill/jsonl.hpp"
#include "mmdistill/util.hpp"

#include <algorithm>
#include <cctype>

namespace mmdistill {
namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c == '\'' || c >= 0x80; }

std::string join(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

}  // namespace

void CaptionPair::validate() const {
  if (pair_id.empty()) throw ValidationError("caption pair id is empty");
  if (trim(caption).empty()) throw ValidationError("caption of " + pair_id + " is empty");
}

void to_json(json& j, const CaptionPair& p) {
  j = json{{"pair_id", p.pair_id}, {"image_uri", p.image.uri}, {"caption", p.caption}};
  if (p.phrases) j["phrases"] = *p.phrases;
}

void from_json(const json& j, CaptionPair& p) {
  p.pair_id = j.at("pair_id").get<std::string>();
  p.image = ImageRef{j.at("image_uri").get<std::string>(), std::nullopt};
  p.caption = j.at("caption").get<std::string>();
  if (j.contains("phrases") && !j.at("phrases").is_null()) {
    p.phrases = j.at("phrases").get<std::vector<std::string>>();
  } else {
    p.phrases.reset();
  }
  p.validate();
}

const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",     "an",    "the",   "and",   "or",    "but",   "of",    "on",    "in",    "at",    "to",
      "for",   "with",  "by",    "from",  "into",  "onto",  "over",  "under", "near",  "next",  "behind",
      "above", "below", "up",    "down",  "out",   "off",   "through", "around", "across", "along", "about",
      "is",    "are",   "was",   "were",  "be",    "been",  "being", "has",   "have",  "had",   "do",
      "does",  "did",   "this",  "that",  "these", "those", "there", "here",  "it",    "its",   "it's",
      "he",    "she",   "they",  "them",  "his",   "her",   "their", "we",    "you",   "i",     "my",
      "our",   "your",  "some",  "many",  "few",   "several", "one", "two",   "three", "very",  "while",
      "as",    "who",   "which", "what",  "where", "when",  "how",   "not",   "no",    "can",   "will",
      "just",  "than",  "then",  "so",    "if",    "s"};
  return words;
}

std::vector<std::string> extract_noun_phrases(const std::string& caption) {
  const auto& stop = default_stopwords();
  std::vector<std::string> phrases;
  std::vector<std::string> run;
  auto flush = [&] {
    if (!run.empty()) {
      const auto begin = run.size() > 3 ? run.size() - 3 : 0;
      auto phrase = join(run, begin, run.size());
      if (std::find(phrases.begin(), phrases.end(), phrase) == phrases.end()) phrases.push_back(std::move(phrase));
      run.clear();
    }
  };
  const auto text = to_lower_ascii(caption);
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
      std::string token = text.substr(i, j - i);
      i = j;
      if (stop.count(token) != 0) flush();
      else run.push_back(std::move(token));
    } else {
      // Whitespace continues a run; anything else is a boundary.
      if (std::isspace(c) == 0) flush();
      ++i;
    }
  }
  flush();
  return phrases;
}

PhraseIndex build_index(const std::vector<CaptionPair>& pairs, const PhraseExtractor& extractor) {
  PhraseIndex index;
  std::set<std::string> seen;
  for (const auto& pair : pairs) {
    if (!seen.insert(pair.pair_id).second) throw DuplicateIdError(pair.pair_id);
    const auto phrases = pair.phrases ? *pair.phrases
                         : extractor  ? extractor(pair.caption)
                                      : extract_noun_phrases(pair.caption);
    for (const auto& p : phrases) {
      if (!p.empty()) index.postings[p].insert(pair.pair_id);
    }
  }
  for (const auto& [p, ids] : index.postings) index.freq[p] = ids.size();
  return index;
}

std::vector<CaptionPair> filter_pairs(const std::vector<CaptionPair>& pairs, const FilterOptions& options,
                                      const PhraseExtractor& extractor, std::vector<FilterTrace>* trace) {
  if (options.min_freq < 1) throw ValidationError("min_freq must be >= 1");
  if (options.cap < 1) throw ValidationError("cap must be >= 1");
  const auto index = build_index(pairs, extractor);

  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& [p, f] : index.freq) {
    if (f >= options.min_freq) order.emplace_back(f, p);
  }
  std::sort(order.begin(), order.end());

  std::set<std::string> selected;
  for (const auto& [f, phrase] : order) {
    std::vector<std::string> ids(index.postings.at(phrase).begin(), index.postings.at(phrase).end());
    if (ids.size() > options.cap) {
      Rng rng(derive_seed(options.rng_seed, phrase));
      for (std::size_t i = 0; i < options.cap; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_index(ids.size() - i));
        std::swap(ids[i], ids[j]);
      }
      ids.resize(options.cap);
    }
    std::size_t added = 0;
    for (auto& id : ids) added += selected.insert(id).second ? 1 : 0;
    if (trace != nullptr) trace->push_back({phrase, f, ids.size(), added});
  }

  std::vector<CaptionPair> out;
  for (const auto& pair : pairs) {
    if (selected.count(pair.pair_id) != 0) out.push_back(pair);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.pair_id < b.pair_id; });
  return out;
}

std::vector<CaptionPair> read_manifest(const std::filesystem::path& path) { return jsonl::read<CaptionPair>(path); }

void write_manifest(const std::vector<CaptionPair>& pairs, const std::filesystem::path& path) {
  jsonl::write(pairs, path);
}

}  // namespace mmdistill
