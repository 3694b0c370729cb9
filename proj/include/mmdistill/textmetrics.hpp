#pragma once

// Token-level ROUGE-L for the augmentation novelty gate.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace mmdistill {

// Lowercased tokens, never empty strings.
struct TokenSeq {
  std::vector<std::string> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// Lowercases ASCII, splits on whitespace and punctuation (ASCII and the
// common Unicode punctuation blocks), and drops the punctuation.
TokenSeq tokenize(std::string_view text);

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b);

// F-measure over LCS precision (vs candidate) and recall (vs reference).
// beta = 1 gives the balanced, symmetric F1. Zero when either side is empty
// or nothing is shared.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta = 1.0);

inline double rouge_l(std::string_view candidate, std::string_view reference, double beta = 1.0) {
  return rouge_l(tokenize(candidate), tokenize(reference), beta);
}

}  // namespace mmdistill
