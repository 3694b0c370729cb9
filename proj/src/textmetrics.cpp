#include "mmdistill/textmetrics.hpp"

#include <algorithm>
#include <cstdint>

namespace mmdistill {
namespace {

// Decodes one UTF-8 code point at text[i], advancing i. Malformed bytes are
// returned as themselves so tokenization never fails.
char32_t next_code_point(std::string_view text, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  std::size_t len = 1;
  char32_t cp = b0;
  if (b0 >= 0xF0 && b0 < 0xF8) {
    len = 4;
    cp = b0 & 0x07;
  } else if (b0 >= 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  }
  if (len > 1) {
    if (i + len > text.size()) {
      ++i;
      return b0;
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(text[i + k]);
      if ((b & 0xC0) != 0x80) {
        ++i;
        return b0;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
  }
  i += len;
  return cp;
}

bool is_separator(char32_t cp) {
  if (cp < 0x80) {
    const auto c = static_cast<char>(cp);
    return !((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9'));
  }
  return (cp >= 0x0080 && cp <= 0x00BF) ||  // Latin-1 controls, NBSP, punctuation, symbols
         cp == 0x00D7 || cp == 0x00F7 ||
         (cp >= 0x2000 && cp <= 0x206F) ||  // general punctuation (dashes, quotes, spaces)
         (cp >= 0x3000 && cp <= 0x303F) ||  // CJK punctuation
         (cp >= 0xFE30 && cp <= 0xFE4F) ||
         (cp >= 0xFF00 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20);
}

}  // namespace

TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t begin = i;
    const char32_t cp = next_code_point(text, i);
    if (is_separator(cp)) {
      if (!current.empty()) out.tokens.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (cp < 0x80) {
      char c = static_cast<char>(cp);
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      current.push_back(c);
    } else {
      current.append(text.substr(begin, i - begin));
    }
  }
  if (!current.empty()) out.tokens.push_back(std::move(current));
  return out;
}

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  const auto& x = a.size() >= b.size() ? a.tokens : b.tokens;
  const auto& y = a.size() >= b.size() ? b.tokens : a.tokens;
  if (y.empty()) return 0;
  std::vector<std::size_t> prev(y.size() + 1, 0), row(y.size() + 1, 0);
  for (const auto& xi : x) {
    for (std::size_t j = 1; j <= y.size(); ++j) {
      row[j] = (xi == y[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], row[j - 1]);
    }
    std::swap(prev, row);
  }
  return prev[y.size()];
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(candidate.size());
  const double recall = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * precision * recall / (recall + b2 * precision);
}

}  // namespace mmdistill
