#pragma once

// Line-delimited JSON helpers. Objects are dumped with sorted keys (the
// default nlohmann object type), so equal values produce equal bytes.

#include "mmdistill/error.hpp"
#include "mmdistill/util.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace mmdistill::jsonl {

using json = nlohmann::json;

template <typename T>
std::string dump(const std::vector<T>& items) {
  std::string out;
  for (const auto& item : items) {
    out += json(item).dump();
    out.push_back('\n');
  }
  return out;
}

template <typename T>
void write(const std::vector<T>& items, const std::filesystem::path& path) {
  write_file_atomic(path, dump(items));
}

// Parses text line by line. Blank lines are skipped; any other malformed
// line raises ParseError carrying its 1-based line number.
template <typename T>
std::vector<T> parse(const std::string& text, const std::string& source = "<memory>") {
  std::vector<T> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line).get<T>());
    } catch (const std::exception& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  return out;
}

template <typename T>
std::vector<T> read(const std::filesystem::path& path) {
  return parse<T>(read_file(path), path.string());
}

inline std::vector<json> parse_values(const std::string& text, const std::string& source = "<memory>") {
  return parse<json>(text, source);
}

}  // namespace mmdistill::jsonl
