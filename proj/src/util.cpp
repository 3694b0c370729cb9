#include "mmdistill/util.hpp"

#include "mmdistill/error.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include <unistd.h>

namespace mmdistill {

std::string to_hex(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
    value >>= 4;
  }
  return out;
}

std::uint64_t hash_parts(std::initializer_list<std::string_view> parts) {
  std::uint64_t h = kFnvOffset;
  for (auto part : parts) {
    h = fnv1a64(part, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
  }
  return h;
}

std::string content_id(std::string_view prefix, std::initializer_list<std::string_view> parts) {
  std::string id(prefix);
  id.push_back('-');
  id += to_hex(hash_parts(parts));
  return id;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  const std::string s = std::to_string(seed);
  // splitmix64 finalizer over the FNV digest spreads nearby seeds apart.
  std::uint64_t z = hash_parts({s, label}) + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::uniform_index(std::uint64_t bound) {
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % bound;
}

double Rng::uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double unit_from_hash(std::uint64_t h) noexcept { return static_cast<double>(h >> 11) * 0x1.0p-53; }

std::string_view trim(std::string_view s) noexcept {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void parallel_for_bounded(std::size_t n, std::size_t max_in_flight,
                          const std::function<void(std::size_t)>& fn) {
  if (max_in_flight == 0) throw ValidationError("max_in_flight must be >= 1");
  if (n == 0) return;
  const std::size_t workers = std::min(n, max_in_flight);
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string base64_encode(std::string_view data) {
  static constexpr char kTable[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < data.size(); i += 3) {
    const auto a = static_cast<unsigned char>(data[i]);
    const auto b = static_cast<unsigned char>(data[i + 1]);
    const auto c = static_cast<unsigned char>(data[i + 2]);
    out.push_back(kTable[a >> 2]);
    out.push_back(kTable[((a & 0x3) << 4) | (b >> 4)]);
    out.push_back(kTable[((b & 0xF) << 2) | (c >> 6)]);
    out.push_back(kTable[c & 0x3F]);
  }
  if (i < data.size()) {
    const auto a = static_cast<unsigned char>(data[i]);
    out.push_back(kTable[a >> 2]);
    if (i + 1 < data.size()) {
      const auto b = static_cast<unsigned char>(data[i + 1]);
      out.push_back(kTable[((a & 0x3) << 4) | (b >> 4)]);
      out.push_back(kTable[(b & 0xF) << 2]);
    } else {
      out.push_back(kTable[(a & 0x3) << 4]);
      out.push_back('=');
    }
    out.push_back('=');
  }
  return out;
}

}  // namespace mmdistill
