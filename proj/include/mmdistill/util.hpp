#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>

namespace mmdistill {

// 64-bit FNV-1a. Stable across platforms, used for content-addressed ids,
// fingerprints and seed derivation.
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = kFnvOffset) noexcept {
  for (unsigned char c : data) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string to_hex(std::uint64_t value);

// Hashes the parts with a separator byte so ("ab","c") != ("a","bc").
std::uint64_t hash_parts(std::initializer_list<std::string_view> parts);

// "<prefix>-<16 hex digits>" derived from the parts.
std::string content_id(std::string_view prefix, std::initializer_list<std::string_view> parts);

// Mixes a user seed with a label into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// Deterministic generator. std::mt19937_64's output sequence is fixed by the
// standard; the helpers below avoid the implementation-defined distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, bound). bound must be > 0.
  std::uint64_t uniform_index(std::uint64_t bound);
  // Uniform in [0, 1).
  double uniform01();
  bool coin() { return (engine_() >> 63) != 0; }

 private:
  std::mt19937_64 engine_;
};

// Uniform in [0, 1) from a hash, for stateless pseudo-randomness.
double unit_from_hash(std::uint64_t h) noexcept;

std::string_view trim(std::string_view s) noexcept;
std::string to_lower_ascii(std::string_view s);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file, flushes, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// Runs fn(i) for i in [0, n) on at most max_in_flight threads at once.
// Exceptions escaping fn are rethrown (first by index) after all workers join.
void parallel_for_bounded(std::size_t n, std::size_t max_in_flight,
                          const std::function<void(std::size_t)>& fn);

std::string base64_encode(std::string_view data);

}  // namespace mmdistill
