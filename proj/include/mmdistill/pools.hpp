#pragma once

// Instruction tuning pool (replaced on every refresh) and instruction cache
// pool (merged on every refresh), with on-disk snapshots.

#include "mmdistill/core.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mmdistill {

using RecordMap = std::map<std::string, InstructionRecord>;

struct PoolState {
  RecordMap tuning;
  RecordMap cache;
  std::uint32_t iteration = 0;
  std::string checkpoint_id;

  std::vector<InstructionRecord> tuning_records() const;
  std::vector<InstructionRecord> cache_records() const;

  friend bool operator==(const PoolState&, const PoolState&) = default;
};

// Content-derived identity of a pool state: iteration plus both id sets.
std::string compute_checkpoint_id(const PoolState& state);

PoolState init_pools(const std::vector<InstructionRecord>& seed);

// tuning' = new_instructions, cache' = cache U new_instructions.
// Throws DuplicateIdError for an id already in the cache or repeated in the batch.
PoolState refresh(const PoolState& state, const std::vector<InstructionRecord>& new_instructions);

struct SnapshotMeta {
  std::uint32_t iteration = 0;
  std::string checkpoint_id;
  std::string config_fingerprint;
  std::string tuning_digest;
  std::string cache_digest;
};

inline constexpr const char* kTuningFile = "tuning.jsonl";
inline constexpr const char* kCacheFile = "cache.jsonl";
inline constexpr const char* kMetaFile = "meta.json";

// Writes tuning.jsonl, cache.jsonl and meta.json into dir (no atomicity).
// Records are sorted by id so equal states give byte-equal files.
void write_snapshot_files(const PoolState& state, const std::filesystem::path& dir,
                          const std::string& config_fingerprint = "");

// Atomic snapshot: files are staged in a sibling directory which is then
// renamed into place. A previous snapshot at dir survives any failure before
// the final rename.
void snapshot(const PoolState& state, const std::filesystem::path& dir,
              const std::string& config_fingerprint = "");

// Throws CheckpointError if dir holds no snapshot or the snapshot is partial
// or fails its digests.
PoolState restore(const std::filesystem::path& dir);
SnapshotMeta read_snapshot_meta(const std::filesystem::path& dir);

// Replaces dir with staged (a fully written directory) via rename.
void commit_directory(const std::filesystem::path& staged, const std::filesystem::path& dir);

}  // namespace mmdistill
