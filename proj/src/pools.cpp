#include "mmdistill/pools.hpp"

#include "mmdistill/error.hpp"
#include "mmdistill/jsonl.hpp"
#include "mmdistill/util.hpp"

#include <system_error>

namespace mmdistill {
namespace fs = std::filesystem;

namespace {

std::vector<InstructionRecord> values_of(const RecordMap& m) {
  std::vector<InstructionRecord> out;
  out.reserve(m.size());
  for (const auto& [_, rec] : m) out.push_back(rec);
  return out;
}

fs::path sibling(const fs::path& dir, const char* suffix) {
  auto p = dir;
  if (!p.has_filename()) p = p.parent_path();
  p += suffix;
  return p;
}

RecordMap load_pool_file(const fs::path& path) {
  RecordMap out;
  for (auto& rec : parse_records(read_file(path), path.string())) {
    auto id = rec.id;
    out.emplace(std::move(id), std::move(rec));
  }
  return out;
}

}  // namespace

std::vector<InstructionRecord> PoolState::tuning_records() const { return values_of(tuning); }
std::vector<InstructionRecord> PoolState::cache_records() const { return values_of(cache); }

std::string compute_checkpoint_id(const PoolState& state) {
  std::uint64_t h = fnv1a64("pools");
  h = fnv1a64(std::to_string(state.iteration), h);
  for (const auto& [id, _] : state.tuning) h = fnv1a64("t:" + id + "\n", h);
  for (const auto& [id, _] : state.cache) h = fnv1a64("c:" + id + "\n", h);
  return "ckpt-" + std::to_string(state.iteration) + "-" + to_hex(h);
}

PoolState init_pools(const std::vector<InstructionRecord>& seed) {
  if (seed.empty()) throw ValidationError("seed set is empty; a run needs at least one instruction");
  PoolState state;
  for (const auto& rec : seed) {
    rec.validate();
    if (!state.tuning.emplace(rec.id, rec).second) throw DuplicateIdError(rec.id);
  }
  state.cache = state.tuning;
  state.iteration = 0;
  state.checkpoint_id = compute_checkpoint_id(state);
  return state;
}

PoolState refresh(const PoolState& state, const std::vector<InstructionRecord>& new_instructions) {
  PoolState next;
  next.cache = state.cache;
  for (const auto& rec : new_instructions) {
    rec.validate();
    if (state.cache.count(rec.id) != 0) {
      throw DuplicateIdError(rec.id);
    }
    if (!next.tuning.emplace(rec.id, rec).second) throw DuplicateIdError(rec.id);
  }
  next.cache.insert(next.tuning.begin(), next.tuning.end());
  next.iteration = state.iteration + 1;
  next.checkpoint_id = compute_checkpoint_id(next);
  return next;
}

void write_snapshot_files(const PoolState& state, const fs::path& dir, const std::string& config_fingerprint) {
  fs::create_directories(dir);
  const auto tuning = jsonl::dump(state.tuning_records());
  const auto cache = jsonl::dump(state.cache_records());
  write_file_atomic(dir / kTuningFile, tuning);
  write_file_atomic(dir / kCacheFile, cache);
  const json meta = {{"iteration", state.iteration},
                     {"checkpoint_id", state.checkpoint_id},
                     {"config_fingerprint", config_fingerprint},
                     {"tuning_digest", to_hex(fnv1a64(tuning))},
                     {"cache_digest", to_hex(fnv1a64(cache))},
                     {"format", "mmdistill-pools-v1"}};
  write_file_atomic(dir / kMetaFile, meta.dump(2) + "\n");
}

void commit_directory(const fs::path& staged, const fs::path& dir) {
  const auto old = sibling(dir, ".old");
  std::error_code ec;
  fs::remove_all(old, ec);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(staged, dir);
  fs::remove_all(old, ec);
}

void snapshot(const PoolState& state, const fs::path& dir, const std::string& config_fingerprint) {
  const auto staged = sibling(dir, ".staging");
  std::error_code ec;
  fs::remove_all(staged, ec);
  write_snapshot_files(state, staged, config_fingerprint);
  commit_directory(staged, dir);
}

SnapshotMeta read_snapshot_meta(const fs::path& dir_in) {
  auto dir = dir_in;
  // A crash between the two renames of commit_directory leaves only ".old".
  if (!fs::exists(dir / kMetaFile) && fs::exists(sibling(dir_in, ".old") / kMetaFile)) {
    dir = sibling(dir_in, ".old");
  }
  if (!fs::exists(dir / kMetaFile)) throw CheckpointError("no checkpoint in " + dir_in.string());
  try {
    const auto meta = json::parse(read_file(dir / kMetaFile));
    SnapshotMeta m;
    m.iteration = meta.at("iteration").get<std::uint32_t>();
    m.checkpoint_id = meta.at("checkpoint_id").get<std::string>();
    m.config_fingerprint = meta.value("config_fingerprint", "");
    m.tuning_digest = meta.at("tuning_digest").get<std::string>();
    m.cache_digest = meta.at("cache_digest").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint meta in " + dir.string() + ": " + e.what());
  }
}

PoolState restore(const fs::path& dir_in) {
  auto dir = dir_in;
  if (!fs::exists(dir / kMetaFile) && fs::exists(sibling(dir_in, ".old") / kMetaFile)) {
    dir = sibling(dir_in, ".old");
  }
  const auto meta = read_snapshot_meta(dir);
  for (const char* f : {kTuningFile, kCacheFile}) {
    if (!fs::exists(dir / f)) throw CheckpointError("partial checkpoint: missing " + std::string(f));
  }
  const auto tuning_text = read_file(dir / kTuningFile);
  const auto cache_text = read_file(dir / kCacheFile);
  if (to_hex(fnv1a64(tuning_text)) != meta.tuning_digest || to_hex(fnv1a64(cache_text)) != meta.cache_digest) {
    throw CheckpointError("corrupt checkpoint in " + dir.string() + ": digest mismatch");
  }
  PoolState state;
  try {
    state.tuning = load_pool_file(dir / kTuningFile);
    state.cache = load_pool_file(dir / kCacheFile);
  } catch (const Error& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  state.iteration = meta.iteration;
  state.checkpoint_id = meta.checkpoint_id;
  for (const auto& [id, _] : state.tuning) {
    if (state.cache.count(id) == 0) throw CheckpointError("corrupt checkpoint: tuning record " + id + " not cached");
  }
  if (compute_checkpoint_id(state) != state.checkpoint_id) {
    throw CheckpointError("corrupt checkpoint: checkpoint id mismatch");
  }
  return state;
}

}  // namespace mmdistill
