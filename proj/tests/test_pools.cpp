#include "mmdistill/error.hpp"
#include "mmdistill/pools.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mmdistill;
using mmdistill::testing::make_records;
using mmdistill::testing::TempDir;

namespace {

std::vector<InstructionRecord> augmented_batch(std::size_t n, std::uint32_t iteration, const std::string& parent) {
  auto recs = make_records(n, "it" + std::to_string(iteration) + "-");
  for (auto& r : recs) {
    r.origin = Origin::augmented;
    r.parent_id = parent;
    r.iteration = iteration;
  }
  return recs;
}

}  // namespace

TEST(Pools, InitFillsBothPools) {
  const auto state = init_pools(make_records(10));
  EXPECT_EQ(state.tuning.size(), 10u);
  EXPECT_EQ(state.cache.size(), 10u);
  EXPECT_EQ(state.iteration, 0u);
  EXPECT_FALSE(state.checkpoint_id.empty());
}

TEST(Pools, InitRejectsEmptyAndDuplicates) {
  EXPECT_THROW(init_pools({}), ValidationError);
  auto recs = make_records(3);
  recs.push_back(recs.front());
  EXPECT_THROW(init_pools(recs), DuplicateIdError);
}

TEST(Pools, RefreshCounts) {
  const auto state = init_pools(make_records(10));
  const auto next = refresh(state, augmented_batch(4, 1, "r1000"));
  EXPECT_EQ(next.cache.size(), 14u);
  EXPECT_EQ(next.tuning.size(), 4u);
  EXPECT_EQ(next.iteration, 1u);
}

TEST(Pools, EmptyRefresh) {
  const auto state = init_pools(make_records(5));
  const auto next = refresh(state, {});
  EXPECT_TRUE(next.tuning.empty());
  EXPECT_EQ(next.cache, state.cache);
  EXPECT_EQ(next.iteration, 1u);
}

TEST(Pools, RefreshRejectsCacheCollision) {
  const auto state = init_pools(make_records(5));
  auto batch = augmented_batch(2, 1, "r1000");
  batch[1].id = state.cache.begin()->first;
  EXPECT_THROW(refresh(state, batch), DuplicateIdError);
}

TEST(PoolsProperty, RandomRefreshSequences) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t seed_n = 1 + gen() % 20;
    auto state = init_pools(make_records(seed_n, "t" + std::to_string(trial) + "-"));
    std::size_t added = 0;
    for (std::uint32_t it = 1; it <= 6; ++it) {
      const auto before = state.cache;
      const auto batch = augmented_batch(gen() % 8, it, "p");
      state = refresh(state, batch);
      added += batch.size();
      for (const auto& [id, rec] : before) {
        ASSERT_TRUE(state.cache.count(id));
        ASSERT_EQ(state.cache.at(id), rec);
      }
      ASSERT_EQ(state.cache.size(), seed_n + added);
      ASSERT_EQ(state.tuning_records().size(), batch.size());
      for (const auto& r : batch) ASSERT_EQ(state.tuning.at(r.id), r);
    }
  }
}

TEST(Snapshot, RoundTripAndCanonicalBytes) {
  TempDir dir;
  auto state = refresh(init_pools(make_records(7)), augmented_batch(3, 1, "r1000"));
  snapshot(state, dir / "a", "fp");
  snapshot(state, dir / "b", "fp");
  EXPECT_EQ(restore(dir / "a"), state);
  for (const char* f : {kTuningFile, kCacheFile, kMetaFile}) {
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  }
  EXPECT_EQ(read_snapshot_meta(dir / "a").config_fingerprint, "fp");
}

TEST(Snapshot, RestoreEmptyDirFails) {
  TempDir dir;
  EXPECT_THROW(restore(dir.path()), CheckpointError);
  EXPECT_THROW(restore(dir / "missing"), CheckpointError);
}

TEST(Snapshot, CorruptedFileDetected) {
  TempDir dir;
  const auto state = init_pools(make_records(4));
  snapshot(state, dir / "s");
  auto text = read_file(dir / "s" / kCacheFile);
  text.replace(text.find("Question"), 8, "Puestion");
  write_file_atomic(dir / "s" / kCacheFile, text);
  EXPECT_THROW(restore(dir / "s"), CheckpointError);
}

TEST(Snapshot, InterruptedCommitKeepsPreviousSnapshot) {
  TempDir dir;
  const auto first = init_pools(make_records(4));
  snapshot(first, dir / "s");
  // A crash after staging but before the rename leaves a stray staging dir.
  const auto second = refresh(first, augmented_batch(2, 1, "r1000"));
  write_snapshot_files(second, dir / "s.staging");
  EXPECT_EQ(restore(dir / "s"), first);
  // A crash between the two renames leaves only the .old directory.
  std::filesystem::rename(dir / "s", dir / "s.old");
  EXPECT_EQ(restore(dir / "s"), first);
  snapshot(second, dir / "s");
  EXPECT_EQ(restore(dir / "s"), second);
}
