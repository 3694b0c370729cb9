#pragma once

// Drives tune -> assess -> augment iterations over a run directory.
//
// Run directory layout:
//   config.json                 RunConfig as supplied
//   run.lock                    flock()-held while an orchestrator owns the run
//   seed.jsonl                  seed instructions
//   checkpoint/                 committed atomically after every phase
//     tuning.jsonl cache.jsonl meta.json progress.json backend_state.json
//   iterations/NNNN/            per-iteration artifacts
//     teacher_answers.jsonl export.jsonl export.masks.jsonl
//     assessments.jsonl augmentation.json report.json timings.json

#include "mmdistill/assess.hpp"
#include "mmdistill/augment.hpp"
#include "mmdistill/backends.hpp"
#include "mmdistill/core.hpp"
#include "mmdistill/pools.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mmdistill {

enum class AssessScope { full_cache, delta_only };
std::string_view to_string(AssessScope s) noexcept;

enum class Phase { tune, assess, augment, done };
std::string_view to_string(Phase p) noexcept;
Phase phase_from_string(std::string_view s);

struct RunConfig {
  double tau = kDefaultTau;
  std::uint32_t iterations = 4;
  std::map<Role, double> temperatures = {
      {Role::teacher, 0.5}, {Role::student, 0.5}, {Role::assessor, 0.5}, {Role::augmentor, 0.5}};
  double rouge_threshold = kDefaultRougeThreshold;
  AssessScope assess_scope = AssessScope::full_cache;
  std::string stop_token = std::string(kDefaultStopToken);
  std::string system_prompt =
      "A chat between a curious human and an artificial intelligence assistant. The assistant gives "
      "helpful, detailed, and polite answers to the human's questions about the image.";
  ImagePosition image_position = ImagePosition::randomized;
  std::uint64_t rng_seed = 0;
  // Per-role backend specs: {"type": "synthetic" | "wire" | "cassette", ...}.
  std::map<Role, json> backends;
  std::string scenario = "builtin:default";
  std::size_t max_in_flight = 4;
  std::optional<std::string> trainer_hook;
  // Fraction of teacher calls allowed to fail before the tune phase aborts.
  double teacher_failure_tolerance = 0.1;
  bool early_stop_on_zero_accept = true;
  bool reuse_teacher_answers = true;
  std::uint32_t parse_attempts = kDefaultParseAttempts;
  std::uint32_t augment_retries = 0;
  GateScope gate_scope = GateScope::cache_and_siblings;
  std::size_t max_output_chars = 2048;
  std::size_t max_candidate_chars = kMaxCandidateChars;
  // Synthetic student learning rate; unset uses the scenario's.
  std::optional<double> learning_rate;
  std::size_t histogram_bins = 10;

  void validate() const;
  // Digest of every field that changes results. iterations and max_in_flight
  // are excluded: raising the iteration budget or the parallelism of a
  // paused run does not change what has been computed.
  std::string fingerprint() const;
};

void to_json(json& j, const RunConfig& c);
void from_json(const json& j, RunConfig& c);
RunConfig load_config(const std::filesystem::path& path);

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges; the last bin also takes overflow
  std::vector<std::size_t> counts;

  static Histogram build(const std::vector<double>& values, double lo, double hi, std::size_t bins);
};

struct IterationReport {
  std::uint32_t iteration = 0;
  std::size_t assessed = 0;
  std::size_t skipped = 0;
  std::size_t difficult = 0;
  std::size_t easy = 0;
  std::size_t generated = 0;
  std::size_t accepted = 0;
  std::map<std::string, std::size_t> rejected_by_reason;
  Histogram r_s_hist;
  Histogram r_t_hist;
  Histogram s_k_hist;
  // difficult / (difficult + easy); 0 when nothing was scored.
  double difficult_fraction = 0.0;
  std::size_t tuning_size = 0;
  std::size_t cache_size = 0;
  std::uint64_t wall_time_ms = 0;
};

void to_json(json& j, const IterationReport& r);
void from_json(const json& j, IterationReport& r);

// Counts and histograms derived from persisted assessment results.
IterationReport summarize_assessments(std::uint32_t iteration, const std::vector<AssessmentResult>& results,
                                      std::size_t bins);

struct Progress {
  std::uint32_t iteration = 1;  // loop iteration the next phase belongs to
  Phase next_phase = Phase::tune;
  bool stopped_early = false;
};

// Creates the run directory: config, seed set, iteration-0 checkpoint.
// Refuses a non-empty directory unless force is set.
void init_run(const std::filesystem::path& run_dir, const RunConfig& config,
              const std::vector<InstructionRecord>& seed, bool force = false);
void init_run(const std::filesystem::path& run_dir, const RunConfig& config,
              const std::filesystem::path& seed_dataset, bool force = false);

// Builds backends from the config. Synthetic roles share one world.
BackendSet build_backends(const RunConfig& config, const std::filesystem::path& base_dir = {});

// Rebuilds the training export of an iteration from its teacher answers.
struct ExportPaths {
  std::filesystem::path data;
  std::filesystem::path masks;
};
std::vector<ConversationSample> build_training_samples(const std::vector<InstructionRecord>& instructions,
                                                       const std::vector<AnswerRecord>& answers,
                                                       std::uint32_t iteration);
ExportPaths write_training_export(const std::vector<ConversationSample>& samples, const RunConfig& config,
                                  std::uint32_t iteration, const std::filesystem::path& data_path);

// Runs `<hook> --data <path> --iteration <n>` through /bin/sh; returns the
// exit status (non-zero on abnormal termination).
int invoke_trainer_hook(const std::string& hook, const std::filesystem::path& data, std::uint32_t iteration);

struct OrchestratorOptions {
  // A replacement config; its fingerprint must match the run's unless
  // allow_config_change is set, in which case it is persisted.
  std::optional<RunConfig> config;
  bool allow_config_change = false;
  // Injected backends (tests); otherwise built from the config.
  std::optional<BackendSet> backends;
};

class Orchestrator {
 public:
  explicit Orchestrator(std::filesystem::path run_dir, OrchestratorOptions options = {});
  ~Orchestrator();
  Orchestrator(const Orchestrator&) = delete;
  Orchestrator& operator=(const Orchestrator&) = delete;

  const RunConfig& config() const { return config_; }
  const PoolState& pools() const { return pools_; }
  const Progress& progress() const { return progress_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  BackendSet& backends() { return backends_; }
  bool finished() const;
  Phase next_phase() const { return finished() ? Phase::done : progress_.next_phase; }

  // Each phase persists its artifacts and commits a checkpoint that advances
  // the cursor. Calling a phase out of order throws PhaseError.
  std::filesystem::path phase_tune();
  std::vector<AssessmentResult> phase_assess();
  PoolState phase_augment();

  // Runs the next phase. Returns false when the run is already finished.
  bool step();
  // Runs phases until finished or max_phases have executed. Returns the
  // reports of iterations completed during this call.
  std::vector<IterationReport> run(std::optional<std::size_t> max_phases = std::nullopt);

  std::filesystem::path iteration_dir(std::uint32_t iteration) const;

 private:
  void require_phase(Phase phase) const;
  void commit(const PoolState& pools, const Progress& progress);
  void record_timing(const std::string& phase, std::uint64_t ms);

  std::filesystem::path run_dir_;
  RunConfig config_;
  PoolState pools_;
  Progress progress_;
  BackendSet backends_;
  int lock_fd_ = -1;
};

// Read-only report over a run directory.
struct RunSummary {
  std::vector<IterationReport> iterations;

  std::string to_text() const;
  std::string to_csv() const;
  json to_json() const;
};
RunSummary report(const std::filesystem::path& run_dir);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir);
Progress read_progress(const std::filesystem::path& run_dir);
std::vector<AssessmentResult> read_assessments(const std::filesystem::path& path);

}  // namespace mmdistill
