#pragma once

// Instruction augmentation: equal easy/difficult sampling, augmentor
// prompting, and the ROUGE-L novelty gate.

#include "mmdistill/assess.hpp"
#include "mmdistill/backends.hpp"
#include "mmdistill/core.hpp"
#include "mmdistill/pools.hpp"
#include "mmdistill/textmetrics.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mmdistill {

inline constexpr double kDefaultRougeThreshold = 0.7;
inline constexpr std::size_t kMaxCandidateChars = 2048;

enum class RejectReason { duplicate, empty, oversize, backend_error };
std::string_view to_string(RejectReason r) noexcept;

// Which existing instructions count as peers for the novelty gate. Siblings
// accepted earlier in the same batch always count.
enum class GateScope { cache_and_siblings, tuning_and_siblings, siblings_only };
std::string_view to_string(GateScope s) noexcept;
GateScope gate_scope_from_string(std::string_view s);

struct AugmentationBatch {
  std::vector<InstructionRecord> difficult;
  std::vector<InstructionRecord> easy_sampled;
  std::vector<InstructionRecord> accepted;
  std::map<RejectReason, std::size_t> rejected_count_by_reason;
  std::size_t generated = 0;  // generation calls that returned text

  std::size_t rejected_total() const;
};

json to_summary_json(const AugmentationBatch& batch);

// Uniform sample without replacement of min(n_difficult, |easy|) records,
// returned sorted by id.
std::vector<InstructionRecord> sample_easy(const std::vector<InstructionRecord>& easy, std::size_t n_difficult,
                                           std::uint64_t rng_seed);

std::vector<Message> build_augment_prompt(const InstructionRecord& instruction, DifficultyClass cls);

struct AugmentPromptFields {
  std::string question;
  TaskType task_type = TaskType::unknown;
  DifficultyClass cls = DifficultyClass::difficult;
};
// Inverse of build_augment_prompt for synthetic augmentors.
std::optional<AugmentPromptFields> extract_augment_prompt(const std::string& user_text);

struct GateDecision {
  bool accepted = false;
  std::optional<RejectReason> reason;
  double max_rouge = 0.0;
};

// Accepts iff max ROUGE-L against every peer is below threshold.
GateDecision novelty_gate(const std::string& candidate_text, const std::vector<TokenSeq>& peers, double threshold);
GateDecision novelty_gate(const std::string& candidate_text, const std::vector<InstructionRecord>& peers,
                          double threshold);

struct AugmentOptions {
  std::uint64_t rng_seed = 0;
  double threshold = kDefaultRougeThreshold;
  double temperature = 0.5;
  std::uint32_t iteration = 0;  // current pool iteration; accepted records get iteration + 1
  std::size_t max_in_flight = 1;
  std::uint32_t retries_on_rejection = 0;
  std::size_t max_candidate_chars = kMaxCandidateChars;
  std::size_t max_output_chars = 4096;
  GateScope gate_scope = GateScope::cache_and_siblings;
};

// One generation per source (all difficult + sampled easy), gated in
// sorted-id order against same-image peers.
AugmentationBatch augment_iteration(const std::vector<InstructionRecord>& difficult,
                                    const std::vector<InstructionRecord>& easy, Backend& augmentor,
                                    const PoolState& pools, const AugmentOptions& options);

// Content-addressed id for a generated instruction.
std::string augmented_id(const std::string& parent_id, std::uint32_t iteration, std::uint32_t draw);

}  // namespace mmdistill
