#include "mmdistill/augment.hpp"

#include "mmdistill/util.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>

namespace mmdistill {
namespace {

constexpr std::string_view kOpenQuestion = "[Original Question]\n";
constexpr std::string_view kCloseQuestion = "\n[End of Original Question]";
constexpr std::string_view kTaskLine = "Task type: ";
constexpr std::string_view kDifficultyLine = "Difficulty: ";

std::string_view task_directive(TaskType t) {
  switch (t) {
    case TaskType::conversation: return "be a conversational question about the visual content, like the original";
    case TaskType::detail_description: return "ask for a detailed description of the image, like the original";
    case TaskType::complex_reasoning: return "require complex reasoning about the image, like the original";
    case TaskType::unknown: break;
  }
  return "be the same kind of question as the original";
}

std::string_view difficulty_descriptor(DifficultyClass c) {
  return c == DifficultyClass::difficult
             ? "at least as challenging as the original, a question of significant difficulty"
             : "of comparable difficulty to the original";
}

std::optional<std::string> line_value(const std::string& text, std::string_view key) {
  const auto pos = text.find(key);
  if (pos == std::string::npos) return std::nullopt;
  const auto begin = pos + key.size();
  const auto end = text.find('\n', begin);
  return text.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
}

struct Source {
  const InstructionRecord* record;
  DifficultyClass cls;
};

}  // namespace

std::string_view to_string(RejectReason r) noexcept {
  switch (r) {
    case RejectReason::duplicate: return "duplicate";
    case RejectReason::empty: return "empty";
    case RejectReason::oversize: return "oversize";
    case RejectReason::backend_error: return "backend_error";
  }
  return "duplicate";
}

std::string_view to_string(GateScope s) noexcept {
  switch (s) {
    case GateScope::cache_and_siblings: return "cache_and_siblings";
    case GateScope::tuning_and_siblings: return "tuning_and_siblings";
    case GateScope::siblings_only: return "siblings_only";
  }
  return "cache_and_siblings";
}

GateScope gate_scope_from_string(std::string_view s) {
  if (s == "cache_and_siblings") return GateScope::cache_and_siblings;
  if (s == "tuning_and_siblings") return GateScope::tuning_and_siblings;
  if (s == "siblings_only") return GateScope::siblings_only;
  throw ValidationError("unknown gate scope: " + std::string(s));
}

std::size_t AugmentationBatch::rejected_total() const {
  std::size_t n = 0;
  for (const auto& [_, c] : rejected_count_by_reason) n += c;
  return n;
}

json to_summary_json(const AugmentationBatch& batch) {
  json rejected = json::object();
  for (RejectReason r : {RejectReason::duplicate, RejectReason::empty, RejectReason::oversize,
                         RejectReason::backend_error}) {
    const auto it = batch.rejected_count_by_reason.find(r);
    rejected[std::string(to_string(r))] = it == batch.rejected_count_by_reason.end() ? 0 : it->second;
  }
  json accepted_ids = json::array();
  for (const auto& rec : batch.accepted) accepted_ids.push_back(rec.id);
  json difficult_ids = json::array();
  for (const auto& rec : batch.difficult) difficult_ids.push_back(rec.id);
  json easy_ids = json::array();
  for (const auto& rec : batch.easy_sampled) easy_ids.push_back(rec.id);
  return json{{"difficult", batch.difficult.size()},
              {"easy_sampled", batch.easy_sampled.size()},
              {"generated", batch.generated},
              {"accepted", batch.accepted.size()},
              {"rejected_by_reason", std::move(rejected)},
              {"accepted_ids", std::move(accepted_ids)},
              {"difficult_ids", std::move(difficult_ids)},
              {"easy_sampled_ids", std::move(easy_ids)}};
}

std::vector<InstructionRecord> sample_easy(const std::vector<InstructionRecord>& easy, std::size_t n_difficult,
                                           std::uint64_t rng_seed) {
  std::vector<InstructionRecord> pool = easy;
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  const std::size_t k = std::min(n_difficult, pool.size());
  // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
  Rng rng(rng_seed);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return pool;
}

std::vector<Message> build_augment_prompt(const InstructionRecord& instruction, DifficultyClass cls) {
  std::string user;
  user += std::string(kOpenQuestion) + instruction.question + std::string(kCloseQuestion) + "\n\n";
  user += std::string(kTaskLine) + std::string(to_string(instruction.task_type)) + "\n";
  user += std::string(kDifficultyLine) + std::string(to_string(cls)) + "\n\n";
  user += "Write one NEW question about the same image. The new question must ";
  user += task_directive(instruction.task_type);
  user += ", must differ in content from the original question, and should be ";
  user += difficulty_descriptor(cls);
  user += ". It must be answerable from the image. Respond with the new question only, without any "
          "preamble, numbering or quotation marks.";
  return {{Speaker::system, "You write new instructions about images for training a vision-language assistant."},
          {Speaker::user, std::move(user)}};
}

std::optional<AugmentPromptFields> extract_augment_prompt(const std::string& user_text) {
  const auto open = user_text.find(kOpenQuestion);
  if (open == std::string::npos) return std::nullopt;
  const auto begin = open + kOpenQuestion.size();
  const auto close = user_text.find(kCloseQuestion, begin);
  if (close == std::string::npos) return std::nullopt;
  AugmentPromptFields fields;
  fields.question = user_text.substr(begin, close - begin);
  const auto rest = user_text.substr(close);
  if (auto task = line_value(rest, kTaskLine)) fields.task_type = task_type_from_string(*task);
  if (auto diff = line_value(rest, kDifficultyLine)) {
    fields.cls = *diff == "easy" ? DifficultyClass::easy : DifficultyClass::difficult;
  }
  return fields;
}

GateDecision novelty_gate(const std::string& candidate_text, const std::vector<TokenSeq>& peers, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("gate threshold must be in (0, 1]");
  GateDecision d;
  const auto candidate = tokenize(candidate_text);
  if (candidate.empty()) {
    d.reason = RejectReason::empty;
    return d;
  }
  for (const auto& peer : peers) {
    d.max_rouge = std::max(d.max_rouge, rouge_l(candidate, peer));
    if (d.max_rouge >= threshold) {
      d.reason = RejectReason::duplicate;
      return d;
    }
  }
  d.accepted = true;
  return d;
}

GateDecision novelty_gate(const std::string& candidate_text, const std::vector<InstructionRecord>& peers,
                          double threshold) {
  std::vector<TokenSeq> tokens;
  tokens.reserve(peers.size());
  for (const auto& p : peers) tokens.push_back(tokenize(p.question));
  return novelty_gate(candidate_text, tokens, threshold);
}

std::string augmented_id(const std::string& parent_id, std::uint32_t iteration, std::uint32_t draw) {
  const auto it = std::to_string(iteration);
  const auto dr = std::to_string(draw);
  return content_id("aug", {parent_id, it, dr});
}

AugmentationBatch augment_iteration(const std::vector<InstructionRecord>& difficult,
                                    const std::vector<InstructionRecord>& easy, Backend& augmentor,
                                    const PoolState& pools, const AugmentOptions& options) {
  AugmentationBatch batch;
  batch.difficult = difficult;
  std::sort(batch.difficult.begin(), batch.difficult.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  batch.easy_sampled = sample_easy(easy, difficult.size(), derive_seed(options.rng_seed, "easy-sample"));

  std::vector<Source> sources;
  for (const auto& r : batch.difficult) sources.push_back({&r, DifficultyClass::difficult});
  for (const auto& r : batch.easy_sampled) sources.push_back({&r, DifficultyClass::easy});
  std::sort(sources.begin(), sources.end(), [](const Source& a, const Source& b) { return a.record->id < b.record->id; });

  auto make_request = [&](const Source& s, std::uint32_t draw) {
    ChatRequest req;
    req.role = Role::augmentor;
    req.image = s.record->image;
    req.messages = build_augment_prompt(*s.record, s.cls);
    req.temperature = options.temperature;
    req.max_output_chars = options.max_output_chars;
    req.sample_index = draw;
    return req;
  };

  std::vector<ChatRequest> first_round;
  first_round.reserve(sources.size());
  for (const auto& s : sources) first_round.push_back(make_request(s, 0));
  const auto responses = complete_batch(augmentor, first_round, options.max_in_flight);

  // Peer token sets per image, built lazily from the configured pool.
  std::map<std::string, std::vector<TokenSeq>> peers;
  const RecordMap* scope = nullptr;
  if (options.gate_scope == GateScope::cache_and_siblings) scope = &pools.cache;
  if (options.gate_scope == GateScope::tuning_and_siblings) scope = &pools.tuning;
  auto peers_for = [&](const std::string& uri) -> std::vector<TokenSeq>& {
    auto [it, inserted] = peers.try_emplace(uri);
    if (inserted && scope != nullptr) {
      for (const auto& [_, rec] : *scope) {
        if (rec.image.uri == uri) it->second.push_back(tokenize(rec.question));
      }
    }
    return it->second;
  };
  auto reject = [&](RejectReason r) { ++batch.rejected_count_by_reason[r]; };

  const std::uint32_t next_iteration = options.iteration + 1;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& src = *sources[i].record;
    std::optional<BackendResponse> response = responses[i].response;
    for (std::uint32_t draw = 0;; ++draw) {
      if (draw > 0) {
        try {
          response = augmentor.complete(make_request(sources[i], draw));
        } catch (const std::exception& e) {
          spdlog::warn("augmentor failed for {}: {}", src.id, e.what());
          response.reset();
        }
      } else if (!response) {
        spdlog::warn("augmentor failed for {}: {}", src.id, responses[i].error_message);
      }
      if (!response) {
        reject(RejectReason::backend_error);
        break;
      }
      ++batch.generated;
      const std::string candidate(trim(response->text));
      GateDecision decision;
      if (candidate.size() > options.max_candidate_chars) {
        decision.reason = RejectReason::oversize;
      } else {
        decision = novelty_gate(candidate, peers_for(src.image.uri), options.threshold);
      }
      if (decision.accepted) {
        InstructionRecord rec;
        rec.id = augmented_id(src.id, next_iteration, draw);
        rec.image = src.image;
        rec.question = candidate;
        rec.task_type = src.task_type;
        rec.origin = Origin::augmented;
        rec.parent_id = src.id;
        rec.iteration = next_iteration;
        peers_for(src.image.uri).push_back(tokenize(candidate));
        batch.accepted.push_back(std::move(rec));
        break;
      }
      reject(*decision.reason);
      if (draw >= options.retries_on_rejection) break;
    }
  }
  return batch;
}

}  // namespace mmdistill
