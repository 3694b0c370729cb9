#pragma once

// Domain types shared by every stage of the distillation loop, plus the
// serialized training-sample format and its answer-only loss mask.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmdistill {

using json = nlohmann::json;

inline constexpr std::string_view kDefaultStopToken = "###";
inline constexpr std::string_view kImageToken = "<image>";

struct ImageRef {
  std::string uri;
  std::optional<std::string> content_hash;  // lowercase hex, even length

  void validate() const;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

enum class TaskType { conversation, detail_description, complex_reasoning, unknown };
enum class Origin { seed, augmented };

std::string_view to_string(TaskType t) noexcept;
std::string_view to_string(Origin o) noexcept;
TaskType task_type_from_string(std::string_view s);
Origin origin_from_string(std::string_view s);

struct InstructionRecord {
  std::string id;
  ImageRef image;
  std::string question;
  TaskType task_type = TaskType::unknown;
  Origin origin = Origin::seed;
  std::optional<std::string> parent_id;
  std::uint32_t iteration = 0;

  void validate() const;
  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

enum class AnswerSource { teacher, student };
std::string_view to_string(AnswerSource s) noexcept;

struct AnswerRecord {
  std::string instruction_id;
  AnswerSource source = AnswerSource::teacher;
  std::string text;
  double temperature = 0.5;

  void validate() const;
  friend bool operator==(const AnswerRecord&, const AnswerRecord&) = default;
};

struct Turn {
  std::string question;
  std::string answer;
  friend bool operator==(const Turn&, const Turn&) = default;
};

// One image with M >= 1 question/answer turns. task_type is optional
// metadata carried through to the single-turn records.
struct ConversationSample {
  std::string id;
  ImageRef image;
  std::vector<Turn> turns;
  TaskType task_type = TaskType::unknown;

  void validate() const;
  friend bool operator==(const ConversationSample&, const ConversationSample&) = default;
};

enum class SpanKind { prompt, image_token, question, answer, stop };
std::string_view to_string(SpanKind k) noexcept;

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  SpanKind kind = SpanKind::prompt;

  std::size_t size() const noexcept { return end - start; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct RenderedSequence {
  std::string text;
  std::vector<Span> spans;

  // Answer spans plus the stop spans that immediately follow them.
  std::vector<Span> loss_mask() const;
  // Concatenation of the loss-mask regions of text.
  std::string masked_text() const;
  std::string_view slice(const Span& s) const { return std::string_view(text).substr(s.start, s.size()); }

  // Checks contiguity, exact coverage, answer->stop pairing and the single
  // image token in the first turn. Throws ValidationError.
  void validate() const;
};

enum class ImagePosition { before_question, after_question, randomized };
std::string_view to_string(ImagePosition p) noexcept;
ImagePosition image_position_from_string(std::string_view s);

struct RenderOptions {
  std::string system_prompt;
  std::string stop_token = std::string(kDefaultStopToken);
  ImagePosition image_position = ImagePosition::randomized;
  std::uint64_t rng_seed = 0;
};

// Expands every turn into its own seed instruction, dropping answers.
std::vector<InstructionRecord> to_single_turn(const std::vector<ConversationSample>& dataset);

// Turn 1 is [prompt, image, question] or [prompt, question, image]; later
// turns carry only the question. Every question and answer is followed by the
// stop token. No separators are inserted: spans tile the text exactly.
RenderedSequence render_conversation(const ConversationSample& sample, const RenderOptions& options);

// Whether turn 1 puts the image before the question for this sample.
bool image_first(const ConversationSample& sample, const RenderOptions& options);

// Instruction records as line-delimited JSON. Reading rejects duplicate ids.
std::vector<InstructionRecord> read_records(const std::filesystem::path& path);
std::vector<InstructionRecord> parse_records(const std::string& text, const std::string& source = "<memory>");
void write_records(const std::vector<InstructionRecord>& records, const std::filesystem::path& path);

// Seed dataset loader: accepts conversation-sample lines (with a
// "conversations" array) or instruction-record lines, expanding the former.
std::vector<InstructionRecord> load_seed_dataset(const std::filesystem::path& path);

void to_json(json& j, const ImageRef& v);
void from_json(const json& j, ImageRef& v);
void to_json(json& j, const InstructionRecord& v);
void from_json(const json& j, InstructionRecord& v);
void to_json(json& j, const AnswerRecord& v);
void from_json(const json& j, AnswerRecord& v);
// Export schema: {id, image, conversations:[{from:"human"|"gpt", value}]}.
void to_json(json& j, const ConversationSample& v);
void from_json(const json& j, ConversationSample& v);
void to_json(json& j, const Span& v);
void from_json(const json& j, Span& v);

}  // namespace mmdistill
