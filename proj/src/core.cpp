#include "mmdistill/core.hpp"

#include "mmdistill/error.hpp"
#include "mmdistill/jsonl.hpp"
#include "mmdistill/util.hpp"

#include <set>
#include <sstream>

namespace mmdistill {
namespace {

bool is_lower_hex(std::string_view s) {
  for (char c : s) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

// Removes an "<image>" placeholder and the newline that usually pads it.
std::string strip_image_token(std::string_view value) {
  std::string s(value);
  const auto pos = s.find(kImageToken);
  if (pos == std::string::npos) return s;
  std::size_t begin = pos;
  std::size_t end = pos + kImageToken.size();
  if (end < s.size() && s[end] == '\n') {
    ++end;
  } else if (begin > 0 && s[begin - 1] == '\n') {
    --begin;
  }
  s.erase(begin, end - begin);
  return std::string(trim(s));
}

}  // namespace

std::string_view to_string(TaskType t) noexcept {
  switch (t) {
    case TaskType::conversation: return "conversation";
    case TaskType::detail_description: return "detail_description";
    case TaskType::complex_reasoning: return "complex_reasoning";
    case TaskType::unknown: return "unknown";
  }
  return "unknown";
}

std::string_view to_string(Origin o) noexcept { return o == Origin::seed ? "seed" : "augmented"; }

std::string_view to_string(AnswerSource s) noexcept {
  return s == AnswerSource::teacher ? "teacher" : "student";
}

std::string_view to_string(SpanKind k) noexcept {
  switch (k) {
    case SpanKind::prompt: return "prompt";
    case SpanKind::image_token: return "image_token";
    case SpanKind::question: return "question";
    case SpanKind::answer: return "answer";
    case SpanKind::stop: return "stop";
  }
  return "prompt";
}

std::string_view to_string(ImagePosition p) noexcept {
  switch (p) {
    case ImagePosition::before_question: return "before_question";
    case ImagePosition::after_question: return "after_question";
    case ImagePosition::randomized: return "randomized";
  }
  return "randomized";
}

TaskType task_type_from_string(std::string_view s) {
  if (s == "conversation") return TaskType::conversation;
  if (s == "detail_description" || s == "detail") return TaskType::detail_description;
  if (s == "complex_reasoning" || s == "complex") return TaskType::complex_reasoning;
  if (s == "unknown") return TaskType::unknown;
  throw ValidationError("unknown task_type: " + std::string(s));
}

Origin origin_from_string(std::string_view s) {
  if (s == "seed") return Origin::seed;
  if (s == "augmented") return Origin::augmented;
  throw ValidationError("unknown origin: " + std::string(s));
}

ImagePosition image_position_from_string(std::string_view s) {
  if (s == "before_question") return ImagePosition::before_question;
  if (s == "after_question") return ImagePosition::after_question;
  if (s == "randomized") return ImagePosition::randomized;
  throw ValidationError("unknown image position policy: " + std::string(s));
}

void ImageRef::validate() const {
  if (uri.empty()) throw ValidationError("image uri is empty");
  if (content_hash) {
    if (content_hash->size() % 2 != 0 || !is_lower_hex(*content_hash)) {
      throw ValidationError("image content_hash must be lowercase hex of even length");
    }
  }
}

void InstructionRecord::validate() const {
  if (id.empty()) throw ValidationError("instruction id is empty");
  image.validate();
  if (trim(question).empty()) throw ValidationError("instruction " + id + ": empty question");
  if ((origin == Origin::augmented) != parent_id.has_value()) {
    throw ValidationError("instruction " + id + ": parent_id must be present iff origin=augmented");
  }
  if ((iteration == 0) != (origin == Origin::seed)) {
    throw ValidationError("instruction " + id + ": iteration 0 iff origin=seed");
  }
}

void AnswerRecord::validate() const {
  if (trim(text).empty()) throw ValidationError("answer for " + instruction_id + " is empty");
  if (!(temperature >= 0.0 && temperature <= 2.0)) {
    throw ValidationError("temperature out of [0,2]");
  }
}

void ConversationSample::validate() const {
  if (id.empty()) throw ValidationError("sample id is empty");
  image.validate();
  if (turns.empty()) throw ValidationError("sample " + id + " has no turns");
  for (const auto& t : turns) {
    if (t.question.empty() || t.answer.empty()) {
      throw ValidationError("sample " + id + " has an empty question or answer");
    }
  }
}

std::vector<Span> RenderedSequence::loss_mask() const {
  std::vector<Span> out;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].kind == SpanKind::answer) {
      out.push_back(spans[i]);
    } else if (spans[i].kind == SpanKind::stop && i > 0 && spans[i - 1].kind == SpanKind::answer) {
      out.push_back(spans[i]);
    }
  }
  return out;
}

std::string RenderedSequence::masked_text() const {
  std::string out;
  for (const auto& s : loss_mask()) out += slice(s);
  return out;
}

void RenderedSequence::validate() const {
  std::size_t pos = 0;
  std::size_t image_tokens_turn1 = 0;
  bool in_first_turn = true;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.start != pos || s.end < s.start) throw ValidationError("spans are not contiguous");
    pos = s.end;
    if (s.kind == SpanKind::image_token) {
      if (!in_first_turn) throw ValidationError("image token outside the first turn");
      ++image_tokens_turn1;
    }
    if (s.kind == SpanKind::answer) {
      in_first_turn = false;
      if (i + 1 >= spans.size() || spans[i + 1].kind != SpanKind::stop) {
        throw ValidationError("answer span not followed by a stop span");
      }
    }
  }
  if (pos != text.size()) throw ValidationError("spans do not cover the text");
  if (image_tokens_turn1 != 1) throw ValidationError("first turn must contain exactly one image token");
}

std::vector<InstructionRecord> to_single_turn(const std::vector<ConversationSample>& dataset) {
  std::vector<InstructionRecord> out;
  for (const auto& sample : dataset) {
    for (std::size_t t = 0; t < sample.turns.size(); ++t) {
      InstructionRecord rec;
      const auto turn_index = std::to_string(t);
      rec.id = content_id("q", {sample.id, turn_index});
      rec.image = sample.image;
      rec.question = sample.turns[t].question;
      rec.task_type = sample.task_type;
      rec.origin = Origin::seed;
      rec.iteration = 0;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

bool image_first(const ConversationSample& sample, const RenderOptions& options) {
  switch (options.image_position) {
    case ImagePosition::before_question: return true;
    case ImagePosition::after_question: return false;
    case ImagePosition::randomized: break;
  }
  Rng rng(derive_seed(options.rng_seed, sample.id));
  return rng.coin();
}

RenderedSequence render_conversation(const ConversationSample& sample, const RenderOptions& options) {
  if (options.stop_token.empty()) throw ValidationError("stop token must be non-empty");
  sample.validate();
  for (const auto& t : sample.turns) {
    if (t.question.find(options.stop_token) != std::string::npos ||
        t.answer.find(options.stop_token) != std::string::npos) {
      throw ValidationError("sample " + sample.id + ": stop token occurs inside turn text");
    }
  }

  RenderedSequence seq;
  auto append = [&seq](std::string_view piece, SpanKind kind) {
    if (piece.empty()) return;
    const std::size_t start = seq.text.size();
    seq.text += piece;
    seq.spans.push_back({start, seq.text.size(), kind});
  };

  const bool image_before = image_first(sample, options);
  append(options.system_prompt, SpanKind::prompt);
  for (std::size_t t = 0; t < sample.turns.size(); ++t) {
    const auto& turn = sample.turns[t];
    if (t == 0 && image_before) append(kImageToken, SpanKind::image_token);
    append(turn.question, SpanKind::question);
    if (t == 0 && !image_before) append(kImageToken, SpanKind::image_token);
    append(options.stop_token, SpanKind::stop);
    append(turn.answer, SpanKind::answer);
    append(options.stop_token, SpanKind::stop);
  }
  return seq;
}

std::vector<InstructionRecord> parse_records(const std::string& text, const std::string& source) {
  auto records = jsonl::parse<InstructionRecord>(text, source);
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw DuplicateIdError(r.id);
  }
  return records;
}

std::vector<InstructionRecord> read_records(const std::filesystem::path& path) {
  return parse_records(read_file(path), path.string());
}

void write_records(const std::vector<InstructionRecord>& records, const std::filesystem::path& path) {
  jsonl::write(records, path);
}

std::vector<InstructionRecord> load_seed_dataset(const std::filesystem::path& path) {
  const auto text = read_file(path);
  std::vector<InstructionRecord> out;
  std::vector<ConversationSample> samples;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto v = json::parse(line);
      if (v.contains("conversations")) {
        auto s = v.get<ConversationSample>();
        s.validate();
        samples.push_back(std::move(s));
      } else {
        out.push_back(v.get<InstructionRecord>());
      }
    } catch (const std::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    if (!samples.empty() && !out.empty()) {
      throw ParseError(path.string(), lineno, "mixes conversation samples and instruction records");
    }
  }
  if (!samples.empty()) out = to_single_turn(samples);
  std::set<std::string> seen;
  for (const auto& r : out) {
    if (!seen.insert(r.id).second) throw DuplicateIdError(r.id);
  }
  return out;
}

void to_json(json& j, const ImageRef& v) {
  j = json{{"uri", v.uri}};
  if (v.content_hash) j["content_hash"] = *v.content_hash;
}

void from_json(const json& j, ImageRef& v) {
  if (j.is_string()) {
    v.uri = j.get<std::string>();
    v.content_hash.reset();
  } else {
    v.uri = j.at("uri").get<std::string>();
    if (j.contains("content_hash") && !j.at("content_hash").is_null()) {
      v.content_hash = j.at("content_hash").get<std::string>();
    } else {
      v.content_hash.reset();
    }
  }
  v.validate();
}

void to_json(json& j, const InstructionRecord& v) {
  j = json{{"id", v.id},
           {"image", v.image},
           {"question", v.question},
           {"task_type", to_string(v.task_type)},
           {"origin", to_string(v.origin)},
           {"iteration", v.iteration}};
  if (v.parent_id) j["parent_id"] = *v.parent_id;
}

void from_json(const json& j, InstructionRecord& v) {
  v.id = j.at("id").get<std::string>();
  v.image = j.at("image").get<ImageRef>();
  v.question = j.at("question").get<std::string>();
  v.task_type = j.contains("task_type") ? task_type_from_string(j.at("task_type").get<std::string>())
                                        : TaskType::unknown;
  v.origin = j.contains("origin") ? origin_from_string(j.at("origin").get<std::string>()) : Origin::seed;
  if (j.contains("parent_id") && !j.at("parent_id").is_null()) {
    v.parent_id = j.at("parent_id").get<std::string>();
  } else {
    v.parent_id.reset();
  }
  v.iteration = j.value("iteration", 0u);
  v.validate();
}

void to_json(json& j, const AnswerRecord& v) {
  j = json{{"instruction_id", v.instruction_id},
           {"source", to_string(v.source)},
           {"text", v.text},
           {"temperature", v.temperature}};
}

void from_json(const json& j, AnswerRecord& v) {
  v.instruction_id = j.at("instruction_id").get<std::string>();
  const auto source = j.at("source").get<std::string>();
  if (source == "teacher") {
    v.source = AnswerSource::teacher;
  } else if (source == "student") {
    v.source = AnswerSource::student;
  } else {
    throw ValidationError("unknown answer source: " + source);
  }
  v.text = j.at("text").get<std::string>();
  v.temperature = j.at("temperature").get<double>();
  v.validate();
}

void to_json(json& j, const ConversationSample& v) {
  json conversations = json::array();
  for (const auto& t : v.turns) {
    conversations.push_back({{"from", "human"}, {"value", t.question}});
    conversations.push_back({{"from", "gpt"}, {"value", t.answer}});
  }
  j = json{{"id", v.id}, {"conversations", std::move(conversations)}};
  if (v.image.content_hash) {
    j["image"] = v.image;
  } else {
    j["image"] = v.image.uri;
  }
  if (v.task_type != TaskType::unknown) j["task_type"] = to_string(v.task_type);
}

void from_json(const json& j, ConversationSample& v) {
  v.id = j.at("id").get<std::string>();
  v.image = j.at("image").get<ImageRef>();
  v.task_type = j.contains("task_type") ? task_type_from_string(j.at("task_type").get<std::string>())
                                        : TaskType::unknown;
  v.turns.clear();
  const auto& conv = j.at("conversations");
  if (!conv.is_array() || conv.size() % 2 != 0) {
    throw ValidationError("conversations must alternate human/gpt turns");
  }
  for (std::size_t i = 0; i < conv.size(); i += 2) {
    if (conv[i].at("from") != "human" || conv[i + 1].at("from") != "gpt") {
      throw ValidationError("conversations must alternate human/gpt turns");
    }
    v.turns.push_back({strip_image_token(conv[i].at("value").get<std::string>()),
                       conv[i + 1].at("value").get<std::string>()});
  }
}

void to_json(json& j, const Span& v) {
  j = json{{"start", v.start}, {"end", v.end}, {"kind", to_string(v.kind)}};
}

void from_json(const json& j, Span& v) {
  v.start = j.at("start").get<std::size_t>();
  v.end = j.at("end").get<std::size_t>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "prompt") v.kind = SpanKind::prompt;
  else if (kind == "image_token") v.kind = SpanKind::image_token;
  else if (kind == "question") v.kind = SpanKind::question;
  else if (kind == "answer") v.kind = SpanKind::answer;
  else if (kind == "stop") v.kind = SpanKind::stop;
  else throw ValidationError("unknown span kind: " + kind);
}

}  // namespace mmdistill
