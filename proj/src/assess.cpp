#include "mmdistill/assess.hpp"

#include "mmdistill/util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace mmdistill {
namespace {

constexpr std::string_view kScoresTag = "SCORES:";
constexpr std::string_view kStartA = "[The Start of Assistant A's Answer]\n";
constexpr std::string_view kEndA = "\n[The End of Assistant A's Answer]";
constexpr std::string_view kStartB = "[The Start of Assistant B's Answer]\n";
constexpr std::string_view kEndB = "\n[The End of Assistant B's Answer]";

std::optional<double> parse_number(std::string_view token) {
  double value = 0.0;
  const auto* first = token.data();
  const auto* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

double clamp_score(double v) { return std::clamp(v, 0.0, kMaxScore); }

std::optional<std::string> between(const std::string& text, std::string_view open, std::string_view close) {
  const auto a = text.find(open);
  if (a == std::string::npos) return std::nullopt;
  const auto begin = a + open.size();
  const auto b = text.find(close, begin);
  if (b == std::string::npos) return std::nullopt;
  return text.substr(begin, b - begin);
}

// One judge run; returns nullopt when every draw was unparseable.
std::optional<ScorePair> judge(const InstructionRecord& instruction, const std::string& answer_a,
                               const std::string& answer_b, Backend& assessor, const AssessOptions& options,
                               std::uint32_t sample_base) {
  ChatRequest request;
  request.role = Role::assessor;
  request.image = instruction.image;
  request.messages = build_judge_prompt(instruction.question, answer_a, answer_b);
  request.temperature = options.temperature;
  request.max_output_chars = options.max_output_chars;
  for (std::uint32_t attempt = 0; attempt < options.parse_attempts; ++attempt) {
    request.sample_index = sample_base + attempt;
    const auto response = assessor.complete(request);
    try {
      return parse_scores(response.text);
    } catch (const ParseError&) {
      continue;
    }
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(DifficultyClass c) noexcept {
  return c == DifficultyClass::difficult ? "difficult" : "easy";
}

std::string_view to_string(AssessmentStatus s) noexcept {
  switch (s) {
    case AssessmentStatus::ok: return "ok";
    case AssessmentStatus::skipped_parse_failure: return "skipped_parse_failure";
    case AssessmentStatus::skipped_backend_error: return "skipped_backend_error";
  }
  return "ok";
}

std::vector<Message> build_judge_prompt(const std::string& question, const std::string& answer_a,
                                        const std::string& answer_b) {
  std::string user;
  user += "[Question]\n" + question + "\n\n";
  user += std::string(kStartA) + answer_a + std::string(kEndA) + "\n\n";
  user += std::string(kStartB) + answer_b + std::string(kEndB) + "\n\n";
  user +=
      "[System]\n"
      "We would like your feedback on the performance of two AI assistants answering the user question "
      "about the attached image.\n"
      "Rate the usefulness, relevance, accuracy, and level of detail of each response. Each assistant "
      "receives an overall score on a scale of 0 to 10, where a higher score means better overall "
      "performance.\n"
      "The first line of your output must be exactly \"SCORES: <score for Assistant A> <score for "
      "Assistant B>\", the two numbers separated by a space. After that line, briefly explain your "
      "evaluation. Judge the content only; the order in which the answers are presented must not "
      "influence the scores.";
  return {{Speaker::system, "You are a helpful and precise assistant for checking the quality of answers."},
          {Speaker::user, std::move(user)}};
}

std::optional<std::pair<std::string, std::string>> extract_judged_answers(const std::string& user_text) {
  auto a = between(user_text, kStartA, kEndA);
  auto b = between(user_text, kStartB, kEndB);
  if (!a || !b) return std::nullopt;
  return std::make_pair(std::move(*a), std::move(*b));
}

ScorePair parse_scores(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.substr(0, kScoresTag.size()) != kScoresTag) continue;
    std::istringstream fields{std::string(t.substr(kScoresTag.size()))};
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (tokens.size() != 2) throw ParseError("expected two scores, got: " + std::string(t));
    const auto a = parse_number(tokens[0]);
    const auto b = parse_number(tokens[1]);
    if (!a || !b) throw ParseError("non-numeric score in: " + std::string(t));
    return {clamp_score(*a), clamp_score(*b)};
  }
  throw ParseError("no SCORES line in judge output");
}

double difficulty(double r_s, double r_t) {
  const double top = std::max(r_s, r_t);
  if (top <= 0.0) return 1.0;
  return (std::abs(r_s - r_t) + 1.0) / top;
}

DifficultyClass classify(double s_k, double tau) {
  return s_k >= tau ? DifficultyClass::difficult : DifficultyClass::easy;
}

void finalize_scores(AssessmentResult& result, double tau) {
  result.r_s = (result.order1.first + result.order2.second) / 2.0;
  result.r_t = (result.order1.second + result.order2.first) / 2.0;
  result.s_k = difficulty(result.r_s, result.r_t);
  result.cls = classify(result.s_k, tau);
}

AssessmentResult score_with_swap(const InstructionRecord& instruction, const std::string& student_answer,
                                 const std::string& teacher_answer, Backend& assessor,
                                 const AssessOptions& options) {
  if (trim(student_answer).empty() || trim(teacher_answer).empty()) {
    throw ValidationError("score_with_swap needs non-empty answers");
  }
  AssessmentResult result;
  result.instruction_id = instruction.id;
  result.iteration = options.iteration;
  result.student_answer = student_answer;
  result.teacher_answer = teacher_answer;

  const auto first = judge(instruction, student_answer, teacher_answer, assessor, options, 0);
  const auto second =
      first ? judge(instruction, teacher_answer, student_answer, assessor, options, options.parse_attempts)
            : std::nullopt;
  if (!first || !second) {
    result.status = AssessmentStatus::skipped_parse_failure;
    result.note = first ? "teacher-first judge output unparseable" : "student-first judge output unparseable";
    return result;
  }
  result.order1 = *first;
  result.order2 = *second;
  finalize_scores(result, options.tau);
  return result;
}

void to_json(json& j, const AssessmentResult& r) {
  j = json{{"instruction_id", r.instruction_id},
           {"iteration", r.iteration},
           {"student_answer", r.student_answer},
           {"teacher_answer", r.teacher_answer},
           {"order1", {r.order1.first, r.order1.second}},
           {"order2", {r.order2.first, r.order2.second}},
           {"r_s", r.r_s},
           {"r_t", r.r_t},
           {"s_k", r.s_k},
           {"class", r.cls ? json(to_string(*r.cls)) : json(nullptr)},
           {"status", to_string(r.status)}};
  if (!r.note.empty()) j["note"] = r.note;
}

void from_json(const json& j, AssessmentResult& r) {
  r.instruction_id = j.at("instruction_id").get<std::string>();
  r.iteration = j.at("iteration").get<std::uint32_t>();
  r.student_answer = j.at("student_answer").get<std::string>();
  r.teacher_answer = j.at("teacher_answer").get<std::string>();
  r.order1 = {j.at("order1").at(0).get<double>(), j.at("order1").at(1).get<double>()};
  r.order2 = {j.at("order2").at(0).get<double>(), j.at("order2").at(1).get<double>()};
  r.r_s = j.at("r_s").get<double>();
  r.r_t = j.at("r_t").get<double>();
  r.s_k = j.at("s_k").get<double>();
  const auto& cls = j.at("class");
  if (cls.is_null()) {
    r.cls.reset();
  } else {
    const auto c = cls.get<std::string>();
    if (c == "difficult") r.cls = DifficultyClass::difficult;
    else if (c == "easy") r.cls = DifficultyClass::easy;
    else throw ValidationError("unknown class: " + c);
  }
  const auto status = j.at("status").get<std::string>();
  if (status == "ok") r.status = AssessmentStatus::ok;
  else if (status == "skipped_parse_failure") r.status = AssessmentStatus::skipped_parse_failure;
  else if (status == "skipped_backend_error") r.status = AssessmentStatus::skipped_backend_error;
  else throw ValidationError("unknown status: " + status);
  r.note = j.value("note", "");
}

}  // namespace mmdistill
