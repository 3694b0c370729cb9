#pragma once

// Judge-based difficulty assessment: prompt construction, strict score
// parsing, position-swapped scoring and the difficulty score.

#include "mmdistill/backends.hpp"
#include "mmdistill/core.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mmdistill {

inline constexpr double kDefaultTau = 0.33;
inline constexpr double kMaxScore = 10.0;
inline constexpr std::uint32_t kDefaultParseAttempts = 3;

// Scores for the answers shown as Assistant A (first) and B (second).
struct ScorePair {
  double first = 0.0;
  double second = 0.0;
  friend bool operator==(const ScorePair&, const ScorePair&) = default;
};

enum class DifficultyClass { difficult, easy };
enum class AssessmentStatus { ok, skipped_parse_failure, skipped_backend_error };
std::string_view to_string(DifficultyClass c) noexcept;
std::string_view to_string(AssessmentStatus s) noexcept;

struct AssessmentResult {
  std::string instruction_id;
  std::uint32_t iteration = 0;
  std::string student_answer;
  std::string teacher_answer;
  ScorePair order1;  // student shown first
  ScorePair order2;  // teacher shown first
  double r_s = 0.0;
  double r_t = 0.0;
  double s_k = 0.0;
  std::optional<DifficultyClass> cls;  // absent for skipped results
  AssessmentStatus status = AssessmentStatus::ok;
  std::string note;

  bool ok() const noexcept { return status == AssessmentStatus::ok; }
};

void to_json(json& j, const AssessmentResult& r);
void from_json(const json& j, AssessmentResult& r);

// System + user messages asking for 0-10 scores for both assistants, first
// line "SCORES: <a> <b>".
std::vector<Message> build_judge_prompt(const std::string& question, const std::string& answer_a,
                                        const std::string& answer_b);

// Recovers (question, answer A, answer B) from a judge user message built by
// build_judge_prompt. Used by synthetic judges.
std::optional<std::pair<std::string, std::string>> extract_judged_answers(const std::string& user_text);

// Parses the first "SCORES: x y" line; values clamped into [0, 10].
// Throws ParseError when no such line exists or its values are not numbers.
ScorePair parse_scores(const std::string& text);

// (|r_s - r_t| + 1) / max(r_s, r_t); 1.0 when both are zero. Not clamped.
double difficulty(double r_s, double r_t);

DifficultyClass classify(double s_k, double tau);

struct AssessOptions {
  double tau = kDefaultTau;
  double temperature = 0.5;
  std::uint32_t parse_attempts = kDefaultParseAttempts;
  std::size_t max_output_chars = 2048;
  std::uint32_t iteration = 0;
};

// Judges the pair twice (student first, then teacher first) and averages the
// per-model scores. Unparseable judge output after parse_attempts draws marks
// the result skipped_parse_failure. Backend errors propagate.
AssessmentResult score_with_swap(const InstructionRecord& instruction, const std::string& student_answer,
                                 const std::string& teacher_answer, Backend& assessor,
                                 const AssessOptions& options = {});

// Fills r_s, r_t, s_k and cls from order1/order2.
void finalize_scores(AssessmentResult& result, double tau);

}  // namespace mmdistill
