#pragma once

// Deterministic scripted agents for offline runs. Every answer embeds the
// quality it was generated at ("[quality=0.550]"), so the synthetic judge
// scores answers without any language understanding.
//
// Quality model, per topic t and question q:
//   teacher: clamp(teacher_quality[t] + teacher_spread * (0.5 - h(q)))
//   student: clamp(student_quality[t] + student_spread * (0.5 - h(q)))
// where h(q) in [0,1) is a hash of the question text (its intrinsic hardness
// draw). The judge scores an answer as 10 * quality, independent of where it
// is shown, plus position_bias for whichever answer is shown first.

#include "mmdistill/backends.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace mmdistill {

struct TopicSpec {
  std::string name;
  std::vector<std::string> keywords;  // lowercase single tokens
  double teacher_quality = 0.9;
  double student_quality = 0.3;
  std::vector<std::string> templates;  // question templates with {obj} and {place}
  std::vector<std::string> objects;
  std::vector<std::string> places;
  TaskType task_type = TaskType::conversation;
};

struct Scenario {
  std::string name = "custom";
  std::uint64_t seed = 0;
  std::vector<TopicSpec> topics;
  std::string fallback_topic = "general";
  double fallback_teacher_quality = 0.8;
  double fallback_student_quality = 0.4;

  double teacher_spread = 0.0;
  double student_spread = 0.2;
  double learning_rate = 0.5;
  // Topic count in an export at which coverage saturates to 1.
  double coverage_saturation = 1.0;

  double judge_position_bias = 0.0;
  double judge_unparseable_rate = 0.0;
  double judge_default_quality = 0.5;

  double augment_near_duplicate_rate = 0.0;
  bool augment_echo = false;

  // Exact-question lookup tables of canned answers per role.
  std::map<std::string, std::map<std::string, std::string>> script;

  // Generated seed dataset for `simulate`.
  std::size_t dataset_images = 0;
  std::size_t dataset_questions_per_image = 0;

  // Run parameters the scenario recommends to `simulate`.
  json run_overrides = json::object();

  const TopicSpec* find_topic(const std::string& name) const;
};

Scenario scenario_from_json(const json& j);
json scenario_to_json(const Scenario& s);
Scenario load_scenario(const std::string& path_or_builtin);

// The shipped default scenario: learning student, fixed teacher, symmetric
// judge, templated augmentor.
Scenario default_scenario();

// Topic of a question: the first topic with a keyword among its tokens, else
// the fallback topic.
std::string topic_of(const Scenario& scenario, const std::string& question);

// Seed conversations generated from the scenario's topic templates.
std::vector<ConversationSample> generate_seed_dataset(const Scenario& scenario);

// Mutable state shared by the four synthetic agents of one scenario.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(Scenario scenario);

  const Scenario& scenario() const { return scenario_; }
  double student_quality(const std::string& topic) const;
  double teacher_quality(const std::string& topic) const;

  // q' = min(q_T, q + lr * c * (q_T - q)) per covered topic, with c the
  // topic's export coverage min(1, n_t / coverage_saturation).
  void apply_training(const std::vector<ConversationSample>& export_samples, double learning_rate);

  json save_state() const;
  void load_state(const json& state);

 private:
  friend class SyntheticAgent;
  Scenario scenario_;
  mutable std::mutex mu_;
  std::map<std::string, double> student_;
};

class SyntheticAgent : public Backend {
 public:
  SyntheticAgent(Role role, std::shared_ptr<SyntheticWorld> world);

  std::string describe() const override;
  json save_state() const override;
  void load_state(const json& state) override;

  Role role() const { return role_; }
  SyntheticWorld& world() { return *world_; }

 protected:
  BackendResponse do_complete(const ChatRequest& request) override;

 private:
  std::string answer(const ChatRequest& request) const;
  std::string judge(const ChatRequest& request) const;
  std::string augment(const ChatRequest& request) const;

  Role role_;
  std::shared_ptr<SyntheticWorld> world_;
};

// Synthetic agents for all four roles sharing one world.
BackendSet make_synthetic_backends(std::shared_ptr<SyntheticWorld> world);

// Applies a training export to a synthetic student. Throws ValidationError
// for any other backend.
void synthetic_student_update(Backend& student, const std::vector<ConversationSample>& training_export,
                              double learning_rate);

// Quality embedded in a synthetic answer, if any.
std::optional<double> embedded_quality(const std::string& answer);

}  // namespace mmdistill
