#include "mmdistill/synthetic.hpp"

#include "mmdistill/assess.hpp"
#include "mmdistill/augment.hpp"
#include "mmdistill/textmetrics.hpp"
#include "mmdistill/util.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

namespace mmdistill {
namespace {

constexpr std::string_view kQualityTag = "[quality=";
constexpr std::string_view kBuiltinPrefix = "builtin:";

std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string last_user_text(const ChatRequest& request) {
  for (auto it = request.messages.rbegin(); it != request.messages.rend(); ++it) {
    if (it->speaker == Speaker::user) return it->text;
  }
  return request.messages.back().text;
}

std::string fill(std::string tpl, const std::string& obj, const std::string& place) {
  auto replace = [&tpl](std::string_view key, const std::string& value) {
    for (auto pos = tpl.find(key); pos != std::string::npos; pos = tpl.find(key, pos + value.size())) {
      tpl.replace(pos, key.size(), value);
    }
  };
  replace("{obj}", obj);
  replace("{place}", place);
  return tpl;
}

template <typename T>
const T& pick(const std::vector<T>& items, std::uint64_t h) {
  return items[static_cast<std::size_t>(h % items.size())];
}

double hardness(const std::string& question) { return unit_from_hash(hash_parts({"hardness", question})); }

std::vector<std::string> string_list(const json& j, const char* key) {
  return j.contains(key) ? j.at(key).get<std::vector<std::string>>() : std::vector<std::string>{};
}

constexpr std::array<std::string_view, 4> kAnswerClosers = {
    "as far as the picture shows.", "based on what is visible.", "judging from the scene.",
    "according to the visible details."};

}  // namespace

const TopicSpec* Scenario::find_topic(const std::string& name) const {
  for (const auto& t : topics) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Scenario scenario_from_json(const json& j) {
  Scenario s;
  s.name = j.value("name", s.name);
  s.seed = j.value("seed", s.seed);
  for (const auto& t : j.value("topics", json::array())) {
    TopicSpec spec;
    spec.name = t.at("name").get<std::string>();
    spec.keywords = string_list(t, "keywords");
    for (auto& k : spec.keywords) k = to_lower_ascii(k);
    spec.teacher_quality = t.value("teacher_quality", spec.teacher_quality);
    spec.student_quality = t.value("student_quality", spec.student_quality);
    spec.templates = string_list(t, "templates");
    spec.objects = string_list(t, "objects");
    spec.places = string_list(t, "places");
    if (t.contains("task_type")) spec.task_type = task_type_from_string(t.at("task_type").get<std::string>());
    if (spec.objects.empty()) spec.objects = {"object"};
    if (spec.places.empty()) spec.places = {"in the image"};
    s.topics.push_back(std::move(spec));
  }
  if (j.contains("fallback")) {
    const auto& f = j.at("fallback");
    s.fallback_topic = f.value("topic", s.fallback_topic);
    s.fallback_teacher_quality = f.value("teacher_quality", s.fallback_teacher_quality);
    s.fallback_student_quality = f.value("student_quality", s.fallback_student_quality);
  }
  if (j.contains("teacher")) s.teacher_spread = j.at("teacher").value("spread", s.teacher_spread);
  if (j.contains("student")) {
    const auto& st = j.at("student");
    s.student_spread = st.value("spread", s.student_spread);
    s.learning_rate = st.value("learning_rate", s.learning_rate);
    s.coverage_saturation = st.value("coverage_saturation", s.coverage_saturation);
  }
  if (j.contains("judge")) {
    const auto& a = j.at("judge");
    s.judge_position_bias = a.value("position_bias", s.judge_position_bias);
    s.judge_unparseable_rate = a.value("unparseable_rate", s.judge_unparseable_rate);
    s.judge_default_quality = a.value("default_quality", s.judge_default_quality);
  }
  if (j.contains("augmentor")) {
    const auto& g = j.at("augmentor");
    s.augment_near_duplicate_rate = g.value("near_duplicate_rate", s.augment_near_duplicate_rate);
    s.augment_echo = g.value("echo", s.augment_echo);
  }
  if (j.contains("script")) {
    for (const auto& [role, table] : j.at("script").items()) {
      role_from_string(role);
      s.script[role] = table.get<std::map<std::string, std::string>>();
    }
  }
  if (j.contains("dataset")) {
    s.dataset_images = j.at("dataset").value("images", std::size_t{0});
    s.dataset_questions_per_image = j.at("dataset").value("questions_per_image", std::size_t{0});
  }
  s.run_overrides = j.value("run", json::object());
  if (s.coverage_saturation <= 0.0) throw ValidationError("coverage_saturation must be positive");
  if (s.learning_rate <= 0.0 || s.learning_rate > 1.0) throw ValidationError("learning_rate must be in (0,1]");
  return s;
}

json scenario_to_json(const Scenario& s) {
  json topics = json::array();
  for (const auto& t : s.topics) {
    topics.push_back({{"name", t.name},
                      {"keywords", t.keywords},
                      {"teacher_quality", t.teacher_quality},
                      {"student_quality", t.student_quality},
                      {"templates", t.templates},
                      {"objects", t.objects},
                      {"places", t.places},
                      {"task_type", to_string(t.task_type)}});
  }
  return json{{"name", s.name},
              {"seed", s.seed},
              {"topics", std::move(topics)},
              {"fallback",
               {{"topic", s.fallback_topic},
                {"teacher_quality", s.fallback_teacher_quality},
                {"student_quality", s.fallback_student_quality}}},
              {"teacher", {{"spread", s.teacher_spread}}},
              {"student",
               {{"spread", s.student_spread},
                {"learning_rate", s.learning_rate},
                {"coverage_saturation", s.coverage_saturation}}},
              {"judge",
               {{"position_bias", s.judge_position_bias},
                {"unparseable_rate", s.judge_unparseable_rate},
                {"default_quality", s.judge_default_quality}}},
              {"augmentor", {{"near_duplicate_rate", s.augment_near_duplicate_rate}, {"echo", s.augment_echo}}},
              {"script", s.script},
              {"dataset", {{"images", s.dataset_images}, {"questions_per_image", s.dataset_questions_per_image}}},
              {"run", s.run_overrides}};
}

Scenario load_scenario(const std::string& path_or_builtin) {
  if (path_or_builtin.empty() || path_or_builtin == "builtin:default") return default_scenario();
  if (path_or_builtin.rfind(kBuiltinPrefix, 0) == 0) {
    throw ValidationError("unknown builtin scenario: " + path_or_builtin);
  }
  try {
    return scenario_from_json(json::parse(read_file(path_or_builtin)));
  } catch (const json::exception& e) {
    throw ParseError(path_or_builtin + ": " + e.what());
  }
}

std::string topic_of(const Scenario& scenario, const std::string& question) {
  const auto tokens = tokenize(question);
  for (const auto& topic : scenario.topics) {
    for (const auto& kw : topic.keywords) {
      if (std::find(tokens.tokens.begin(), tokens.tokens.end(), kw) != tokens.tokens.end()) return topic.name;
    }
  }
  return scenario.fallback_topic;
}

std::vector<ConversationSample> generate_seed_dataset(const Scenario& scenario) {
  std::vector<ConversationSample> out;
  if (scenario.topics.empty()) return out;
  Rng rng(derive_seed(scenario.seed, "seed-dataset"));
  for (std::size_t i = 0; i < scenario.dataset_images; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu", i);
    ConversationSample sample;
    sample.id = std::string("sim-") + name;
    sample.image.uri = std::string("sim://image/") + name;
    std::set<std::string> used;
    for (std::size_t t = 0; t < scenario.dataset_questions_per_image; ++t) {
      const auto& topic = scenario.topics[rng.uniform_index(scenario.topics.size())];
      if (t == 0) sample.task_type = topic.task_type;
      std::string question;
      for (int tries = 0; tries < 16; ++tries) {
        question = fill(topic.templates.empty() ? std::string("What is the {obj} {place}?")
                                                : topic.templates[rng.uniform_index(topic.templates.size())],
                        topic.objects[rng.uniform_index(topic.objects.size())],
                        topic.places[rng.uniform_index(topic.places.size())]);
        if (used.insert(question).second) break;
      }
      sample.turns.push_back({question, "Reference answer " + std::to_string(t + 1) + "."});
    }
    if (!sample.turns.empty()) out.push_back(std::move(sample));
  }
  return out;
}

SyntheticWorld::SyntheticWorld(Scenario scenario) : scenario_(std::move(scenario)) {
  for (const auto& t : scenario_.topics) student_[t.name] = t.student_quality;
  student_.try_emplace(scenario_.fallback_topic, scenario_.fallback_student_quality);
}

double SyntheticWorld::student_quality(const std::string& topic) const {
  std::lock_guard lock(mu_);
  const auto it = student_.find(topic);
  return it == student_.end() ? scenario_.fallback_student_quality : it->second;
}

double SyntheticWorld::teacher_quality(const std::string& topic) const {
  if (const auto* t = scenario_.find_topic(topic)) return t->teacher_quality;
  return scenario_.fallback_teacher_quality;
}

void SyntheticWorld::apply_training(const std::vector<ConversationSample>& export_samples, double learning_rate) {
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ValidationError("learning rate must be in (0,1]");
  std::map<std::string, std::size_t> counts;
  for (const auto& sample : export_samples) {
    for (const auto& turn : sample.turns) ++counts[topic_of(scenario_, turn.question)];
  }
  std::lock_guard lock(mu_);
  for (const auto& [topic, n] : counts) {
    const double coverage = std::min(1.0, static_cast<double>(n) / scenario_.coverage_saturation);
    const double target = teacher_quality(topic);
    auto [it, _] = student_.try_emplace(topic, scenario_.fallback_student_quality);
    if (it->second < target) {
      it->second = std::min(target, it->second + learning_rate * coverage * (target - it->second));
    }
  }
}

json SyntheticWorld::save_state() const {
  std::lock_guard lock(mu_);
  return json{{"student_quality", student_}};
}

void SyntheticWorld::load_state(const json& state) {
  if (state.is_null()) return;
  auto values = state.at("student_quality").get<std::map<std::string, double>>();
  std::lock_guard lock(mu_);
  student_ = std::move(values);
}

SyntheticAgent::SyntheticAgent(Role role, std::shared_ptr<SyntheticWorld> world)
    : role_(role), world_(std::move(world)) {
  if (!world_) throw ValidationError("synthetic agent needs a world");
}

std::string SyntheticAgent::describe() const {
  return "synthetic-" + std::string(to_string(role_)) + "(" + world_->scenario().name + ")";
}

json SyntheticAgent::save_state() const { return role_ == Role::student ? world_->save_state() : json(nullptr); }

void SyntheticAgent::load_state(const json& state) {
  if (role_ == Role::student) world_->load_state(state);
}

BackendResponse SyntheticAgent::do_complete(const ChatRequest& request) {
  BackendResponse out;
  switch (request.role) {
    case Role::teacher:
    case Role::student: out.text = answer(request); break;
    case Role::assessor: out.text = judge(request); break;
    case Role::augmentor: out.text = augment(request); break;
  }
  out.latency_ms = 0;
  return out;
}

std::string SyntheticAgent::answer(const ChatRequest& request) const {
  const auto& sc = world_->scenario();
  const std::string question(trim(last_user_text(request)));
  if (auto table = sc.script.find(std::string(to_string(request.role))); table != sc.script.end()) {
    if (auto hit = table->second.find(question); hit != table->second.end()) return hit->second;
  }
  const auto topic = topic_of(sc, question);
  const double h = hardness(question);
  const bool teacher = request.role == Role::teacher;
  const double base = teacher ? world_->teacher_quality(topic) : world_->student_quality(topic);
  const double spread = teacher ? sc.teacher_spread : sc.student_spread;
  const double quality = std::clamp(base + spread * (0.5 - h), 0.0, 1.0);
  const auto variant = hash_parts({"answer", to_string(request.role), question, format_fixed(request.temperature, 3),
                                   std::to_string(request.sample_index), std::to_string(sc.seed)});
  return std::string(kQualityTag) + format_fixed(quality, 3) + "] Regarding " + topic + ": the answer to \"" +
         question + "\" follows " + std::string(kAnswerClosers[variant % kAnswerClosers.size()]);
}

std::string SyntheticAgent::judge(const ChatRequest& request) const {
  const auto& sc = world_->scenario();
  const auto user = last_user_text(request);
  if (sc.judge_unparseable_rate > 0.0) {
    const auto h = hash_parts({"judge-garble", user, std::to_string(request.sample_index), std::to_string(sc.seed)});
    if (unit_from_hash(h) < sc.judge_unparseable_rate) return "Both answers have merits; I cannot decide.";
  }
  const auto answers = extract_judged_answers(user);
  if (!answers) return "I could not find two answers to compare.";
  const double qa = embedded_quality(answers->first).value_or(sc.judge_default_quality);
  const double qb = embedded_quality(answers->second).value_or(sc.judge_default_quality);
  const double a = std::clamp(10.0 * qa + sc.judge_position_bias, 0.0, 10.0);
  const double b = std::clamp(10.0 * qb, 0.0, 10.0);
  const char* verdict = a > b ? "Assistant A is more accurate and detailed." : a < b ? "Assistant B is more accurate and detailed." : "Both answers are equally good.";
  return "SCORES: " + format_fixed(a, 2) + " " + format_fixed(b, 2) + "\n" + verdict;
}

std::string SyntheticAgent::augment(const ChatRequest& request) const {
  const auto& sc = world_->scenario();
  const auto fields = extract_augment_prompt(last_user_text(request));
  if (!fields) return "What else is shown in this image?";
  const auto& source = fields->question;
  if (sc.augment_echo) return source;
  const auto draw = std::to_string(request.sample_index);
  const auto seed = std::to_string(sc.seed);
  if (sc.augment_near_duplicate_rate > 0.0 &&
      unit_from_hash(hash_parts({"near-dup", source, draw, seed})) < sc.augment_near_duplicate_rate) {
    return source + " Answer briefly.";
  }
  const auto* topic = sc.find_topic(topic_of(sc, source));
  if (topic == nullptr || topic->templates.empty()) {
    return "Looking again at this picture, what detail stands out beyond: " + source;
  }
  const auto h = hash_parts({"augment", source, draw, seed});
  for (std::uint64_t k = 0; k < topic->templates.size(); ++k) {
    auto candidate = fill(pick(topic->templates, h + k), pick(topic->objects, h >> 16),
                          pick(topic->places, h >> 32));
    if (candidate != source) return candidate;
  }
  return source;
}

BackendSet make_synthetic_backends(std::shared_ptr<SyntheticWorld> world) {
  BackendSet set;
  for (Role r : kAllRoles) set.set(r, std::make_shared<SyntheticAgent>(r, world));
  return set;
}

void synthetic_student_update(Backend& student, const std::vector<ConversationSample>& training_export,
                              double learning_rate) {
  auto* agent = dynamic_cast<SyntheticAgent*>(&student);
  if (agent == nullptr || agent->role() != Role::student) {
    throw ValidationError("synthetic_student_update requires a synthetic student backend, got " + student.describe());
  }
  agent->world().apply_training(training_export, learning_rate);
}

std::optional<double> embedded_quality(const std::string& answer) {
  const auto pos = answer.find(kQualityTag);
  if (pos == std::string::npos) return std::nullopt;
  const auto begin = pos + kQualityTag.size();
  const auto end = answer.find(']', begin);
  if (end == std::string::npos) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto text = answer.substr(begin, end - begin);
    const double q = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(q)) return std::nullopt;
    return q;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace mmdistill
