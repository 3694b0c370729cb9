#include "mmdistill/orchestrator.hpp"

#include "mmdistill/cassette.hpp"
#include "mmdistill/jsonl.hpp"
#include "mmdistill/synthetic.hpp"
#include "mmdistill/util.hpp"
#include "mmdistill/wire_backend.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <spawn.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace mmdistill {
namespace fs = std::filesystem;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kSeedFile = "seed.jsonl";
constexpr const char* kLockFile = "run.lock";
constexpr const char* kCheckpointDir = "checkpoint";
constexpr const char* kProgressFile = "progress.json";
constexpr const char* kBackendStateFile = "backend_state.json";
constexpr const char* kTeacherAnswersFile = "teacher_answers.jsonl";
constexpr const char* kExportFile = "export.jsonl";
constexpr const char* kAssessmentsFile = "assessments.jsonl";
constexpr const char* kAugmentationFile = "augmentation.json";
constexpr const char* kReportFile = "report.json";
constexpr const char* kTimingsFile = "timings.json";

const std::set<std::string> kConfigKeys = {
    "tau", "iterations", "temperatures", "rouge_threshold", "assess_scope", "stop_token", "system_prompt",
    "image_position", "rng_seed", "backends", "scenario", "max_in_flight", "trainer_hook",
    "teacher_failure_tolerance", "early_stop_on_zero_accept", "reuse_teacher_answers", "parse_attempts",
    "augment_retries", "gate_scope", "max_output_chars", "max_candidate_chars", "learning_rate", "histogram_bins"};

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ms(Clock::time_point t0) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count());
}

fs::path effective_checkpoint(const fs::path& run_dir) {
  const auto dir = run_dir / kCheckpointDir;
  if (fs::exists(dir / kMetaFile)) return dir;
  auto old = run_dir / "checkpoint.old";
  if (fs::exists(old / kMetaFile)) return old;
  throw CheckpointError("no checkpoint in " + run_dir.string());
}

json progress_to_json(const Progress& p) {
  return json{{"iteration", p.iteration}, {"next_phase", to_string(p.next_phase)}, {"stopped_early", p.stopped_early}};
}

Progress progress_from_json(const json& j) {
  Progress p;
  p.iteration = j.at("iteration").get<std::uint32_t>();
  p.next_phase = phase_from_string(j.at("next_phase").get<std::string>());
  p.stopped_early = j.at("stopped_early").get<bool>();
  return p;
}

std::vector<Message> answer_messages(const RunConfig& config, const std::string& question) {
  std::vector<Message> m;
  if (!config.system_prompt.empty()) m.push_back({Speaker::system, config.system_prompt});
  m.push_back({Speaker::user, question});
  return m;
}

std::string iteration_name(std::uint32_t k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04u", k);
  return buf;
}

json histogram_json(const Histogram& h) { return json{{"edges", h.edges}, {"counts", h.counts}}; }

Histogram histogram_from(const json& j) {
  Histogram h;
  h.edges = j.at("edges").get<std::vector<double>>();
  h.counts = j.at("counts").get<std::vector<std::size_t>>();
  return h;
}

fs::path masks_path_for(const fs::path& data) {
  auto p = data;
  p.replace_extension();
  p += ".masks.jsonl";
  return p;
}

}  // namespace

std::string_view to_string(AssessScope s) noexcept {
  return s == AssessScope::full_cache ? "full_cache" : "delta_only";
}

std::string_view to_string(Phase p) noexcept {
  switch (p) {
    case Phase::tune: return "tune";
    case Phase::assess: return "assess";
    case Phase::augment: return "augment";
    case Phase::done: return "done";
  }
  return "done";
}

Phase phase_from_string(std::string_view s) {
  if (s == "tune") return Phase::tune;
  if (s == "assess") return Phase::assess;
  if (s == "augment") return Phase::augment;
  if (s == "done") return Phase::done;
  throw ValidationError("unknown phase: " + std::string(s));
}

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  if (!(tau >= 0.0)) throw ValidationError("tau must be >= 0");
  if (iterations < 1) throw ValidationError("iterations must be >= 1");
  if (!(rouge_threshold > 0.0 && rouge_threshold <= 1.0)) throw ValidationError("rouge_threshold must be in (0,1]");
  if (stop_token.empty()) throw ValidationError("stop_token must be non-empty");
  if (max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
  if (parse_attempts < 1) throw ValidationError("parse_attempts must be >= 1");
  if (!(teacher_failure_tolerance >= 0.0 && teacher_failure_tolerance <= 1.0)) {
    throw ValidationError("teacher_failure_tolerance must be in [0,1]");
  }
  for (const auto& [role, t] : temperatures) {
    if (!(t >= 0.0 && t <= 2.0)) throw ValidationError("temperature for " + std::string(to_string(role)) + " out of [0,2]");
  }
  if (learning_rate && !(*learning_rate > 0.0 && *learning_rate <= 1.0)) {
    throw ValidationError("learning_rate must be in (0,1]");
  }
  if (histogram_bins < 1) throw ValidationError("histogram_bins must be >= 1");
  if (max_output_chars < 1 || max_candidate_chars < 1) throw ValidationError("length limits must be positive");
}

std::string RunConfig::fingerprint() const {
  json j = *this;
  j.erase("iterations");
  j.erase("max_in_flight");
  return to_hex(fnv1a64(j.dump()));
}

void to_json(json& j, const RunConfig& c) {
  json temps = json::object();
  for (const auto& [role, t] : c.temperatures) temps[std::string(to_string(role))] = t;
  json backends = json::object();
  for (const auto& [role, spec] : c.backends) backends[std::string(to_string(role))] = spec;
  j = json{{"tau", c.tau},
           {"iterations", c.iterations},
           {"temperatures", std::move(temps)},
           {"rouge_threshold", c.rouge_threshold},
           {"assess_scope", to_string(c.assess_scope)},
           {"stop_token", c.stop_token},
           {"system_prompt", c.system_prompt},
           {"image_position", to_string(c.image_position)},
           {"rng_seed", c.rng_seed},
           {"backends", std::move(backends)},
           {"scenario", c.scenario},
           {"max_in_flight", c.max_in_flight},
           {"trainer_hook", c.trainer_hook ? json(*c.trainer_hook) : json(nullptr)},
           {"teacher_failure_tolerance", c.teacher_failure_tolerance},
           {"early_stop_on_zero_accept", c.early_stop_on_zero_accept},
           {"reuse_teacher_answers", c.reuse_teacher_answers},
           {"parse_attempts", c.parse_attempts},
           {"augment_retries", c.augment_retries},
           {"gate_scope", to_string(c.gate_scope)},
           {"max_output_chars", c.max_output_chars},
           {"max_candidate_chars", c.max_candidate_chars},
           {"learning_rate", c.learning_rate ? json(*c.learning_rate) : json(nullptr)},
           {"histogram_bins", c.histogram_bins}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (kConfigKeys.count(key) == 0) throw ValidationError("unknown config key: " + key);
  }
  c = RunConfig{};
  c.tau = j.value("tau", c.tau);
  c.iterations = j.value("iterations", c.iterations);
  if (j.contains("temperatures")) {
    for (const auto& [role, t] : j.at("temperatures").items()) c.temperatures[role_from_string(role)] = t.get<double>();
  }
  c.rouge_threshold = j.value("rouge_threshold", c.rouge_threshold);
  if (j.contains("assess_scope")) {
    const auto s = j.at("assess_scope").get<std::string>();
    if (s == "full_cache") c.assess_scope = AssessScope::full_cache;
    else if (s == "delta_only") c.assess_scope = AssessScope::delta_only;
    else throw ValidationError("unknown assess_scope: " + s);
  }
  c.stop_token = j.value("stop_token", c.stop_token);
  c.system_prompt = j.value("system_prompt", c.system_prompt);
  if (j.contains("image_position")) c.image_position = image_position_from_string(j.at("image_position").get<std::string>());
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  if (j.contains("backends")) {
    for (const auto& [role, spec] : j.at("backends").items()) c.backends[role_from_string(role)] = spec;
  }
  c.scenario = j.value("scenario", c.scenario);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  if (j.contains("trainer_hook") && !j.at("trainer_hook").is_null()) c.trainer_hook = j.at("trainer_hook").get<std::string>();
  c.teacher_failure_tolerance = j.value("teacher_failure_tolerance", c.teacher_failure_tolerance);
  c.early_stop_on_zero_accept = j.value("early_stop_on_zero_accept", c.early_stop_on_zero_accept);
  c.reuse_teacher_answers = j.value("reuse_teacher_answers", c.reuse_teacher_answers);
  c.parse_attempts = j.value("parse_attempts", c.parse_attempts);
  c.augment_retries = j.value("augment_retries", c.augment_retries);
  if (j.contains("gate_scope")) c.gate_scope = gate_scope_from_string(j.at("gate_scope").get<std::string>());
  c.max_output_chars = j.value("max_output_chars", c.max_output_chars);
  c.max_candidate_chars = j.value("max_candidate_chars", c.max_candidate_chars);
  if (j.contains("learning_rate") && !j.at("learning_rate").is_null()) c.learning_rate = j.at("learning_rate").get<double>();
  c.histogram_bins = j.value("histogram_bins", c.histogram_bins);
  c.validate();
}

RunConfig load_config(const fs::path& path) {
  try {
    return json::parse(read_file(path)).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

Histogram Histogram::build(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  for (double v : values) {
    const double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
    std::size_t bin = pos <= 0.0 ? 0 : static_cast<std::size_t>(pos);
    if (bin >= bins) bin = bins - 1;
    ++h.counts[bin];
  }
  return h;
}

void to_json(json& j, const IterationReport& r) {
  j = json{{"iteration", r.iteration},
           {"counts",
            {{"assessed", r.assessed},
             {"skipped", r.skipped},
             {"difficult", r.difficult},
             {"easy", r.easy},
             {"generated", r.generated},
             {"accepted", r.accepted},
             {"rejected_by_reason", r.rejected_by_reason}}},
           {"score_histograms",
            {{"r_s", histogram_json(r.r_s_hist)}, {"r_t", histogram_json(r.r_t_hist)}, {"s_k", histogram_json(r.s_k_hist)}}},
           {"difficult_fraction", r.difficult_fraction},
           {"pool_sizes", {{"tuning", r.tuning_size}, {"cache", r.cache_size}}},
           {"wall_time_ms", r.wall_time_ms}};
}

void from_json(const json& j, IterationReport& r) {
  r.iteration = j.at("iteration").get<std::uint32_t>();
  const auto& c = j.at("counts");
  r.assessed = c.at("assessed").get<std::size_t>();
  r.skipped = c.at("skipped").get<std::size_t>();
  r.difficult = c.at("difficult").get<std::size_t>();
  r.easy = c.at("easy").get<std::size_t>();
  r.generated = c.at("generated").get<std::size_t>();
  r.accepted = c.at("accepted").get<std::size_t>();
  r.rejected_by_reason = c.at("rejected_by_reason").get<std::map<std::string, std::size_t>>();
  const auto& h = j.at("score_histograms");
  r.r_s_hist = histogram_from(h.at("r_s"));
  r.r_t_hist = histogram_from(h.at("r_t"));
  r.s_k_hist = histogram_from(h.at("s_k"));
  r.difficult_fraction = j.at("difficult_fraction").get<double>();
  r.tuning_size = j.at("pool_sizes").at("tuning").get<std::size_t>();
  r.cache_size = j.at("pool_sizes").at("cache").get<std::size_t>();
  r.wall_time_ms = j.at("wall_time_ms").get<std::uint64_t>();
}

IterationReport summarize_assessments(std::uint32_t iteration, const std::vector<AssessmentResult>& results,
                                      std::size_t bins) {
  IterationReport r;
  r.iteration = iteration;
  std::vector<double> rs, rt, sk;
  for (const auto& a : results) {
    ++r.assessed;
    if (!a.ok()) {
      ++r.skipped;
      continue;
    }
    if (a.cls == DifficultyClass::difficult) ++r.difficult;
    else ++r.easy;
    rs.push_back(a.r_s);
    rt.push_back(a.r_t);
    sk.push_back(a.s_k);
  }
  r.r_s_hist = Histogram::build(rs, 0.0, kMaxScore, bins);
  r.r_t_hist = Histogram::build(rt, 0.0, kMaxScore, bins);
  // S_k is unbounded above; its last bin collects everything beyond 2.
  r.s_k_hist = Histogram::build(sk, 0.0, 2.0, bins);
  const auto scored = r.difficult + r.easy;
  r.difficult_fraction = scored == 0 ? 0.0 : static_cast<double>(r.difficult) / static_cast<double>(scored);
  return r;
}

std::string RunSummary::to_text() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-5s %9s %8s %10s %6s %10s %10s %9s %8s %8s %9s\n", "iter", "assessed", "skipped",
                "difficult", "easy", "diff_frac", "generated", "accepted", "tuning", "cache", "wall_ms");
  out << line;
  for (const auto& r : iterations) {
    std::snprintf(line, sizeof(line), "%-5u %9zu %8zu %10zu %6zu %10.4f %10zu %9zu %8zu %8zu %9llu\n", r.iteration,
                  r.assessed, r.skipped, r.difficult, r.easy, r.difficult_fraction, r.generated, r.accepted,
                  r.tuning_size, r.cache_size, static_cast<unsigned long long>(r.wall_time_ms));
    out << line;
  }
  return out.str();
}

std::string RunSummary::to_csv() const {
  std::ostringstream out;
  out << "iteration,assessed,skipped,difficult,easy,difficult_fraction,generated,accepted,"
         "rejected_duplicate,rejected_empty,rejected_oversize,rejected_backend_error,tuning_size,cache_size,"
         "wall_time_ms\n";
  auto rejected = [](const IterationReport& r, const char* key) {
    const auto it = r.rejected_by_reason.find(key);
    return it == r.rejected_by_reason.end() ? std::size_t{0} : it->second;
  };
  for (const auto& r : iterations) {
    char frac[32];
    std::snprintf(frac, sizeof(frac), "%.6f", r.difficult_fraction);
    out << r.iteration << ',' << r.assessed << ',' << r.skipped << ',' << r.difficult << ',' << r.easy << ','
        << frac << ',' << r.generated << ',' << r.accepted << ',' << rejected(r, "duplicate") << ','
        << rejected(r, "empty") << ',' << rejected(r, "oversize") << ',' << rejected(r, "backend_error") << ','
        << r.tuning_size << ',' << r.cache_size << ',' << r.wall_time_ms << '\n';
  }
  return out.str();
}

json RunSummary::to_json() const {
  json items = json::array();
  for (const auto& r : iterations) items.push_back(r);
  json fractions = json::array();
  for (const auto& r : iterations) fractions.push_back(r.difficult_fraction);
  return json{{"iterations", std::move(items)}, {"difficult_fraction", std::move(fractions)}};
}

RunSummary report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw Error("run directory not found: " + run_dir.string());
  RunSummary summary;
  const auto iters = run_dir / "iterations";
  if (fs::is_directory(iters)) {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(iters)) {
      if (entry.is_directory() && fs::exists(entry.path() / kReportFile)) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      summary.iterations.push_back(json::parse(read_file(d / kReportFile)).get<IterationReport>());
    }
  }
  if (summary.iterations.empty()) throw Error("no completed iterations in " + run_dir.string());
  return summary;
}

// ---------------------------------------------------------------------------
// Run setup

fs::path checkpoint_dir(const fs::path& run_dir) { return run_dir / kCheckpointDir; }

Progress read_progress(const fs::path& run_dir) {
  return progress_from_json(json::parse(read_file(effective_checkpoint(run_dir) / kProgressFile)));
}

std::vector<AssessmentResult> read_assessments(const fs::path& path) { return jsonl::read<AssessmentResult>(path); }

void init_run(const fs::path& run_dir, const RunConfig& config, const std::vector<InstructionRecord>& seed,
              bool force) {
  config.validate();
  if (fs::exists(run_dir) && !fs::is_empty(run_dir)) {
    if (!force) throw Error("run directory " + run_dir.string() + " already exists; use force to overwrite");
    fs::remove_all(run_dir);
  }
  fs::create_directories(run_dir);
  const auto pools = init_pools(seed);
  write_file_atomic(run_dir / kConfigFile, json(config).dump(2) + "\n");
  write_records(pools.cache_records(), run_dir / kSeedFile);

  const auto staged = run_dir / "checkpoint.staging";
  write_snapshot_files(pools, staged, config.fingerprint());
  write_file_atomic(staged / kProgressFile, progress_to_json(Progress{}).dump(2) + "\n");
  write_file_atomic(staged / kBackendStateFile, "{}\n");
  commit_directory(staged, checkpoint_dir(run_dir));
}

void init_run(const fs::path& run_dir, const RunConfig& config, const fs::path& seed_dataset, bool force) {
  init_run(run_dir, config, load_seed_dataset(seed_dataset), force);
}

BackendSet build_backends(const RunConfig& config, const fs::path& base_dir) {
  std::shared_ptr<SyntheticWorld> world;
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  std::function<BackendPtr(const json&)> make = [&](const json& spec) -> BackendPtr {
    const auto type = spec.value("type", "synthetic");
    if (type == "synthetic") {
      if (!world) {
        const auto& sc = config.scenario;
        world = std::make_shared<SyntheticWorld>(
            load_scenario(sc.rfind("builtin:", 0) == 0 ? sc : resolve(sc).string()));
      }
      return nullptr;  // filled in per role below
    }
    if (type == "wire") return std::make_shared<WireBackend>(wire_config_from_json(spec));
    if (type == "cassette") {
      const auto mode_name = spec.value("mode", "replay");
      const auto mode = mode_name == "record" ? CassetteMode::record : CassetteMode::replay;
      BackendPtr inner;
      if (spec.contains("inner")) inner = make(spec.at("inner"));
      return std::make_shared<CassetteBackend>(mode, resolve(spec.at("path").get<std::string>()), inner);
    }
    throw ValidationError("unknown backend type: " + type);
  };

  BackendSet set;
  for (Role role : kAllRoles) {
    const auto it = config.backends.find(role);
    const json spec = it == config.backends.end() ? json{{"type", "synthetic"}} : it->second;
    const auto type = spec.value("type", "synthetic");
    if (type == "synthetic") {
      make(spec);
      set.set(role, std::make_shared<SyntheticAgent>(role, world));
    } else if (type == "cassette" && spec.contains("inner") && spec.at("inner").value("type", "synthetic") == "synthetic") {
      make(spec.at("inner"));
      const auto mode = spec.value("mode", "replay") == "record" ? CassetteMode::record : CassetteMode::replay;
      set.set(role, std::make_shared<CassetteBackend>(mode, resolve(spec.at("path").get<std::string>()),
                                                      std::make_shared<SyntheticAgent>(role, world)));
    } else {
      set.set(role, make(spec));
    }
  }
  return set;
}

std::vector<ConversationSample> build_training_samples(const std::vector<InstructionRecord>& instructions,
                                                       const std::vector<AnswerRecord>& answers,
                                                       std::uint32_t iteration) {
  std::map<std::string, const AnswerRecord*> by_id;
  for (const auto& a : answers) by_id[a.instruction_id] = &a;
  std::vector<const InstructionRecord*> sorted;
  for (const auto& r : instructions) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

  std::map<std::string, ConversationSample> by_image;
  for (const auto* rec : sorted) {
    const auto it = by_id.find(rec->id);
    if (it == by_id.end()) continue;
    auto [slot, inserted] = by_image.try_emplace(rec->image.uri);
    auto& sample = slot->second;
    if (inserted) {
      sample.id = content_id("s", {rec->image.uri, std::to_string(iteration)});
      sample.image = rec->image;
      sample.task_type = rec->task_type;
    }
    sample.turns.push_back({rec->question, it->second->text});
  }
  std::vector<ConversationSample> out;
  out.reserve(by_image.size());
  for (auto& [_, s] : by_image) out.push_back(std::move(s));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

ExportPaths write_training_export(const std::vector<ConversationSample>& samples, const RunConfig& config,
                                  std::uint32_t iteration, const fs::path& data_path) {
  RenderOptions render;
  render.system_prompt = config.system_prompt;
  render.stop_token = config.stop_token;
  render.image_position = config.image_position;
  render.rng_seed = derive_seed(config.rng_seed, "render-" + std::to_string(iteration));

  std::string data, masks;
  for (const auto& sample : samples) {
    const auto seq = render_conversation(sample, render);
    json line = sample;
    auto& first = line["conversations"][0]["value"];
    first = image_first(sample, render) ? std::string(kImageToken) + "\n" + first.get<std::string>()
                                        : first.get<std::string>() + "\n" + std::string(kImageToken);
    data += line.dump() + "\n";
    masks += json{{"id", sample.id}, {"text", seq.text}, {"spans", seq.spans}, {"loss_mask", seq.loss_mask()}}.dump() +
             "\n";
  }
  ExportPaths paths{data_path, masks_path_for(data_path)};
  if (data_path.has_parent_path()) fs::create_directories(data_path.parent_path());
  write_file_atomic(paths.data, data);
  write_file_atomic(paths.masks, masks);
  return paths;
}

int invoke_trainer_hook(const std::string& hook, const fs::path& data, std::uint32_t iteration) {
  const std::string script = hook + " \"$@\"";
  const std::string data_arg = data.string();
  const std::string iter_arg = std::to_string(iteration);
  std::vector<std::string> args = {"/bin/sh", "-c", script, "sh", "--data", data_arg, "--iteration", iter_arg};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (::posix_spawn(&pid, "/bin/sh", nullptr, nullptr, argv.data(), environ) != 0) {
    throw PhaseError("cannot spawn trainer hook: " + hook);
  }
  int status = 0;
  if (::waitpid(pid, &status, 0) < 0) throw PhaseError("waitpid failed for trainer hook");
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
}

// ---------------------------------------------------------------------------
// Orchestrator

Orchestrator::Orchestrator(fs::path run_dir, OrchestratorOptions options) : run_dir_(std::move(run_dir)) {
  if (!fs::is_directory(run_dir_)) throw Error("run directory not found: " + run_dir_.string());
  lock_fd_ = ::open((run_dir_ / kLockFile).c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw Error("cannot open lock file in " + run_dir_.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw Error("run directory " + run_dir_.string() + " is locked by another orchestrator");
  }
  try {
    config_ = load_config(run_dir_ / kConfigFile);
    const auto ckpt = effective_checkpoint(run_dir_);
    const auto meta = read_snapshot_meta(ckpt);
    if (options.config) {
      if (options.config->fingerprint() != config_.fingerprint() && !options.allow_config_change) {
        throw Error("config differs from the run's pinned config (fingerprint " + config_.fingerprint() +
                    "); pass allow_config_change to override");
      }
      config_ = *options.config;
      write_file_atomic(run_dir_ / kConfigFile, json(config_).dump(2) + "\n");
    }
    if (meta.config_fingerprint != config_.fingerprint() && !options.allow_config_change) {
      throw Error("config.json fingerprint " + config_.fingerprint() + " does not match checkpoint fingerprint " +
                  meta.config_fingerprint);
    }
    pools_ = restore(ckpt);
    progress_ = progress_from_json(json::parse(read_file(ckpt / kProgressFile)));
    backends_ = options.backends ? *options.backends : build_backends(config_, run_dir_);
    const auto state = json::parse(read_file(ckpt / kBackendStateFile));
    for (const auto& [role, s] : state.items()) backends_.get(role_from_string(role)).load_state(s);
  } catch (...) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw;
  }
}

Orchestrator::~Orchestrator() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

bool Orchestrator::finished() const { return progress_.stopped_early || progress_.iteration > config_.iterations; }

fs::path Orchestrator::iteration_dir(std::uint32_t iteration) const {
  return run_dir_ / "iterations" / iteration_name(iteration);
}

void Orchestrator::require_phase(Phase phase) const {
  if (finished()) throw PhaseError("run is finished; nothing to do for phase " + std::string(to_string(phase)));
  if (progress_.next_phase != phase) {
    throw PhaseError("iteration " + std::to_string(progress_.iteration) + ": next phase is " +
                     std::string(to_string(progress_.next_phase)) + ", not " + std::string(to_string(phase)));
  }
}

void Orchestrator::commit(const PoolState& pools, const Progress& progress) {
  const auto staged = run_dir_ / "checkpoint.staging";
  std::error_code ec;
  fs::remove_all(staged, ec);
  write_snapshot_files(pools, staged, config_.fingerprint());
  write_file_atomic(staged / kProgressFile, progress_to_json(progress).dump(2) + "\n");
  json state = json::object();
  for (Role role : kAllRoles) {
    if (!backends_.has(role)) continue;
    auto s = backends_.get(role).save_state();
    if (!s.is_null()) state[std::string(to_string(role))] = std::move(s);
  }
  write_file_atomic(staged / kBackendStateFile, state.dump(2) + "\n");
  commit_directory(staged, checkpoint_dir(run_dir_));
  progress_ = progress;
}

void Orchestrator::record_timing(const std::string& phase, std::uint64_t ms) {
  const auto path = iteration_dir(progress_.iteration) / kTimingsFile;
  json timings = fs::exists(path) ? json::parse(read_file(path)) : json::object();
  timings[phase] = ms;
  write_file_atomic(path, timings.dump(2) + "\n");
}

fs::path Orchestrator::phase_tune() {
  require_phase(Phase::tune);
  const auto t0 = Clock::now();
  const auto k = progress_.iteration;
  const auto dir = iteration_dir(k);
  fs::create_directories(dir);
  const auto instructions = pools_.tuning_records();
  const auto export_path = dir / kExportFile;

  if (instructions.empty()) {
    spdlog::warn("iteration {}: tuning pool is empty, skipping tune phase", k);
    jsonl::write(std::vector<AnswerRecord>{}, dir / kTeacherAnswersFile);
    write_training_export({}, config_, k, export_path);
    commit(pools_, Progress{k, Phase::assess, progress_.stopped_early});
    record_timing("tune", elapsed_ms(t0));
    return export_path;
  }

  const double temperature = config_.temperatures.at(Role::teacher);
  std::vector<ChatRequest> requests;
  requests.reserve(instructions.size());
  for (const auto& rec : instructions) {
    ChatRequest req;
    req.role = Role::teacher;
    req.image = rec.image;
    req.messages = answer_messages(config_, rec.question);
    req.temperature = temperature;
    req.max_output_chars = config_.max_output_chars;
    requests.push_back(std::move(req));
  }
  const auto results = complete_batch(backends_.get(Role::teacher), requests, config_.max_in_flight);

  std::vector<AnswerRecord> answers;
  std::size_t failures = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& rec = instructions[i];
    if (!results[i].ok()) {
      spdlog::warn("iteration {}: teacher failed on {}: {}", k, rec.id, results[i].error_message);
      ++failures;
      continue;
    }
    const auto& text = results[i].response->text;
    if (text.find(config_.stop_token) != std::string::npos ||
        rec.question.find(config_.stop_token) != std::string::npos) {
      spdlog::warn("iteration {}: stop token inside {}; excluded from export", k, rec.id);
      ++failures;
      continue;
    }
    answers.push_back({rec.id, AnswerSource::teacher, text, temperature});
  }
  const double failure_rate = static_cast<double>(failures) / static_cast<double>(instructions.size());
  if (failure_rate > config_.teacher_failure_tolerance) {
    throw PhaseError("iteration " + std::to_string(k) + " tune: " + std::to_string(failures) + "/" +
                     std::to_string(instructions.size()) + " teacher failures exceed tolerance");
  }
  jsonl::write(answers, dir / kTeacherAnswersFile);

  const auto samples = build_training_samples(instructions, answers, k);
  const auto paths = write_training_export(samples, config_, k, export_path);

  if (config_.trainer_hook) {
    const int status = invoke_trainer_hook(*config_.trainer_hook, paths.data, k);
    if (status != 0) {
      throw PhaseError("iteration " + std::to_string(k) + " tune: trainer hook exited with status " +
                       std::to_string(status));
    }
  }
  auto* student = dynamic_cast<SyntheticAgent*>(backends_.ptr(Role::student).get());
  if (auto* cassette = dynamic_cast<CassetteBackend*>(backends_.ptr(Role::student).get())) {
    student = dynamic_cast<SyntheticAgent*>(cassette->inner().get());
  }
  if (student != nullptr) {
    const double lr = config_.learning_rate.value_or(student->world().scenario().learning_rate);
    synthetic_student_update(*student, samples, lr);
  } else if (!config_.trainer_hook) {
    spdlog::warn("iteration {}: no trainer hook configured; the student is not updated", k);
  }

  commit(pools_, Progress{k, Phase::assess, progress_.stopped_early});
  record_timing("tune", elapsed_ms(t0));
  return paths.data;
}

std::vector<AssessmentResult> Orchestrator::phase_assess() {
  require_phase(Phase::assess);
  const auto t0 = Clock::now();
  const auto k = progress_.iteration;
  const auto dir = iteration_dir(k);
  fs::create_directories(dir);

  const auto in_scope =
      config_.assess_scope == AssessScope::full_cache ? pools_.cache_records() : pools_.tuning_records();
  if (in_scope.empty()) throw PhaseError("iteration " + std::to_string(k) + " assess: nothing to assess");

  std::map<std::string, std::string> teacher_answers;
  if (config_.reuse_teacher_answers && fs::exists(dir / kTeacherAnswersFile)) {
    for (const auto& a : jsonl::read<AnswerRecord>(dir / kTeacherAnswersFile)) teacher_answers[a.instruction_id] = a.text;
  }

  auto make_request = [&](Role role, const InstructionRecord& rec) {
    ChatRequest req;
    req.role = role;
    req.image = rec.image;
    req.messages = answer_messages(config_, rec.question);
    req.temperature = config_.temperatures.at(role);
    req.max_output_chars = config_.max_output_chars;
    return req;
  };
  std::vector<ChatRequest> student_requests, teacher_requests;
  std::vector<std::size_t> teacher_index;
  for (std::size_t i = 0; i < in_scope.size(); ++i) {
    student_requests.push_back(make_request(Role::student, in_scope[i]));
    if (teacher_answers.count(in_scope[i].id) == 0) {
      teacher_requests.push_back(make_request(Role::teacher, in_scope[i]));
      teacher_index.push_back(i);
    }
  }
  const auto student_results = complete_batch(backends_.get(Role::student), student_requests, config_.max_in_flight);
  const auto teacher_results = complete_batch(backends_.get(Role::teacher), teacher_requests, config_.max_in_flight);
  std::vector<std::optional<std::string>> teacher_text(in_scope.size());
  std::vector<std::string> teacher_error(in_scope.size());
  for (std::size_t i = 0; i < in_scope.size(); ++i) {
    if (auto it = teacher_answers.find(in_scope[i].id); it != teacher_answers.end()) teacher_text[i] = it->second;
  }
  for (std::size_t j = 0; j < teacher_index.size(); ++j) {
    if (teacher_results[j].ok()) teacher_text[teacher_index[j]] = teacher_results[j].response->text;
    else teacher_error[teacher_index[j]] = teacher_results[j].error_message;
  }

  AssessOptions options;
  options.tau = config_.tau;
  options.temperature = config_.temperatures.at(Role::assessor);
  options.parse_attempts = config_.parse_attempts;
  options.iteration = k;
  options.max_output_chars = config_.max_output_chars;

  std::vector<AssessmentResult> results(in_scope.size());
  parallel_for_bounded(in_scope.size(), config_.max_in_flight, [&](std::size_t i) {
    auto& out = results[i];
    out.instruction_id = in_scope[i].id;
    out.iteration = k;
    if (!student_results[i].ok() || !teacher_text[i]) {
      out.status = AssessmentStatus::skipped_backend_error;
      out.note = !student_results[i].ok() ? "student: " + student_results[i].error_message
                                          : "teacher: " + teacher_error[i];
      return;
    }
    try {
      out = score_with_swap(in_scope[i], student_results[i].response->text, *teacher_text[i],
                            backends_.get(Role::assessor), options);
    } catch (const std::exception& e) {
      out.status = AssessmentStatus::skipped_backend_error;
      out.student_answer = student_results[i].response->text;
      out.teacher_answer = *teacher_text[i];
      out.note = std::string("assessor: ") + e.what();
    }
  });

  const auto skipped = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.ok(); });
  if (static_cast<std::size_t>(skipped) == results.size()) {
    throw PhaseError("iteration " + std::to_string(k) + " assess: every instruction was skipped");
  }
  if (skipped > 0) spdlog::warn("iteration {}: {} of {} assessments skipped", k, skipped, results.size());
  jsonl::write(results, dir / kAssessmentsFile);
  commit(pools_, Progress{k, Phase::augment, progress_.stopped_early});
  record_timing("assess", elapsed_ms(t0));
  return results;
}

PoolState Orchestrator::phase_augment() {
  require_phase(Phase::augment);
  const auto t0 = Clock::now();
  const auto k = progress_.iteration;
  const auto dir = iteration_dir(k);
  const auto results = read_assessments(dir / kAssessmentsFile);

  std::vector<InstructionRecord> difficult, easy;
  for (const auto& r : results) {
    if (!r.ok()) continue;
    const auto it = pools_.cache.find(r.instruction_id);
    if (it == pools_.cache.end()) throw PhaseError("assessment for unknown instruction " + r.instruction_id);
    (r.cls == DifficultyClass::difficult ? difficult : easy).push_back(it->second);
  }

  AugmentOptions options;
  options.rng_seed = derive_seed(config_.rng_seed, "augment-" + std::to_string(k));
  options.threshold = config_.rouge_threshold;
  options.temperature = config_.temperatures.at(Role::augmentor);
  options.iteration = pools_.iteration;
  options.max_in_flight = config_.max_in_flight;
  options.retries_on_rejection = config_.augment_retries;
  options.max_candidate_chars = config_.max_candidate_chars;
  options.max_output_chars = config_.max_output_chars;
  options.gate_scope = config_.gate_scope;
  const auto batch = augment_iteration(difficult, easy, backends_.get(Role::augmentor), pools_, options);

  auto next = refresh(pools_, batch.accepted);
  write_file_atomic(dir / kAugmentationFile, to_summary_json(batch).dump(2) + "\n");

  auto report = summarize_assessments(k, results, config_.histogram_bins);
  report.generated = batch.generated;
  report.accepted = batch.accepted.size();
  for (RejectReason r : {RejectReason::duplicate, RejectReason::empty, RejectReason::oversize,
                         RejectReason::backend_error}) {
    const auto it = batch.rejected_count_by_reason.find(r);
    report.rejected_by_reason[std::string(to_string(r))] = it == batch.rejected_count_by_reason.end() ? 0 : it->second;
  }
  report.tuning_size = next.tuning.size();
  report.cache_size = next.cache.size();
  std::uint64_t wall = elapsed_ms(t0);
  if (fs::exists(dir / kTimingsFile)) {
    const auto timings = json::parse(read_file(dir / kTimingsFile));
    for (const auto& [_, ms] : timings.items()) wall += ms.get<std::uint64_t>();
  }
  report.wall_time_ms = wall;
  write_file_atomic(dir / kReportFile, json(report).dump(2) + "\n");

  const bool stop = batch.accepted.empty() && config_.early_stop_on_zero_accept;
  if (batch.accepted.empty()) {
    spdlog::warn("iteration {}: augmentation accepted no instructions{}", k, stop ? "; stopping early" : "");
  }
  record_timing("augment", elapsed_ms(t0));
  commit(next, Progress{k + 1, Phase::tune, stop});
  pools_ = std::move(next);
  return pools_;
}

bool Orchestrator::step() {
  switch (next_phase()) {
    case Phase::tune: phase_tune(); return true;
    case Phase::assess: phase_assess(); return true;
    case Phase::augment: phase_augment(); return true;
    case Phase::done: return false;
  }
  return false;
}

std::vector<IterationReport> Orchestrator::run(std::optional<std::size_t> max_phases) {
  std::vector<IterationReport> reports;
  std::size_t executed = 0;
  while (!finished() && (!max_phases || executed < *max_phases)) {
    const auto phase = progress_.next_phase;
    const auto k = progress_.iteration;
    try {
      step();
    } catch (const PhaseError&) {
      throw;
    } catch (const std::exception& e) {
      throw PhaseError("iteration " + std::to_string(k) + " phase " + std::string(to_string(phase)) + ": " + e.what());
    }
    ++executed;
    if (phase == Phase::augment) {
      reports.push_back(json::parse(read_file(iteration_dir(k) / kReportFile)).get<IterationReport>());
    }
  }
  return reports;
}

}  // namespace mmdistill
