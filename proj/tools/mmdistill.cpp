// mmdistill: command-line driver for distillation runs.

#include "mmdistill/corpusfilter.hpp"
#include "mmdistill/jsonl.hpp"
#include "mmdistill/orchestrator.hpp"
#include "mmdistill/synthetic.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace mmdistill;

namespace {

RunConfig config_for_scenario(const std::string& scenario_path, const Scenario& scenario) {
  json j = RunConfig{};
  j.update(scenario.run_overrides);
  j["scenario"] = scenario_path.rfind("builtin:", 0) == 0 ? scenario_path : fs::absolute(scenario_path).string();
  return j.get<RunConfig>();
}

void print_report(const fs::path& run_dir, const std::string& format, const std::string& csv_out,
                  const std::string& json_out) {
  const auto summary = report(run_dir);
  if (format == "csv") std::cout << summary.to_csv();
  else if (format == "json") std::cout << summary.to_json().dump(2) << "\n";
  else std::cout << summary.to_text();
  if (!csv_out.empty()) write_file_atomic(csv_out, summary.to_csv());
  if (!json_out.empty()) write_file_atomic(json_out, summary.to_json().dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Competitive multi-modal distillation orchestrator"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  std::string run_dir;
  std::string config_path;
  bool force = false;
  bool allow_config_change = false;

  auto* init = app.add_subcommand("init", "Create a run directory from a config and a seed dataset");
  std::string seed_path;
  init->add_option("--run-dir", run_dir, "Run directory")->required();
  init->add_option("--config", config_path, "RunConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
  init->add_option("--seed", seed_path, "Seed dataset JSONL")->required()->check(CLI::ExistingFile);
  init->add_flag("--force", force, "Overwrite an existing run directory");

  auto* run = app.add_subcommand("run", "Run iterations until done or early stop");
  std::size_t max_phases = 0;
  run->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--config", config_path, "Replacement config")->check(CLI::ExistingFile);
  run->add_flag("--allow-config-change", allow_config_change, "Accept a config whose fingerprint differs");
  run->add_option("--max-phases", max_phases, "Stop after this many phases (0 = no limit)");

  auto* iterate = app.add_subcommand("iterate", "Run one phase of the current iteration");
  std::string phase;
  iterate->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  iterate->add_option("--phase", phase, "Phase to run")->required()->check(CLI::IsMember({"tune", "assess", "augment"}));

  auto* exp = app.add_subcommand("export", "Re-render an iteration's training export");
  std::uint32_t export_iteration = 0;
  std::string export_out;
  exp->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--iteration", export_iteration, "Iteration number")->required();
  exp->add_option("--out", export_out, "Output JSONL; masks go to <stem>.masks.jsonl")->required();

  auto* filter = app.add_subcommand("filter-corpus", "Subsample an image-caption manifest by phrase frequency");
  FilterOptions filter_options;
  std::string filter_in, filter_out;
  filter->add_option("--min-freq", filter_options.min_freq, "Drop phrases below this pair count")->capture_default_str();
  filter->add_option("--cap", filter_options.cap, "Pairs sampled per frequent phrase")->capture_default_str();
  filter->add_option("--seed", filter_options.rng_seed, "Sampling seed")->capture_default_str();
  filter->add_option("input", filter_in, "Input manifest JSONL")->required()->check(CLI::ExistingFile);
  filter->add_option("output", filter_out, "Output manifest JSONL")->required();

  auto* simulate = app.add_subcommand("simulate", "Run the full loop offline against a synthetic scenario");
  std::string scenario_path = "builtin:default";
  std::optional<std::uint32_t> sim_iterations;
  std::optional<std::uint64_t> sim_seed;
  simulate->add_option("--scenario", scenario_path, "Scenario JSON or builtin:default")->capture_default_str();
  simulate->add_option("--run-dir", run_dir, "Run directory")->required();
  simulate->add_option("--iterations", sim_iterations, "Override the iteration count");
  simulate->add_option("--rng-seed", sim_seed, "Override the run seed");
  simulate->add_flag("--force", force, "Overwrite an existing run directory");

  auto* rep = app.add_subcommand("report", "Summarize completed iterations");
  std::string format = "text", csv_out, json_out;
  rep->add_option("--run-dir", run_dir, "Run directory")->required();
  rep->add_option("--format", format, "Stdout format")->check(CLI::IsMember({"text", "csv", "json"}))->capture_default_str();
  rep->add_option("--csv", csv_out, "Also write CSV plot data here");
  rep->add_option("--json", json_out, "Also write the JSON summary here");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_default_logger(spdlog::default_logger()->clone("mmdistill"));

  try {
    if (*init) {
      const auto config = config_path.empty() ? RunConfig{} : load_config(config_path);
      init_run(run_dir, config, fs::path(seed_path), force);
      std::cout << "initialized " << run_dir << "\n";
    } else if (*run) {
      OrchestratorOptions options;
      if (!config_path.empty()) options.config = load_config(config_path);
      options.allow_config_change = allow_config_change;
      Orchestrator orch(run_dir, options);
      const auto reports = orch.run(max_phases == 0 ? std::nullopt : std::optional<std::size_t>(max_phases));
      for (const auto& r : reports) {
        std::cout << "iteration " << r.iteration << ": difficult_fraction=" << r.difficult_fraction
                  << " accepted=" << r.accepted << "\n";
      }
      if (orch.finished()) std::cout << "run finished\n";
    } else if (*iterate) {
      Orchestrator orch(run_dir);
      const auto k = orch.progress().iteration;
      if (phase == "tune") std::cout << orch.phase_tune().string() << "\n";
      else if (phase == "assess") std::cout << orch.phase_assess().size() << " assessed\n";
      else std::cout << orch.phase_augment().tuning.size() << " new instructions\n";
      std::cout << "iteration " << k << " " << phase << " done\n";
    } else if (*exp) {
      Orchestrator orch(run_dir);
      const auto answers =
          jsonl::read<AnswerRecord>(orch.iteration_dir(export_iteration) / "teacher_answers.jsonl");
      std::vector<InstructionRecord> instructions;
      for (const auto& a : answers) instructions.push_back(orch.pools().cache.at(a.instruction_id));
      const auto samples = build_training_samples(instructions, answers, export_iteration);
      const auto paths = write_training_export(samples, orch.config(), export_iteration, export_out);
      std::cout << paths.data.string() << "\n" << paths.masks.string() << "\n";
    } else if (*filter) {
      const auto pairs = read_manifest(filter_in);
      const auto selected = filter_pairs(pairs, filter_options);
      write_manifest(selected, filter_out);
      std::cout << selected.size() << " of " << pairs.size() << " pairs selected\n";
    } else if (*simulate) {
      const auto scenario = load_scenario(scenario_path);
      auto config = config_for_scenario(scenario_path, scenario);
      if (sim_iterations) config.iterations = *sim_iterations;
      if (sim_seed) config.rng_seed = *sim_seed;
      init_run(run_dir, config, to_single_turn(generate_seed_dataset(scenario)), force);
      Orchestrator(run_dir).run();
      print_report(run_dir, "text", "", "");
    } else if (*rep) {
      print_report(run_dir, format, csv_out, json_out);
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
