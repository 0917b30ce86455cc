#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "secforge/eval.hpp"
#include "secforge/pipeline.hpp"

namespace {

int cmd_run(const std::string& stage_name, const std::string& config_path, bool force, bool quiet) {
  const auto stage = secforge::parse_stage(stage_name);
  if (!stage) {
    std::cerr << "unknown stage '" << stage_name << "'\n";
    return 2;
  }
  const auto config = secforge::load_config(config_path);
  return secforge::run(*stage, config, {force, quiet});
}

struct EvaluateArgs {
  std::string tasks;
  std::string model = "mock";
  std::string model_name;
  std::string api_key_env;
  std::string score_mode = "completions_echo";
  std::string few_shot;
  std::string out = "report.json";
  std::string timestamp;
  std::uint64_t seed = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
  secforge::EndpointConfig endpoint;
  if (a.model == "mock") {
    endpoint.model = a.model_name.empty() ? "mock-student" : a.model_name;
  } else {
    endpoint.kind = "http";
    endpoint.endpoint = a.model;
    endpoint.model = a.model_name;
    endpoint.api_key_env = a.api_key_env;
    if (endpoint.model.empty()) {
      std::cerr << "--model-name is required with an HTTP endpoint\n";
      return 2;
    }
  }
  endpoint.score_mode = a.score_mode == "chat_top_logprobs" ? secforge::ScoreMode::chat_top_logprobs
                                                            : secforge::ScoreMode::completions_echo;
  auto gateway = secforge::make_gateway(endpoint, {}, a.seed);
  secforge::EvalOptions options;
  if (!a.few_shot.empty()) options.few_shot_prefix = secforge::read_file(a.few_shot);
  const auto report = secforge::evaluate_directory(a.tasks, *gateway, options, a.timestamp);
  secforge::write_file_atomic(a.out, secforge::to_json(report).dump(2) + "\n");
  std::cout << "overall " << report.overall << " over " << report.tasks.size() << " tasks -> " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cybersecurity instruction dataset builder"};
  app.set_version_flag("--version", std::string(secforge::kToolVersion));
  app.require_subcommand(1);

  std::string stage = "all";
  std::string config;
  bool force = false;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run one pipeline stage, or all of them");
  run->add_option("--stage", stage, "ingest|graph|generate|sdg|evalset|evaluate|all")->capture_default_str();
  run->add_option("--config", config, "TOML configuration")->required()->check(CLI::ExistingFile);
  run->add_flag("--force", force, "Re-run even when a checkpoint exists");
  run->add_flag("--quiet", quiet, "Suppress the per-stage JSON log lines");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score a model on a directory of eval sets");
  evaluate->add_option("--tasks", ev.tasks, "Directory of <task>.jsonl files")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--model", ev.model, "'mock' or a chat-completions base URL")->capture_default_str();
  evaluate->add_option("--model-name", ev.model_name, "Model name sent to the endpoint");
  evaluate->add_option("--api-key-env", ev.api_key_env, "Environment variable holding the API key");
  evaluate->add_option("--score-mode", ev.score_mode, "Log-likelihood route")
      ->check(CLI::IsMember({"completions_echo", "chat_top_logprobs"}))
      ->capture_default_str();
  evaluate->add_option("--few-shot", ev.few_shot, "File prepended to every prompt")->check(CLI::ExistingFile);
  evaluate->add_option("--out", ev.out, "Report path")->capture_default_str();
  evaluate->add_option("--timestamp", ev.timestamp, "Timestamp recorded in the report");
  evaluate->add_option("--seed", ev.seed, "Seed for the mock model")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(stage, config, force, quiet);
    return cmd_evaluate(ev);
  } catch (const std::exception& e) {
    std::cerr << "secforge: " << e.what() << '\n';
    return 1;
  }
}
