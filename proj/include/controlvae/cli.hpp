#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "controlvae/highlevel.hpp"

CONTROLVAE_NAMESPACE_BEGIN

struct GaitSpec {
  std::string kind = "walk";
  int cycles = 8;
  std::string skill;                 // defaults to kind
  nlohmann::json params = nlohmann::json::object();   // GaitParams overrides
};

struct DataConfig {
  std::vector<GaitSpec> gaits{{"walk", 8, "", nlohmann::json::object()},
                              {"hop", 12, "", nlohmann::json::object()}};
  bool mirror = true;
};

struct TrainRunConfig {
  int epochs = 3000;
  int checkpoint_every = 100;
  int workers = 1;
};

struct EvalConfig {
  std::string clip;            // dataset clip for track mode; empty = first clip
  int steps = 200;
  int seeds = 10;
  std::string goals_csv;       // goal script for mpc / task modes
  TaskGoal goal{};             // constant goal when no script is given
  int every = 100;             // task training: iterations between evaluations
  int suite_steps = 100;       // steps per goal of the evaluation suite
};

// Every tunable of a run. Unknown keys are rejected at every level.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string dataset = "data";
  std::string run_dir = "runs/vae";
  DataConfig data;
  CharacterSpec character;
  CvaeConfig cvae;
  WorldModelConfig world_model;
  TrainRunConfig train;
  TaskTrainConfig task;
  SkillTrainConfig skill;
  MpcConfig mpc;
  EvalConfig eval;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_run_config(const std::string& path);
// Applies "a.b.c=value" to a JSON config; value is parsed as JSON, falling
// back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

Dataset build_dataset(const DataConfig& cfg, const CharacterSpec& spec);

// Eight fixed heading goals (facing +x, speeds 0.1 .. 0.8 m/s) used to
// compare task controllers.
std::vector<TaskGoal> heading_goal_suite();

// Goal script: CSV with header step,tag,height_sign,heading,speed,direction,skill.
struct GoalScript {
  std::vector<int> steps;
  std::vector<TaskGoal> goals;
  const TaskGoal& at(int step) const;
};
GoalScript read_goal_script(const std::string& path);

// Commands. Each throws ConfigError / DataError (validation), NumericError
// or IoError; cli_main maps them to exit codes.
void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir);
void cmd_train_vae(const RunConfig& cfg, bool resume);
void cmd_train_task(const RunConfig& cfg, const std::string& vae_run, const std::string& out_dir);
void cmd_eval(const RunConfig& cfg, const std::string& mode, const std::string& vae_run,
              const std::string& task_run, const std::string& out_dir);
nlohmann::json cmd_inspect_checkpoint(const std::string& path);

// Latest checkpoint set of a VAE run directory.
std::string latest_checkpoint(const std::string& run_dir);

// Loads the frozen ControlVAE and world model of a run.
struct LoadedRun {
  RunConfig cfg;
  Dataset data;
  TrainState state;
  std::string checkpoint_dir;
};
LoadedRun load_vae_run(const std::string& run_dir);

enum ExitCode { kExitOk = 0, kExitValidation = 1, kExitNumeric = 2, kExitIo = 3 };

int cli_main(int argc, char** argv);

CONTROLVAE_NAMESPACE_END
