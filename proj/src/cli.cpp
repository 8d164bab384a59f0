#include "controlvae/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "controlvae/checkpoint.hpp"
#include "controlvae/json_config.hpp"

CONTROLVAE_NAMESPACE_BEGIN

namespace fs = std::filesystem;

namespace {

nlohmann::json goal_to_json(const TaskGoal& g) {
  return {{"height_sign", g.height_sign},
          {"heading", g.heading},
          {"speed", g.speed},
          {"direction", g.direction},
          {"skill", g.skill}};
}

TaskGoal goal_from_json(const nlohmann::json& j) {
  TaskGoal g;
  ConfigReader r(j, "eval.goal");
  r.get("height_sign", g.height_sign)
      .get("heading", g.heading)
      .get("speed", g.speed)
      .get("direction", g.direction)
      .get("skill", g.skill)
      .finish();
  return g;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into '" + path.string() + "': " + ec.message());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create '" + p.string() + "': " + ec.message());
}

// Appends JSON lines and flushes each one.
class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) : path_(path), out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open '" + path.string() + "'");
  }
  void write(const nlohmann::json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

// Marks a run directory as failed for as long as the guarded work runs.
class FailedMarker {
 public:
  explicit FailedMarker(fs::path dir) : path_(std::move(dir) / "FAILED") {}
  void fail(const std::string& why) {
    std::ofstream out(path_);
    out << why << "\n";
  }
  void clear() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

template <class F>
void guarded(const fs::path& dir, F&& work) {
  FailedMarker marker(dir);
  try {
    work();
  } catch (const std::exception& e) {
    marker.fail(e.what());
    throw;
  }
  marker.clear();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string goal_csv_fields(const TaskGoal& g) {
  return to_string(g.tag) + "," + fmt(g.height_sign) + "," + fmt(g.heading) + "," + fmt(g.speed) +
         "," + fmt(g.direction) + "," + std::to_string(g.skill);
}

std::string root_fields(const SimState& s, const CharacterSpec& spec) {
  const BodyState& r = s.body[0];
  const Vec2 h = head_position(s, spec);
  return fmt(r.x) + "," + fmt(r.y) + "," + fmt(r.theta) + "," + fmt(r.vx) + "," + fmt(r.vy) + "," +
         fmt(h.x) + "," + fmt(h.y);
}

const char* kRootHeader = "root_x,root_y,root_theta,root_vx,root_vy,head_x,head_y";

std::map<std::string, std::string> checkpoint_hashes(const std::string& dir) {
  std::map<std::string, std::string> h;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ckpt") h[e.path().filename().string()] = file_hash(e.path().string());
  }
  return h;
}

std::vector<TaskGoal> suite_for(TaskTag tag, int skills) {
  std::vector<TaskGoal> goals = heading_goal_suite();
  switch (tag) {
    case TaskTag::Heading:
      break;
    case TaskTag::Height: {
      goals.clear();
      for (double h : {1.0, -1.0}) {
        TaskGoal g;
        g.tag = TaskTag::Height;
        g.height_sign = h;
        goals.push_back(g);
      }
      break;
    }
    case TaskTag::Steering:
      for (TaskGoal& g : goals) g.tag = TaskTag::Steering;
      break;
    case TaskTag::Skill: {
      std::vector<TaskGoal> out;
      for (int k = 0; k < skills; ++k)
        for (TaskGoal g : goals) {
          g.tag = TaskTag::Skill;
          g.skill = k;
          out.push_back(g);
        }
      goals = out;
      break;
    }
  }
  return goals;
}

nlohmann::json evaluation_json(int iteration, const GoalEvaluation& ev) {
  int falls = 0;
  double speed = 0;
  for (std::size_t i = 0; i < ev.falls.size(); ++i) {
    falls += ev.falls[i];
    speed += ev.speed_error[i];
  }
  return {{"iteration", iteration},
          {"mean_loss", ev.overall},
          {"per_goal", ev.mean_loss},
          {"falls", falls},
          {"mean_speed_error", ev.speed_error.empty() ? 0.0 : speed / ev.speed_error.size()}};
}

}  // namespace

// ------------------------------------------------------------ RunConfig

void RunConfig::validate() const {
  if (data.gaits.empty()) throw ConfigError("data.gaits is empty");
  for (const GaitSpec& g : data.gaits) {
    parse_gait(g.kind);
    if (g.cycles < 1) throw ConfigError("data.gaits: cycles must be >= 1 for '" + g.kind + "'");
  }
  character.validate();
  cvae.validate();
  if (train.epochs < 0 || train.checkpoint_every < 1 || train.workers < 1) {
    throw ConfigError("train: epochs >= 0, checkpoint_every >= 1 and workers >= 1 required");
  }
  task.validate();
  if (mpc.candidates < 1 || mpc.horizon < 1) throw ConfigError("mpc: candidates and horizon must be >= 1");
  if (eval.steps < 1 || eval.seeds < 1 || eval.every < 1 || eval.suite_steps < 1) {
    throw ConfigError("eval: steps, seeds, every and suite_steps must be >= 1");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json gaits = nlohmann::json::array();
  for (const GaitSpec& g : data.gaits) {
    gaits.push_back({{"kind", g.kind}, {"cycles", g.cycles}, {"skill", g.skill}, {"params", g.params}});
  }
  return {{"seed", seed},
          {"dataset", dataset},
          {"run_dir", run_dir},
          {"data", {{"gaits", gaits}, {"mirror", data.mirror}}},
          {"character", character.to_json()},
          {"cvae", cvae.to_json()},
          {"world_model", world_model.to_json()},
          {"train",
           {{"epochs", train.epochs},
            {"checkpoint_every", train.checkpoint_every},
            {"workers", train.workers}}},
          {"task", task.to_json()},
          {"skill", skill.to_json()},
          {"mpc", {{"candidates", mpc.candidates}, {"horizon", mpc.horizon}}},
          {"eval",
           {{"clip", eval.clip},
            {"steps", eval.steps},
            {"seeds", eval.seeds},
            {"goals_csv", eval.goals_csv},
            {"goal", goal_to_json(eval.goal)},
            {"every", eval.every},
            {"suite_steps", eval.suite_steps}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  ConfigReader r(j, "config");
  r.get("seed", c.seed).get("dataset", c.dataset).get("run_dir", c.run_dir);
  if (r.has("data")) {
    ConfigReader d(r.at("data"), "data");
    d.get("mirror", c.data.mirror);
    if (d.has("gaits")) {
      c.data.gaits.clear();
      const nlohmann::json& arr = d.at("gaits");
      if (!arr.is_array()) throw ConfigError("data.gaits: expected an array");
      for (const auto& e : arr) {
        GaitSpec g;
        ConfigReader gr(e, "data.gaits[]");
        gr.get("kind", g.kind).get("cycles", g.cycles).get("skill", g.skill);
        if (gr.has("params")) g.params = gr.at("params");
        gr.finish();
        c.data.gaits.push_back(g);
      }
    }
    d.finish();
  }
  if (r.has("character")) c.character = CharacterSpec::from_json(r.at("character"));
  if (r.has("cvae")) c.cvae = CvaeConfig::from_json(r.at("cvae"));
  if (r.has("world_model")) c.world_model = WorldModelConfig::from_json(r.at("world_model"));
  if (r.has("train")) {
    ConfigReader t(r.at("train"), "train");
    t.get("epochs", c.train.epochs)
        .get("checkpoint_every", c.train.checkpoint_every)
        .get("workers", c.train.workers)
        .finish();
  }
  if (r.has("task")) c.task = TaskTrainConfig::from_json(r.at("task"));
  if (r.has("skill")) c.skill = SkillTrainConfig::from_json(r.at("skill"));
  if (r.has("mpc")) {
    ConfigReader m(r.at("mpc"), "mpc");
    m.get("candidates", c.mpc.candidates).get("horizon", c.mpc.horizon).finish();
  }
  if (r.has("eval")) {
    ConfigReader e(r.at("eval"), "eval");
    e.get("clip", c.eval.clip)
        .get("steps", c.eval.steps)
        .get("seeds", c.eval.seeds)
        .get("goals_csv", c.eval.goals_csv)
        .get("every", c.eval.every)
        .get("suite_steps", c.eval.suite_steps);
    if (e.has("goal")) c.eval.goal = goal_from_json(e.at("goal"));
    e.finish();
  }
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) { return RunConfig::from_json(read_json(path)); }

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key.path=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back())) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  (*node)[parts.back()] = value;
}

Dataset build_dataset(const DataConfig& cfg, const CharacterSpec& spec) {
  if (cfg.gaits.empty()) throw ConfigError("data.gaits is empty; nothing to generate");
  Dataset d;
  std::map<std::string, int> seen;
  for (const GaitSpec& g : cfg.gaits) {
    const GaitKind kind = parse_gait(g.kind);
    const GaitParams p = GaitParams::from_json(g.params, default_gait_params(kind));
    MotionClip c = generate_gait(kind, g.cycles, spec, p);
    c.skill = g.skill.empty() ? g.kind : g.skill;
    const int repeat = seen[c.name]++;
    if (repeat > 0) c.name += "_" + std::to_string(repeat);
    d.clips.push_back(c);
    if (cfg.mirror) d.clips.push_back(mirror(c));
  }
  return d;
}

std::vector<TaskGoal> heading_goal_suite() {
  std::vector<TaskGoal> goals;
  for (int k = 1; k <= 8; ++k) {
    TaskGoal g;
    g.tag = TaskTag::Heading;
    g.heading = 0;
    g.speed = 0.1 * k;
    goals.push_back(g);
  }
  return goals;
}

const TaskGoal& GoalScript::at(int step) const {
  if (goals.empty()) throw ConfigError("goal script is empty");
  std::size_t k = 0;
  while (k + 1 < steps.size() && steps[k + 1] <= step) ++k;
  return goals[k];
}

GoalScript read_goal_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open goal script '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("step,tag,height_sign,heading,speed,direction,skill", 0) != 0) {
    throw DataError("'" + path + "': expected header step,tag,height_sign,heading,speed,direction,skill");
  }
  GoalScript s;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw DataError("'" + path + "' line " + std::to_string(lineno) + ": 7 fields expected");
    try {
      TaskGoal g;
      const int step = std::stoi(f[0]);
      g.tag = task_tag_from_string(f[1]);
      g.height_sign = std::stod(f[2]);
      g.heading = wrap_angle(std::stod(f[3]));
      g.speed = std::stod(f[4]);
      g.direction = wrap_angle(std::stod(f[5]));
      g.skill = std::stoi(f[6]);
      if (!s.steps.empty() && step <= s.steps.back()) throw DataError("steps must increase");
      s.steps.push_back(step);
      s.goals.push_back(g);
    } catch (const std::logic_error& e) {
      throw DataError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (s.goals.empty() || s.steps[0] != 0) throw DataError("'" + path + "': the first goal must start at step 0");
  return s;
}

// ------------------------------------------------------------ commands

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  const Dataset d = build_dataset(cfg.data, cfg.character);
  const fs::path out(out_dir);
  const fs::path tmp = out.string() + ".partial";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  write_dataset(tmp.string(), d);
  fs::remove_all(out, ec);
  fs::rename(tmp, out, ec);
  if (ec) throw IoError("cannot move dataset into '" + out.string() + "': " + ec.message());
}

std::string latest_checkpoint(const std::string& run_dir) {
  const fs::path p = fs::path(run_dir) / "checkpoints" / "latest";
  std::ifstream in(p);
  if (!in) throw IoError("no checkpoint found: '" + p.string() + "' is missing");
  std::string name;
  std::getline(in, name);
  const fs::path dir = fs::path(run_dir) / "checkpoints" / name;
  if (name.empty() || !fs::is_directory(dir)) throw IoError("checkpoint directory '" + dir.string() + "' is missing");
  return dir.string();
}

namespace {

nlohmann::json effective_config(const RunConfig& cfg) {
  nlohmann::json j = cfg.to_json();
  j["dataset"] = fs::absolute(cfg.dataset).lexically_normal().string();
  j["run_dir"] = fs::absolute(cfg.run_dir).lexically_normal().string();
  return j;
}

void echo_config(const fs::path& dir, const nlohmann::json& effective, const std::string& command) {
  write_json(dir / "config.json", effective);
  write_json(dir / "run.json", {{"command", command},
                                {"seed", effective.at("seed")},
                                {"version", std::string(version_string())}});
}

// Keeps the metric rows of epochs before `epoch`.
void truncate_metrics(const fs::path& path, int epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("epoch").get<int>() < epoch) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

}  // namespace

void cmd_train_vae(const RunConfig& cfg, bool resume) {
  const Dataset data = read_dataset(cfg.dataset);
  const fs::path run(cfg.run_dir);
  const nlohmann::json effective = effective_config(cfg);
  if (resume) {
    if (!fs::exists(run / "config.json")) {
      throw IoError("cannot resume: '" + (run / "config.json").string() + "' is missing");
    }
    nlohmann::json old = read_json((run / "config.json").string());
    nlohmann::json a = old, b = effective;
    a["train"].erase("epochs");
    b["train"].erase("epochs");
    a["train"].erase("workers");
    b["train"].erase("workers");
    if (a != b) throw ConfigError("cannot resume '" + run.string() + "' with a different config");
  } else if (fs::exists(run / "config.json")) {
    throw ConfigError("run directory '" + run.string() + "' already holds a run; pass --resume");
  }
  make_dirs(run / "checkpoints");
  echo_config(run, effective, "train-vae");

  guarded(run, [&] {
    TrainState st(cfg.character, cfg.cvae, cfg.world_model, data, cfg.seed);
    st.workers = cfg.train.workers;
    if (resume && fs::exists(run / "checkpoints" / "latest")) st.load(latest_checkpoint(run.string()));
    truncate_metrics(run / "metrics.jsonl", st.epoch);
    JsonLines metrics(run / "metrics.jsonl");
    while (st.epoch < cfg.train.epochs) {
      const EpochMetrics m = train_epoch(st, data);
      metrics.write(m.to_json());
      if (st.epoch % cfg.train.checkpoint_every == 0 || st.epoch == cfg.train.epochs) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%06d", st.epoch);
        st.save((run / "checkpoints" / name).string());
        write_text(run / "checkpoints" / "latest", std::string(name) + "\n");
        std::cout << "epoch " << st.epoch << " reward " << fmt(m.reward) << " rec " << fmt(m.rec)
                  << " kl " << fmt(m.kl) << " wm " << fmt(m.wm_loss) << std::endl;
      }
    }
  });
}

LoadedRun load_vae_run(const std::string& run_dir) {
  LoadedRun r;
  r.cfg = load_run_config((fs::path(run_dir) / "config.json").string());
  r.data = read_dataset(r.cfg.dataset);
  r.checkpoint_dir = latest_checkpoint(run_dir);
  r.state = TrainState(r.cfg.character, r.cfg.cvae, r.cfg.world_model, r.data, r.cfg.seed);
  r.state.load(r.checkpoint_dir);
  return r;
}

void cmd_train_task(const RunConfig& cfg, const std::string& vae_run, const std::string& out_dir) {
  LoadedRun run = load_vae_run(vae_run);
  const auto hashes = checkpoint_hashes(run.checkpoint_dir);
  ControlVae& vae = run.state.vae;
  WorldModel& wm = run.state.wm;
  const std::uint64_t vae_hash = parameter_hash(vae.parameters());
  const std::uint64_t wm_hash = parameter_hash(wm.parameters());
  const CharacterSpec& spec = run.cfg.character;
  const fs::path out(out_dir);
  make_dirs(out);
  nlohmann::json effective = effective_config(cfg);
  effective["source"] = {{"vae_run", fs::absolute(vae_run).lexically_normal().string()},
                         {"checkpoint", run.checkpoint_dir},
                         {"hashes", hashes}};
  echo_config(out, effective, "train-task");

  guarded(out, [&] {
    const std::uint64_t seed = cfg.seed;
    const SimState start = run.data.clips.at(0).frames.at(0);
    nlohmann::json report = {{"tag", to_string(cfg.task.tag)}, {"windows", nlohmann::json::array()}};
    JsonLines metrics(out / "metrics.jsonl");
    if (cfg.task.tag == TaskTag::Skill) {
      SkillTrainer tr(vae, wm, run.data, spec, cfg.skill, seed);
      const int iters = cfg.skill.task.iterations;
      double acc = 0;
      int n = 0;
      for (int i = 0; i < iters; ++i) {
        const SkillIterMetrics m = tr.iterate();
        metrics.write(m.to_json());
        acc += m.class_accuracy;
        ++n;
        if ((i + 1) % cfg.eval.every == 0 || i + 1 == iters) {
          report["windows"].push_back({{"iteration", i + 1}, {"classifier_accuracy", acc / n}});
          acc = 0;
          n = 0;
        }
      }
      report["skills"] = tr.skill_names();
      const nlohmann::json meta = {{"tag", "skill"},
                                   {"skills", tr.skills()},
                                   {"skill_names", tr.skill_names()},
                                   {"hidden", cfg.skill.task.hidden}};
      save_checkpoint((out / "task_policy.ckpt").string(), tr.policy().parameters(), nullptr, meta);
      save_checkpoint((out / "discriminator.ckpt").string(), tr.discriminator().parameters(), nullptr, meta);
      save_checkpoint((out / "classifier.ckpt").string(), tr.classifier().parameters(), nullptr, meta);
    } else {
      TaskTrainer tr(vae, wm, run.data, spec, cfg.task, seed);
      const std::vector<TaskGoal> suite = suite_for(cfg.task.tag, 0);
      report["baseline"] = evaluation_json(0, evaluate_goals(vae, nullptr, start, suite, spec,
                                                              cfg.eval.suite_steps, seed, cfg.task.loss));
      for (int i = 0; i < cfg.task.iterations; ++i) {
        metrics.write(tr.iterate().to_json());
        if ((i + 1) % cfg.eval.every == 0 || i + 1 == cfg.task.iterations) {
          report["windows"].push_back(evaluation_json(
              i + 1, evaluate_goals(vae, &tr.policy(), start, suite, spec, cfg.eval.suite_steps,
                                    seed, cfg.task.loss)));
        }
      }
      const nlohmann::json meta = {{"tag", to_string(cfg.task.tag)}, {"skills", 0}, {"hidden", cfg.task.hidden}};
      save_checkpoint((out / "task_policy.ckpt").string(), tr.policy().parameters(), nullptr, meta);
    }
    const bool frozen = checkpoint_hashes(run.checkpoint_dir) == hashes &&
                        parameter_hash(vae.parameters()) == vae_hash &&
                        parameter_hash(wm.parameters()) == wm_hash;
    report["source"] = {{"checkpoint", run.checkpoint_dir}, {"hashes", hashes}, {"verified", frozen}};
    write_json(out / "report.json", report);
    if (!frozen) throw DataError("upstream checkpoints changed during task training");
  });
}

namespace {

struct LoadedTaskPolicy {
  TaskPolicyNet net;
  TaskTag tag = TaskTag::Heading;
  int skills = 0;
};

LoadedTaskPolicy load_task_policy(const std::string& task_run, ControlVae& vae) {
  const std::string path = (fs::path(task_run) / "task_policy.ckpt").string();
  if (!fs::exists(path)) throw IoError("task policy checkpoint '" + path + "' is missing");
  const Checkpoint ck = read_checkpoint(path);
  LoadedTaskPolicy p;
  try {
    p.tag = task_tag_from_string(ck.meta.at("tag").get<std::string>());
    p.skills = ck.meta.at("skills").get<int>();
    Rng rng(0);
    p.net = TaskPolicyNet(p.tag == TaskTag::Skill ? "skill" : "task", goal_dim(p.tag, p.skills),
                          ck.meta.at("hidden").get<std::vector<int>>(), vae.config().latent,
                          vae.sigma_latent(), rng);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': " + e.what());
  }
  apply_checkpoint(ck, p.net.parameters());
  return p;
}

}  // namespace

void cmd_eval(const RunConfig& cfg, const std::string& mode, const std::string& vae_run,
              const std::string& task_run, const std::string& out_dir) {
  if (mode != "track" && mode != "random-sample" && mode != "mpc" && mode != "task") {
    throw ConfigError("unknown eval mode '" + mode + "' (track, random-sample, mpc, task)");
  }
  if (mode == "task" && task_run.empty()) throw ConfigError("eval --mode task needs --task-run");
  LoadedRun run = load_vae_run(vae_run);
  ControlVae& vae = run.state.vae;
  const CharacterSpec& spec = run.cfg.character;
  const double dt = spec.control_dt();
  const fs::path out(out_dir);
  make_dirs(out);
  echo_config(out, effective_config(cfg), "eval " + mode);

  guarded(out, [&] {
    std::ostringstream csv;
    nlohmann::json report = {{"mode", mode}, {"checkpoint", run.checkpoint_dir}};

    if (mode == "track") {
      int ci = 0;
      if (!cfg.eval.clip.empty()) {
        ci = -1;
        for (int i = 0; i < run.data.size(); ++i)
          if (run.data.clips[i].name == cfg.eval.clip) ci = i;
        if (ci < 0) throw ConfigError("eval.clip '" + cfg.eval.clip + "' is not in the dataset");
      }
      const MotionClip& clip = run.data.clips[ci];
      const int steps = std::min(cfg.eval.steps, clip.frame_count() - 1);
      Rng rng = Rng::stream(cfg.seed, "eval.track");
      const TrackingResult tr = track_clip(vae, clip, spec, run.cfg.cvae, steps, rng, true);
      csv << "step,time," << kRootHeader << ",ref_x,ref_y,root_error,reward\n";
      double err = 0, rew = 0;
      for (std::size_t t = 0; t < tr.states.size(); ++t) {
        const BodyState& q = clip.frames[t].body[0];
        csv << t << "," << fmt(t * dt) << "," << root_fields(tr.states[t], spec) << "," << fmt(q.x)
            << "," << fmt(q.y) << "," << fmt(tr.root_error[t]) << "," << fmt(tr.reward[t]) << "\n";
        if (t > 0) {
          err += tr.root_error[t];
          rew += tr.reward[t];
        }
      }
      report["clip"] = clip.name;
      report["steps"] = tr.steps;
      report["fell"] = tr.fell;
      report["mean_root_error"] = tr.steps ? err / tr.steps : 0.0;
      report["mean_reward"] = tr.steps ? rew / tr.steps : 0.0;
    } else if (mode == "random-sample") {
      csv << "rollout,step,time," << kRootHeader << "\n";
      int falls = 0;
      std::vector<double> travel;
      for (int k = 0; k < cfg.eval.seeds; ++k) {
        Rng rng = Rng::stream(cfg.seed + static_cast<std::uint64_t>(k), "eval.random");
        bool fell = false;
        const auto states = random_walk(vae, run.data.clips[0].frames[0], spec, cfg.eval.steps, rng, &fell);
        for (std::size_t t = 0; t < states.size(); ++t) {
          csv << k << "," << t << "," << fmt(t * dt) << "," << root_fields(states[t], spec) << "\n";
        }
        falls += fell;
        travel.push_back(states.back().body[0].x - states.front().body[0].x);
      }
      report["rollouts"] = cfg.eval.seeds;
      report["steps"] = cfg.eval.steps;
      report["falls"] = falls;
      report["travel"] = travel;
    } else {
      std::optional<GoalScript> script;
      if (!cfg.eval.goals_csv.empty()) script = read_goal_script(cfg.eval.goals_csv);
      std::optional<LoadedTaskPolicy> policy;
      TaskTag tag = cfg.task.tag;
      int skills = 0;
      if (mode == "task") {
        policy = load_task_policy(task_run, vae);
        tag = policy->tag;
        skills = policy->skills;
      }
      if (tag == TaskTag::Skill && mode == "mpc") throw ConfigError("mpc mode does not support skill goals");
      const int latent = vae.config().latent;
      csv << "episode,step,time," << kRootHeader << ",tag,height_sign,heading,speed,direction,skill,task_loss";
      if (mode == "mpc") csv << ",best";
      for (int k = 0; k < latent; ++k) csv << ",z" << k;
      csv << "\n";
      JsonLines episodes(out / "episodes.jsonl");
      double total = 0;
      int falls = 0;
      for (int e = 0; e < cfg.eval.seeds; ++e) {
        Rng rng = Rng::stream(cfg.seed + static_cast<std::uint64_t>(e), "eval." + mode);
        SimState s = run.data.clips[0].frames[0];
        double loss_sum = 0, speed_err = 0;
        bool fell = false;
        int done = 0;
        for (int t = 0; t < cfg.eval.steps; ++t) {
          TaskGoal g = script ? script->at(t) : cfg.eval.goal;
          if (!script) g.tag = tag;
          if (g.tag != tag) throw ConfigError("goal script tag '" + to_string(g.tag) + "' does not match the controller");
          const LocalState ls = to_local(s);
          Tensor z;
          int best = -1;
          if (mode == "mpc") {
            const MpcResult r = mpc_plan(s, vae, run.state.wm, g, cfg.mpc, rng, nullptr, cfg.task.loss);
            z = r.z;
            best = r.best;
          } else {
            z = policy->net.sample(vae, ls, g, skills, rng);
          }
          const Action a = vae.policy_act(ls, z, rng, true);
          SimState next;
          try {
            next = step(s, a, spec);
          } catch (const SimulationDiverged&) {
            fell = true;
            break;
          }
          const double l = task_loss(tag, s, next, g, cfg.task.loss);
          loss_sum += l;
          speed_err += std::fabs(g.speed - next.body[0].vx * std::cos(facing_angle(next)));
          ++done;
          if (next.body[0].y < cfg.task.loss.fall_height) fell = true;
          csv << e << "," << t + 1 << "," << fmt((t + 1) * dt) << "," << root_fields(next, spec) << ","
              << goal_csv_fields(g) << "," << fmt(l);
          if (mode == "mpc") csv << "," << best;
          for (int k = 0; k < latent; ++k) csv << "," << fmt(z(0, k));
          csv << "\n";
          s = next;
        }
        const double mean_loss = done ? loss_sum / done : 0.0;
        episodes.write({{"episode", e},
                        {"steps", done},
                        {"mean_loss", mean_loss},
                        {"fell", fell},
                        {"mean_speed_error", done ? speed_err / done : 0.0}});
        total += mean_loss;
        falls += fell;
      }
      report["tag"] = to_string(tag);
      report["episodes"] = cfg.eval.seeds;
      report["mean_loss"] = total / cfg.eval.seeds;
      report["falls"] = falls;
    }
    write_text(out / "trajectory.csv", csv.str());
    write_json(out / "report.json", report);
  });
}

nlohmann::json cmd_inspect_checkpoint(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t count = 0;
  for (const auto& e : ck.tensors) {
    double sq = 0;
    for (Real v : e.value.data) sq += static_cast<double>(v) * v;
    tensors.push_back({{"name", e.name}, {"shape", {e.value.rows, e.value.cols}}, {"l2", std::sqrt(sq)}});
    count += e.value.data.size();
  }
  nlohmann::json j = {{"path", path},
                      {"hash", file_hash(path)},
                      {"parameters", count},
                      {"tensors", tensors},
                      {"meta", ck.meta}};
  if (ck.optimizer) {
    j["optimizer"] = {{"step", ck.optimizer->step}, {"lr", ck.optimizer->lr}};
  } else {
    j["optimizer"] = nullptr;
  }
  return j;
}

// ------------------------------------------------------------ entry point

int cli_main(int argc, char** argv) {
  CLI::App app{"Desk-scale ControlVAE on a planar character"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)");
    sub->add_option("--set", overrides, "override a config key: key.path=value");
    sub->add_option("--seed", seed, "root seed");
  };

  std::string out, vae_run, task_run, mode, task_tag, ablation, goals, clip, ckpt_path;
  std::optional<int> epochs, workers, iterations, steps, seeds;
  bool resume = false;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic gait dataset");
  common(gen);
  gen->add_option("--out", out, "dataset directory (default: config dataset)");

  CLI::App* tv = app.add_subcommand("train-vae", "train the ControlVAE and world model");
  common(tv);
  tv->add_option("--run-dir", out, "run directory (default: config run_dir)");
  tv->add_option("--epochs", epochs);
  tv->add_option("--workers", workers, "parallel simulators for collection");
  tv->add_option("--ablation", ablation, "standard-prior")->check(CLI::IsMember({"standard-prior"}));
  tv->add_flag("--resume", resume, "continue from the latest checkpoint");

  CLI::App* tt = app.add_subcommand("train-task", "train a task controller on a frozen ControlVAE");
  common(tt);
  tt->add_option("--vae-run", vae_run)->required();
  tt->add_option("--out", out)->required();
  tt->add_option("--task", task_tag, "height, heading, steering or skill");
  tt->add_option("--iterations", iterations);

  CLI::App* ev = app.add_subcommand("eval", "evaluate controllers in the true simulator");
  common(ev);
  ev->add_option("--mode", mode, "track, random-sample, mpc or task")->required();
  ev->add_option("--vae-run", vae_run)->required();
  ev->add_option("--task-run", task_run);
  ev->add_option("--out", out)->required();
  ev->add_option("--goals", goals, "goal script CSV");
  ev->add_option("--steps", steps);
  ev->add_option("--seeds", seeds);
  ev->add_option("--clip", clip);
  ev->add_option("--task", task_tag, "goal type for mpc mode");

  CLI::App* ic = app.add_subcommand("inspect-checkpoint", "print a checkpoint summary as JSON");
  ic->add_option("path", ckpt_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (ic->parsed()) {
      std::cout << cmd_inspect_checkpoint(ckpt_path).dump(2) << std::endl;
      return kExitOk;
    }
    nlohmann::json j = config_path.empty() ? RunConfig{}.to_json()
                                           : RunConfig::from_json(read_json(config_path)).to_json();
    for (const std::string& o : overrides) apply_override(j, o);
    if (seed) j["seed"] = *seed;
    if (epochs) j["train"]["epochs"] = *epochs;
    if (workers) j["train"]["workers"] = *workers;
    if (ablation == "standard-prior") j["cvae"]["standard_prior"] = true;
    if (!task_tag.empty()) j["task"]["tag"] = task_tag;
    if (iterations) {
      j["task"]["iterations"] = *iterations;
      j["skill"]["task"]["iterations"] = *iterations;
    }
    if (steps) j["eval"]["steps"] = *steps;
    if (seeds) j["eval"]["seeds"] = *seeds;
    if (!clip.empty()) j["eval"]["clip"] = clip;
    if (!goals.empty()) j["eval"]["goals_csv"] = goals;
    if (tv->parsed() && !out.empty()) j["run_dir"] = out;
    RunConfig cfg = RunConfig::from_json(j);

    if (gen->parsed()) {
      cmd_gen_data(cfg, out.empty() ? cfg.dataset : out);
    } else if (tv->parsed()) {
      cmd_train_vae(cfg, resume);
    } else if (tt->parsed()) {
      cmd_train_task(cfg, vae_run, out);
    } else if (ev->parsed()) {
      cmd_eval(cfg, mode, vae_run, task_run, out);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << std::endl;
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  }
}

CONTROLVAE_NAMESPACE_END
