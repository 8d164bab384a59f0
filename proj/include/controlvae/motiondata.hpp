#pragma once

#include <deque>
#include <json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "controlvae/sim2d.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Kinematic reference sequence. Frames are full SimStates; velocities come
// from finite differences of the poses.
struct MotionClip {
  std::string name;
  double fps = 20;
  std::vector<SimState> frames;
  std::string skill;

  int frame_count() const { return static_cast<int>(frames.size()); }
  double duration() const { return (frame_count() - 1) / fps; }
  void validate() const;
};

enum class GaitKind { Walk, Hop, Stand, Crouch };

GaitKind parse_gait(const std::string& name);
std::string gait_name(GaitKind kind);

struct GaitParams {
  double period = 1.0;       // seconds per cycle
  double duty = 0.6;         // walk: stance fraction per leg
  double speed = 0.6;        // forward root speed, m/s
  double hip_height = 0.85;
  double step_height = 0.08; // walk swing clearance
  double lean = -0.05;       // torso angle; negative leans forward
  double flight = 0.2;       // hop: airborne time per cycle
  double foot_spread = 0.15; // stand/crouch foot offset from the hip, hop half this
  double low_hip = 0.25;     // crouch bottom
  double low_lean = -0.8;    // crouch torso angle at the bottom
  double phase = 0;          // cycle phase offset in [0, 1)
  double fps = 20;

  nlohmann::json to_json() const;
  static GaitParams from_json(const nlohmann::json& j, GaitParams base);
};

GaitParams default_gait_params(GaitKind kind);

// Pose (zero velocities) of a gait at time t.
SimState gait_pose(GaitKind kind, const GaitParams& p, const CharacterSpec& spec, double t);

// cycles * period * fps frames; velocities are central differences of the
// analytic pose one frame either side.
MotionClip generate_gait(GaitKind kind, int cycles, const CharacterSpec& spec,
                         const GaitParams& params);
MotionClip generate_gait(const std::string& kind, int cycles, const CharacterSpec& spec);

// Swaps the left and right leg channels. In the plane the lateral axis is
// out of plane, so no coordinate is negated.
SimState mirror_state(const SimState& s);
Action mirror_action(const Action& a);
MotionClip mirror(const MotionClip& clip);

MotionClip resample(const MotionClip& clip, double fps);

// Horizontal shift of a reference frame (references are re-anchored when
// the tracker switches clips).
SimState shift_x(const SimState& s, double dx);

void write_clip_csv(const std::string& path, const MotionClip& clip);
MotionClip read_clip_csv(const std::string& path);

struct Dataset {
  std::vector<MotionClip> clips;

  bool empty() const { return clips.empty(); }
  int size() const { return static_cast<int>(clips.size()); }
  // Skill labels in order of first appearance.
  std::vector<std::string> skills() const;
  int skill_id(int clip) const;
  int total_frames() const;
};

// Writes every clip as CSV plus manifest.json into `dir`.
void write_dataset(const std::string& dir, const Dataset& data);
Dataset read_dataset(const std::string& dir);

double reward(const LocalState& sim, const LocalState& ref, const ReconWeights& w,
              double temperature = 20);

// Position of a simulated state inside the dataset.
struct FrameRef {
  int clip = 0;
  int frame = 0;
  double x_offset = 0;   // horizontal shift applied to the clip frame
};

class ValueTable {
 public:
  ValueTable() = default;
  explicit ValueTable(const std::vector<int>& frame_counts, double alpha = 0.1);
  explicit ValueTable(const Dataset& data, double alpha = 0.1);

  double alpha() const { return alpha_; }
  void set_alpha(double a) { alpha_ = a; }
  int clip_count() const { return static_cast<int>(values_.size()); }
  int frame_count(int clip) const { return static_cast<int>(values_.at(clip).size()); }
  int size() const;

  double value(int clip, int frame) const;
  void set_value(int clip, int frame, double v);
  // Sampling weight 1 / max(0.01, V).
  double weight(int clip, int frame) const;
  double probability(int clip, int frame) const;

  std::pair<int, int> sample(Rng& rng) const;

  nlohmann::json to_json() const;
  static ValueTable from_json(const nlohmann::json& j);

 private:
  void check(int clip, int frame) const;
  void rebuild() const;

  double alpha_ = 0.1;
  std::vector<std::vector<double>> values_;
  mutable std::vector<double> cumulative_;
  mutable bool dirty_ = true;
};

// Discounted returns of one trajectory blended into the table. rewards[t]
// belongs to the state at refs[t]; `bootstrap` is the value after the last
// state.
void update_values(ValueTable& table, std::span<const double> rewards,
                   std::span<const FrameRef> refs, double gamma, double bootstrap);

std::pair<int, int> sample_start_frame(const ValueTable& table, Rng& rng);

struct Trajectory {
  std::vector<SimState> states;   // T + 1
  std::vector<Action> actions;    // T
  std::vector<FrameRef> refs;     // reference frame of every state
  std::vector<double> rewards;    // per state, rewards[0] is the start
  bool fell = false;              // ended by the head-error rule

  int transitions() const { return static_cast<int>(actions.size()); }
};

// Replay store of whole trajectories. Capacity and staging sizes count
// transitions.
class RolloutBuffer {
 public:
  RolloutBuffer() = default;
  RolloutBuffer(int capacity, int staging_target);

  void stage(Trajectory t);
  int staged_states() const { return staged_count_; }
  bool staging_full() const { return staged_count_ >= staging_target_; }
  // Moves staged trajectories in, dropping the oldest stored ones whole
  // until the capacity holds.
  void merge();

  int stored_states() const { return stored_count_; }
  int capacity() const { return capacity_; }
  int staging_target() const { return staging_target_; }
  const std::deque<Trajectory>& trajectories() const { return stored_; }
  const std::vector<Trajectory>& staged() const { return staging_; }

  // (trajectory, step) with at least `horizon` transitions after it,
  // uniform over all such starts.
  std::pair<int, int> sample_window(int horizon, Rng& rng) const;
  int window_count(int horizon) const;

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  int capacity_ = 5000;
  int staging_target_ = 512;
  std::deque<Trajectory> stored_;
  std::vector<Trajectory> staging_;
  int stored_count_ = 0;
  int staged_count_ = 0;
};

CONTROLVAE_NAMESPACE_END
