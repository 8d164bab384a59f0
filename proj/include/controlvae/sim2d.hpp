#pragma once

#include <array>
#include <json.hpp>
#include <span>
#include <vector>

#include "controlvae/common.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Planar five-link character: body 0 is the torso (floating root), bodies 1
// and 2 the left thigh and shin, bodies 3 and 4 the right thigh and shin.
// Every link points along its local +y axis; an upright link has theta = 0.
constexpr int kBodies = 5;
constexpr int kJoints = 4;        // left hip, left knee, right hip, right knee
constexpr int kStateDim = 6 * kBodies;     // x, y, theta, vx, vy, omega per body
constexpr int kLocalDim = 8 * kBodies + 2;
constexpr int kActionDim = kJoints;

struct Vec2 {
  double x = 0, y = 0;
};

struct BodyState {
  double x = 0, y = 0, theta = 0;
  double vx = 0, vy = 0, omega = 0;
  bool operator==(const BodyState&) const = default;
};

struct SimState {
  std::array<BodyState, kBodies> body{};

  std::array<double, kStateDim> flatten() const;
  static SimState unflatten(std::span<const double> v);
  bool finite() const;
  bool operator==(const SimState&) const = default;
};

// Target joint angles (child angle minus parent angle), radians.
using Action = std::array<double, kActionDim>;

// Root-local observation. Per body: local position (2), cos/sin of the
// angle relative to the root (2), local linear velocity (2), angular
// velocity (1), world height (1). Then the root up axis in world frame (2).
using LocalState = std::array<double, kLocalDim>;

struct Joint {
  int parent;
  int child;
  Vec2 anchor_parent;  // body-local
  Vec2 anchor_child;
};

struct CharacterSpec {
  std::array<double, kBodies> length{0.6, 0.45, 0.45, 0.45, 0.45};
  std::array<double, kBodies> mass{20, 7, 4, 7, 4};
  std::array<double, kJoints> kp{400, 400, 400, 400};
  std::array<double, kJoints> kd{50, 50, 50, 50};
  double gravity = -9.81;
  bool contacts = true;
  double ground_stiffness = 1e4;
  double ground_damping = 100;
  double friction_mu = 0.9;
  double friction_damping = 5000;   // tangential damping below the Coulomb bound
  int sim_hz = 120;
  int control_hz = 20;

  void validate() const;
  int substeps() const { return sim_hz / control_hz; }
  double dt() const { return 1.0 / sim_hz; }
  double control_dt() const { return 1.0 / control_hz; }
  double inertia(int b) const { return mass[b] * length[b] * length[b] / 12.0; }
  double total_mass() const;
  std::array<Joint, kJoints> joints() const;

  nlohmann::json to_json() const;
  static CharacterSpec from_json(const nlohmann::json& j);
};

double stable_pd_torque(double q, double q_dot, double target, double kp, double kd,
                        double dt);

// Advances one control period (sim_hz / control_hz substeps) holding the
// action fixed. Throws SimulationDiverged on a non-finite result.
SimState step(const SimState& state, const Action& action, const CharacterSpec& spec);
// One physics substep.
SimState substep(const SimState& state, const Action& action, const CharacterSpec& spec);

std::array<double, kJoints> joint_angles(const SimState& s);
std::array<double, kJoints> joint_velocities(const SimState& s);

struct RootPose {
  double x = 0, y = 1.15, theta = 0;
  double vx = 0, vy = 0, omega = 0;
};
// Builds a state that satisfies every joint constraint from a root pose,
// joint angles and joint velocities.
SimState forward_kinematics(const CharacterSpec& spec, const RootPose& root,
                            const std::array<double, kJoints>& q,
                            const std::array<double, kJoints>& q_dot = {});

Vec2 body_point(const BodyState& b, Vec2 local);
Vec2 head_position(const SimState& s, const CharacterSpec& spec);
// Largest anchor separation over all joints, meters.
double joint_error(const SimState& s, const CharacterSpec& spec);
Vec2 linear_momentum(const SimState& s, const CharacterSpec& spec);
Vec2 center_of_mass(const SimState& s, const CharacterSpec& spec);
double angular_momentum_about_com(const SimState& s, const CharacterSpec& spec);
// Lowest point of any contact site.
double lowest_point(const SimState& s, const CharacterSpec& spec);

// Rotates the whole state by phi about the origin, then translates it.
SimState rigid_transform(const SimState& s, double phi, Vec2 offset);

LocalState to_local(const SimState& s);

// Group weights of the reconstruction distance.
struct ReconWeights {
  double pos = 2, rot = 1, vel = 0.2, ang_vel = 0.1, height = 1, up = 1;
};
std::array<double, kLocalDim> local_weight_vector(const ReconWeights& w);
// Weighted 1-norm distance between two local states.
double recon_distance(const LocalState& pred, const LocalState& ref, const ReconWeights& w);

struct TerminationConfig {
  int max_length = 512;
  double max_head_error = 0.5;
  int max_error_steps = 20;   // consecutive control steps, i.e. one second at 20 Hz
};

// Streaming version of the termination rule.
class TerminationTracker {
 public:
  explicit TerminationTracker(TerminationConfig cfg = {}) : cfg_(cfg) {}
  // Records one control step and its head error; returns true once the
  // trajectory must stop.
  bool update(double head_error);
  int length() const { return length_; }
  int consecutive() const { return run_; }

 private:
  TerminationConfig cfg_;
  int length_ = 0;
  int run_ = 0;
};

bool termination_check(std::span<const double> head_errors, int length,
                       const TerminationConfig& cfg = {});

CONTROLVAE_NAMESPACE_END
