#include "controlvae/sim2d.hpp"

#include <Eigen/Dense>
#include <cmath>

CONTROLVAE_NAMESPACE_BEGIN

namespace {

using Vec15 = Eigen::Matrix<double, 3 * kBodies, 1>;
using Mat15 = Eigen::Matrix<double, 3 * kBodies, 3 * kBodies>;
constexpr int kDof = 3 * kBodies;
constexpr int kCons = 2 * kJoints;

Vec2 rotate(Vec2 v, double th) {
  const double c = std::cos(th), s = std::sin(th);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

// d/dtheta of R(theta) v, i.e. the rotated vector turned by +90 degrees.
Vec2 perp(Vec2 v) { return {-v.y, v.x}; }

struct ContactSite {
  int body;
  Vec2 local;
};

std::vector<ContactSite> contact_sites(const CharacterSpec& spec) {
  const double h0 = spec.length[0] / 2;
  return {{0, {0, h0}}, {0, {0, -h0}},
          {1, {0, -spec.length[1] / 2}}, {2, {0, -spec.length[2] / 2}},
          {3, {0, -spec.length[3] / 2}}, {4, {0, -spec.length[4] / 2}}};
}

Vec15 positions(const SimState& s) {
  Vec15 q;
  for (int b = 0; b < kBodies; ++b) q.segment<3>(3 * b) << s.body[b].x, s.body[b].y, s.body[b].theta;
  return q;
}

Vec15 velocities(const SimState& s) {
  Vec15 u;
  for (int b = 0; b < kBodies; ++b) u.segment<3>(3 * b) << s.body[b].vx, s.body[b].vy, s.body[b].omega;
  return u;
}

// Joint constraint values C(q) (anchor of parent minus anchor of child).
Eigen::Matrix<double, kCons, 1> constraint(const Vec15& q, const std::array<Joint, kJoints>& joints) {
  Eigen::Matrix<double, kCons, 1> c;
  for (int j = 0; j < kJoints; ++j) {
    const Joint& J = joints[j];
    const Vec2 ap = rotate(J.anchor_parent, q[3 * J.parent + 2]);
    const Vec2 ac = rotate(J.anchor_child, q[3 * J.child + 2]);
    c[2 * j] = q[3 * J.parent] + ap.x - q[3 * J.child] - ac.x;
    c[2 * j + 1] = q[3 * J.parent + 1] + ap.y - q[3 * J.child + 1] - ac.y;
  }
  return c;
}

Eigen::Matrix<double, kCons, kDof> constraint_jacobian(const Vec15& q,
                                                       const std::array<Joint, kJoints>& joints) {
  Eigen::Matrix<double, kCons, kDof> J = Eigen::Matrix<double, kCons, kDof>::Zero();
  for (int j = 0; j < kJoints; ++j) {
    const Joint& jt = joints[j];
    const Vec2 dp = perp(rotate(jt.anchor_parent, q[3 * jt.parent + 2]));
    const Vec2 dc = perp(rotate(jt.anchor_child, q[3 * jt.child + 2]));
    const int p = 3 * jt.parent, c = 3 * jt.child;
    J(2 * j, p) = 1;
    J(2 * j + 1, p + 1) = 1;
    J(2 * j, p + 2) = dp.x;
    J(2 * j + 1, p + 2) = dp.y;
    J(2 * j, c) = -1;
    J(2 * j + 1, c + 1) = -1;
    J(2 * j, c + 2) = -dc.x;
    J(2 * j + 1, c + 2) = -dc.y;
  }
  return J;
}

}  // namespace

std::array<double, kStateDim> SimState::flatten() const {
  std::array<double, kStateDim> v{};
  for (int b = 0; b < kBodies; ++b) {
    const BodyState& s = body[b];
    const int o = 6 * b;
    v[o] = s.x;
    v[o + 1] = s.y;
    v[o + 2] = s.theta;
    v[o + 3] = s.vx;
    v[o + 4] = s.vy;
    v[o + 5] = s.omega;
  }
  return v;
}

SimState SimState::unflatten(std::span<const double> v) {
  if (v.size() != kStateDim) throw ConfigError("SimState::unflatten: expected 30 values");
  SimState s;
  for (int b = 0; b < kBodies; ++b) {
    const int o = 6 * b;
    s.body[b] = {v[o], v[o + 1], v[o + 2], v[o + 3], v[o + 4], v[o + 5]};
  }
  return s;
}

bool SimState::finite() const {
  for (double x : flatten())
    if (!std::isfinite(x)) return false;
  return true;
}

void CharacterSpec::validate() const {
  for (int b = 0; b < kBodies; ++b) {
    if (!(length[b] > 0) || !(mass[b] > 0)) {
      throw ConfigError("character: body " + std::to_string(b) +
                        " needs positive length and mass");
    }
  }
  for (int j = 0; j < kJoints; ++j) {
    if (kp[j] < 0 || kd[j] < 0) throw ConfigError("character: PD gains must be non-negative");
  }
  if (sim_hz <= 0 || control_hz <= 0 || sim_hz % control_hz != 0) {
    throw ConfigError("character: control rate must divide the simulation rate");
  }
  if (ground_stiffness < 0 || ground_damping < 0 || friction_mu < 0 || friction_damping < 0) {
    throw ConfigError("character: contact parameters must be non-negative");
  }
}

double CharacterSpec::total_mass() const {
  double m = 0;
  for (double x : mass) m += x;
  return m;
}

std::array<Joint, kJoints> CharacterSpec::joints() const {
  const double t = length[0] / 2;
  return {Joint{0, 1, {0, -t}, {0, length[1] / 2}},
          Joint{1, 2, {0, -length[1] / 2}, {0, length[2] / 2}},
          Joint{0, 3, {0, -t}, {0, length[3] / 2}},
          Joint{3, 4, {0, -length[3] / 2}, {0, length[4] / 2}}};
}

nlohmann::json CharacterSpec::to_json() const {
  return {{"length", length},
          {"mass", mass},
          {"kp", kp},
          {"kd", kd},
          {"gravity", gravity},
          {"contacts", contacts},
          {"ground_stiffness", ground_stiffness},
          {"ground_damping", ground_damping},
          {"friction_mu", friction_mu},
          {"friction_damping", friction_damping},
          {"sim_hz", sim_hz},
          {"control_hz", control_hz}};
}

CharacterSpec CharacterSpec::from_json(const nlohmann::json& j) {
  CharacterSpec s;
  static const char* keys[] = {"length", "mass", "kp", "kd", "gravity", "contacts",
                               "ground_stiffness", "ground_damping", "friction_mu",
                               "friction_damping", "sim_hz", "control_hz"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError("character: unknown key '" + it.key() + "'");
  }
  try {
    if (j.contains("length")) s.length = j["length"].get<std::array<double, kBodies>>();
    if (j.contains("mass")) s.mass = j["mass"].get<std::array<double, kBodies>>();
    if (j.contains("kp")) s.kp = j["kp"].get<std::array<double, kJoints>>();
    if (j.contains("kd")) s.kd = j["kd"].get<std::array<double, kJoints>>();
    s.gravity = j.value("gravity", s.gravity);
    s.contacts = j.value("contacts", s.contacts);
    s.ground_stiffness = j.value("ground_stiffness", s.ground_stiffness);
    s.ground_damping = j.value("ground_damping", s.ground_damping);
    s.friction_mu = j.value("friction_mu", s.friction_mu);
    s.friction_damping = j.value("friction_damping", s.friction_damping);
    s.sim_hz = j.value("sim_hz", s.sim_hz);
    s.control_hz = j.value("control_hz", s.control_hz);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("character: ") + e.what());
  }
  s.validate();
  return s;
}

double stable_pd_torque(double q, double q_dot, double target, double kp, double kd,
                        double dt) {
  if (!(dt > 0)) throw ConfigError("stable_pd_torque: dt must be positive");
  return -kp * (q + dt * q_dot - target) - kd * q_dot;
}

std::array<double, kJoints> joint_angles(const SimState& s) {
  return {s.body[1].theta - s.body[0].theta, s.body[2].theta - s.body[1].theta,
          s.body[3].theta - s.body[0].theta, s.body[4].theta - s.body[3].theta};
}

std::array<double, kJoints> joint_velocities(const SimState& s) {
  return {s.body[1].omega - s.body[0].omega, s.body[2].omega - s.body[1].omega,
          s.body[3].omega - s.body[0].omega, s.body[4].omega - s.body[3].omega};
}

Vec2 body_point(const BodyState& b, Vec2 local) {
  const Vec2 r = rotate(local, b.theta);
  return {b.x + r.x, b.y + r.y};
}

Vec2 head_position(const SimState& s, const CharacterSpec& spec) {
  return body_point(s.body[0], {0, spec.length[0] / 2});
}

double joint_error(const SimState& s, const CharacterSpec& spec) {
  double worst = 0;
  for (const Joint& j : spec.joints()) {
    const Vec2 a = body_point(s.body[j.parent], j.anchor_parent);
    const Vec2 b = body_point(s.body[j.child], j.anchor_child);
    worst = std::max(worst, std::hypot(a.x - b.x, a.y - b.y));
  }
  return worst;
}

Vec2 linear_momentum(const SimState& s, const CharacterSpec& spec) {
  Vec2 p;
  for (int b = 0; b < kBodies; ++b) {
    p.x += spec.mass[b] * s.body[b].vx;
    p.y += spec.mass[b] * s.body[b].vy;
  }
  return p;
}

Vec2 center_of_mass(const SimState& s, const CharacterSpec& spec) {
  Vec2 c;
  for (int b = 0; b < kBodies; ++b) {
    c.x += spec.mass[b] * s.body[b].x;
    c.y += spec.mass[b] * s.body[b].y;
  }
  const double m = spec.total_mass();
  return {c.x / m, c.y / m};
}

double angular_momentum_about_com(const SimState& s, const CharacterSpec& spec) {
  const Vec2 c = center_of_mass(s, spec);
  const Vec2 p = linear_momentum(s, spec);
  const double m = spec.total_mass();
  double L = 0;
  for (int b = 0; b < kBodies; ++b) {
    const BodyState& B = s.body[b];
    const double rx = B.x - c.x, ry = B.y - c.y;
    const double vx = B.vx - p.x / m, vy = B.vy - p.y / m;
    L += spec.mass[b] * (rx * vy - ry * vx) + spec.inertia(b) * B.omega;
  }
  return L;
}

double lowest_point(const SimState& s, const CharacterSpec& spec) {
  double y = 1e300;
  for (const ContactSite& c : contact_sites(spec)) y = std::min(y, body_point(s.body[c.body], c.local).y);
  return y;
}

SimState forward_kinematics(const CharacterSpec& spec, const RootPose& root,
                            const std::array<double, kJoints>& q,
                            const std::array<double, kJoints>& q_dot) {
  SimState s;
  s.body[0] = {root.x, root.y, root.theta, root.vx, root.vy, root.omega};
  const auto joints = spec.joints();
  for (int j = 0; j < kJoints; ++j) {
    const Joint& J = joints[j];
    const BodyState& P = s.body[J.parent];
    BodyState& C = s.body[J.child];
    C.theta = P.theta + q[j];
    C.omega = P.omega + q_dot[j];
    const Vec2 anchor = body_point(P, J.anchor_parent);
    const Vec2 rp = rotate(J.anchor_parent, P.theta);
    const Vec2 rc = rotate(J.anchor_child, C.theta);
    C.x = anchor.x - rc.x;
    C.y = anchor.y - rc.y;
    // anchor velocity from the parent, then back to the child's centre
    const double avx = P.vx - P.omega * rp.y, avy = P.vy + P.omega * rp.x;
    C.vx = avx + C.omega * rc.y;
    C.vy = avy - C.omega * rc.x;
  }
  return s;
}

SimState rigid_transform(const SimState& s, double phi, Vec2 offset) {
  SimState out = s;
  for (BodyState& b : out.body) {
    const Vec2 p = rotate({b.x, b.y}, phi);
    const Vec2 v = rotate({b.vx, b.vy}, phi);
    b.x = p.x + offset.x;
    b.y = p.y + offset.y;
    b.vx = v.x;
    b.vy = v.y;
    b.theta += phi;
  }
  return out;
}

SimState substep(const SimState& state, const Action& action, const CharacterSpec& spec) {
  const double dt = spec.dt();
  const auto joints = spec.joints();
  const Vec15 q0 = positions(state);
  const Vec15 u0 = velocities(state);

  Vec15 minv, mdiag;
  for (int b = 0; b < kBodies; ++b) {
    mdiag.segment<3>(3 * b) << spec.mass[b], spec.mass[b], spec.inertia(b);
  }
  minv = mdiag.cwiseInverse();

  Vec15 force = Vec15::Zero();
  Mat15 damping = Mat15::Zero();  // forces -damping * u_next, treated implicitly
  for (int b = 0; b < kBodies; ++b) force[3 * b + 1] += spec.mass[b] * spec.gravity;

  // Stable PD: the torque is evaluated at the end-of-step joint velocity,
  //   tau = -kp (q + dt qdot' - target) - kd qdot'
  // so the velocity-dependent part becomes an implicit damper.
  const auto qj = joint_angles(state);
  for (int j = 0; j < kJoints; ++j) {
    const Joint& J = joints[j];
    const double tau0 = -spec.kp[j] * wrap_angle(qj[j] - action[j]);
    const double d = spec.kp[j] * dt + spec.kd[j];
    const int tp = 3 * J.parent + 2, tc = 3 * J.child + 2;
    force[tc] += tau0;
    force[tp] -= tau0;
    damping(tc, tc) += d;
    damping(tp, tp) += d;
    damping(tc, tp) -= d;
    damping(tp, tc) -= d;
  }

  if (spec.contacts) {
    for (const ContactSite& site : contact_sites(spec)) {
      const BodyState& B = state.body[site.body];
      const Vec2 r = rotate(site.local, B.theta);
      const double py = B.y + r.y;
      if (py >= 0) continue;
      const double vx = B.vx - B.omega * r.y, vy = B.vy + B.omega * r.x;
      const double fn = spec.ground_stiffness * (-py) - spec.ground_damping * vy;
      if (fn <= 0) continue;
      // point Jacobian rows for the x and y velocity of the contact site
      Eigen::Matrix<double, 1, kDof> jx = Eigen::Matrix<double, 1, kDof>::Zero(), jy = jx;
      const int o = 3 * site.body;
      jx(o) = 1;
      jx(o + 2) = -r.y;
      jy(o + 1) = 1;
      jy(o + 2) = r.x;
      force += jy.transpose() * (spec.ground_stiffness * (-py));
      damping += spec.ground_damping * jy.transpose() * jy;
      const double ft = spec.friction_damping * vx;
      if (std::fabs(ft) <= spec.friction_mu * fn) {
        damping += spec.friction_damping * jx.transpose() * jx;
      } else {
        force -= jx.transpose() * (spec.friction_mu * fn * (vx > 0 ? 1.0 : -1.0));
      }
    }
  }

  // Velocity update with the joints enforced at velocity level:
  //   [M + dt D   J^T] [u']   [M u + dt f]
  //   [J          0  ] [l ] = [0         ]
  const auto Jc = constraint_jacobian(q0, joints);
  Eigen::Matrix<double, kDof + kCons, kDof + kCons> K =
      Eigen::Matrix<double, kDof + kCons, kDof + kCons>::Zero();
  K.topLeftCorner<kDof, kDof>() = Mat15(mdiag.asDiagonal()) + dt * damping;
  K.topRightCorner<kDof, kCons>() = Jc.transpose();
  K.bottomLeftCorner<kCons, kDof>() = Jc;
  Eigen::Matrix<double, kDof + kCons, 1> rhs = Eigen::Matrix<double, kDof + kCons, 1>::Zero();
  rhs.head<kDof>() = mdiag.cwiseProduct(u0) + dt * force;
  const Eigen::Matrix<double, kDof + kCons, 1> sol = K.partialPivLu().solve(rhs);
  const Vec15 u1 = sol.head<kDof>();

  // Semi-implicit position update, then project back onto the joint
  // manifold. Corrections act along the start-of-step constraint directions
  // (SHAKE), so they are internal impulses applied at coincident anchors and
  // leave linear and angular momentum unchanged.
  const Eigen::Matrix<double, kDof, kCons> W = minv.asDiagonal() * Jc.transpose();
  Vec15 q1 = q0 + dt * u1;
  for (int it = 0; it < 30; ++it) {
    const auto C = constraint(q1, joints);
    if (C.cwiseAbs().maxCoeff() < 1e-13) break;
    const Eigen::Matrix<double, kCons, kCons> S = constraint_jacobian(q1, joints) * W;
    q1 -= W * S.partialPivLu().solve(C);
  }
  const Vec15 uv = (q1 - q0) / dt;

  SimState out;
  for (int b = 0; b < kBodies; ++b) {
    out.body[b] = {q1[3 * b], q1[3 * b + 1], q1[3 * b + 2], uv[3 * b], uv[3 * b + 1], uv[3 * b + 2]};
  }
  if (!out.finite()) throw SimulationDiverged("simulation produced a non-finite state");
  return out;
}

SimState step(const SimState& state, const Action& action, const CharacterSpec& spec) {
  SimState s = state;
  for (int i = 0; i < spec.substeps(); ++i) s = substep(s, action, spec);
  return s;
}

LocalState to_local(const SimState& s) {
  LocalState out{};
  const BodyState& r = s.body[0];
  const double c = std::cos(r.theta), sn = std::sin(r.theta);
  for (int b = 0; b < kBodies; ++b) {
    const BodyState& B = s.body[b];
    const double dx = B.x - r.x, dy = B.y - r.y;
    const double rel = B.theta - r.theta;
    double* o = out.data() + 8 * b;
    o[0] = c * dx + sn * dy;
    o[1] = -sn * dx + c * dy;
    o[2] = std::cos(rel);
    o[3] = std::sin(rel);
    o[4] = c * B.vx + sn * B.vy;
    o[5] = -sn * B.vx + c * B.vy;
    o[6] = B.omega;
    o[7] = B.y;
  }
  out[8 * kBodies] = -sn;
  out[8 * kBodies + 1] = c;
  return out;
}

std::array<double, kLocalDim> local_weight_vector(const ReconWeights& w) {
  std::array<double, kLocalDim> v{};
  for (int b = 0; b < kBodies; ++b) {
    double* o = v.data() + 8 * b;
    o[0] = o[1] = w.pos;
    o[2] = o[3] = w.rot;
    o[4] = o[5] = w.vel;
    o[6] = w.ang_vel;
    o[7] = w.height;
  }
  v[8 * kBodies] = v[8 * kBodies + 1] = w.up;
  return v;
}

double recon_distance(const LocalState& pred, const LocalState& ref, const ReconWeights& w) {
  const auto wv = local_weight_vector(w);
  double d = 0;
  for (int i = 0; i < kLocalDim; ++i) d += wv[i] * std::fabs(pred[i] - ref[i]);
  return d;
}

bool TerminationTracker::update(double head_error) {
  ++length_;
  run_ = head_error > cfg_.max_head_error ? run_ + 1 : 0;
  return length_ > cfg_.max_length || run_ > cfg_.max_error_steps;
}

bool termination_check(std::span<const double> head_errors, int length,
                       const TerminationConfig& cfg) {
  if (length > cfg.max_length) return true;
  int run = 0;
  for (double e : head_errors) {
    run = e > cfg.max_head_error ? run + 1 : 0;
    if (run > cfg.max_error_steps) return true;
  }
  return false;
}

CONTROLVAE_NAMESPACE_END
