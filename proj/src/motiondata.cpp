#include "controlvae/motiondata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

CONTROLVAE_NAMESPACE_BEGIN

namespace fs = std::filesystem;

void MotionClip::validate() const {
  if (!(fps > 0)) throw DataError("clip '" + name + "': fps must be positive");
  if (frames.size() < 2) throw DataError("clip '" + name + "': needs at least 2 frames");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!frames[i].finite()) {
      throw DataError("clip '" + name + "': non-finite frame " + std::to_string(i));
    }
  }
}

GaitKind parse_gait(const std::string& name) {
  if (name == "walk") return GaitKind::Walk;
  if (name == "hop") return GaitKind::Hop;
  if (name == "stand") return GaitKind::Stand;
  if (name == "crouch") return GaitKind::Crouch;
  throw ConfigError("unknown gait kind '" + name + "' (walk, hop, stand, crouch)");
}

std::string gait_name(GaitKind kind) {
  switch (kind) {
    case GaitKind::Walk: return "walk";
    case GaitKind::Hop: return "hop";
    case GaitKind::Stand: return "stand";
    case GaitKind::Crouch: return "crouch";
  }
  return "?";
}

nlohmann::json GaitParams::to_json() const {
  return {{"period", period}, {"duty", duty}, {"speed", speed},
          {"hip_height", hip_height}, {"step_height", step_height}, {"lean", lean},
          {"flight", flight}, {"foot_spread", foot_spread}, {"low_hip", low_hip},
          {"low_lean", low_lean}, {"phase", phase}, {"fps", fps}};
}

GaitParams GaitParams::from_json(const nlohmann::json& j, GaitParams p) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    double* field = k == "period" ? &p.period
                  : k == "duty" ? &p.duty
                  : k == "speed" ? &p.speed
                  : k == "hip_height" ? &p.hip_height
                  : k == "step_height" ? &p.step_height
                  : k == "lean" ? &p.lean
                  : k == "flight" ? &p.flight
                  : k == "foot_spread" ? &p.foot_spread
                  : k == "low_hip" ? &p.low_hip
                  : k == "low_lean" ? &p.low_lean
                  : k == "phase" ? &p.phase
                  : k == "fps" ? &p.fps
                  : nullptr;
    if (!field) throw ConfigError("gait params: unknown key '" + k + "'");
    *field = it.value().get<double>();
  }
  return p;
}

GaitParams default_gait_params(GaitKind kind) {
  GaitParams p;
  switch (kind) {
    case GaitKind::Walk:
      break;
    case GaitKind::Hop:
      p.period = 0.6;
      p.speed = 0.3;
      p.lean = -0.1;
      break;
    case GaitKind::Stand:
      p.speed = 0;
      p.lean = 0;
      break;
    case GaitKind::Crouch:
      p.period = 2.0;
      p.speed = 0;
      p.lean = 0;
      p.foot_spread = 0.12;
      break;
  }
  return p;
}

namespace {

double smoothstep(double s) { return s * s * (3 - 2 * s); }

struct LegAngles {
  double thigh, shin;
};

// Two-link inverse kinematics with the knee in front of the hip-foot line.
LegAngles leg_ik(double dx, double dy, double l1, double l2) {
  double r = std::hypot(dx, dy);
  r = std::clamp(r, std::fabs(l1 - l2) + 1e-6, (l1 + l2) * (1 - 1e-6));
  const double phi = std::atan2(dx, -dy);
  const double c = (l1 * l1 + r * r - l2 * l2) / (2 * l1 * r);
  const double thigh = phi + std::acos(std::clamp(c, -1.0, 1.0));
  const double kx = l1 * std::sin(thigh), ky = -l1 * std::cos(thigh);
  const double shin = std::atan2(dx - kx, -(dy - ky));
  return {thigh, shin};
}

struct Keyframe {
  double hx, hy, lean;
  Vec2 foot[2];  // left, right (world)
};

Keyframe walk_frame(const GaitParams& p, double t) {
  Keyframe k{};
  k.hx = p.speed * t;
  k.hy = p.hip_height;
  k.lean = p.lean;
  const double stride = p.speed * p.period;
  for (int leg = 0; leg < 2; ++leg) {
    const double offset = leg == 0 ? 0.0 : 0.5;
    const double u = t / p.period + offset + p.phase;
    const double cyc = std::floor(u);
    const double ph = u - cyc;
    // the hip passes over the stance foot at mid-stance
    const double x0 = stride * (cyc + p.duty / 2 - offset - p.phase);
    if (ph < p.duty) {
      k.foot[leg] = {x0, 0};
    } else {
      const double s = (ph - p.duty) / (1 - p.duty);
      k.foot[leg] = {x0 + stride * smoothstep(s),
                     p.step_height * 0.5 * (1 - std::cos(2 * kPi * s))};
    }
  }
  return k;
}

Keyframe hop_frame(const GaitParams& p, const CharacterSpec& spec, double t) {
  Keyframe k{};
  const double g = -spec.gravity;
  const double ts = p.period - p.flight;
  const double ds = ts / p.period;
  const double v_up = g * p.flight / 2;
  const double dip = v_up * ts / kPi;
  const double u = t / p.period + p.phase;
  const double cyc = std::floor(u);
  const double ph = u - cyc;
  k.hx = p.speed * t;
  k.lean = p.lean;
  const double stride = p.speed * p.period;
  const double x0 = stride * (cyc + ds / 2 - p.phase);
  double foot_x, foot_y = 0;
  if (ph < ds) {
    const double tau = ph * p.period;
    k.hy = p.hip_height - dip * std::sin(kPi * tau / ts);
    foot_x = x0;
  } else {
    const double tau = (ph - ds) * p.period;
    k.hy = p.hip_height + v_up * tau - 0.5 * g * tau * tau;
    foot_x = x0 + stride * smoothstep(tau / p.flight);
    foot_y = k.hy - p.hip_height;
  }
  const double half = p.foot_spread / 2;
  k.foot[0] = {foot_x + half, foot_y};
  k.foot[1] = {foot_x - half, foot_y};
  return k;
}

Keyframe crouch_frame(const GaitParams& p, double t) {
  Keyframe k{};
  const double w = 0.5 * (1 - std::cos(2 * kPi * (t / p.period + p.phase)));
  k.hx = -0.1 * w;  // sit back as the torso leans forward
  k.hy = p.hip_height + (p.low_hip - p.hip_height) * w;
  k.lean = p.lean + (p.low_lean - p.lean) * w;
  k.foot[0] = {p.foot_spread, 0};
  k.foot[1] = {-p.foot_spread, 0};
  return k;
}

SimState pose_from_keyframe(const Keyframe& k, const CharacterSpec& spec) {
  const double a = spec.length[0] / 2;
  RootPose root;
  root.theta = k.lean;
  root.x = k.hx - a * std::sin(k.lean);
  root.y = k.hy + a * std::cos(k.lean);
  const LegAngles l = leg_ik(k.foot[0].x - k.hx, k.foot[0].y - k.hy, spec.length[1], spec.length[2]);
  const LegAngles r = leg_ik(k.foot[1].x - k.hx, k.foot[1].y - k.hy, spec.length[3], spec.length[4]);
  const std::array<double, kJoints> q{l.thigh - k.lean, l.shin - l.thigh,
                                      r.thigh - k.lean, r.shin - r.thigh};
  return forward_kinematics(spec, root, q);
}

}  // namespace

SimState gait_pose(GaitKind kind, const GaitParams& p, const CharacterSpec& spec, double t) {
  switch (kind) {
    case GaitKind::Walk: return pose_from_keyframe(walk_frame(p, t), spec);
    case GaitKind::Hop: return pose_from_keyframe(hop_frame(p, spec, t), spec);
    case GaitKind::Stand: {
      Keyframe k{};
      k.hy = p.hip_height;
      k.lean = p.lean;
      k.foot[0] = {p.foot_spread, 0};
      k.foot[1] = {-p.foot_spread, 0};
      return pose_from_keyframe(k, spec);
    }
    case GaitKind::Crouch: return pose_from_keyframe(crouch_frame(p, t), spec);
  }
  throw ConfigError("bad gait kind");
}

MotionClip generate_gait(GaitKind kind, int cycles, const CharacterSpec& spec,
                         const GaitParams& p) {
  if (cycles < 1) throw ConfigError("generate_gait: cycles must be >= 1");
  if (!(p.fps > 0) || !(p.period > 0)) throw ConfigError("generate_gait: bad fps or period");
  if (kind == GaitKind::Walk && !(p.duty > 0 && p.duty < 1)) {
    throw ConfigError("generate_gait: duty must be in (0, 1)");
  }
  if (kind == GaitKind::Hop && !(p.flight > 0 && p.flight < p.period)) {
    throw ConfigError("generate_gait: flight must be in (0, period)");
  }
  const int n = static_cast<int>(std::lround(cycles * p.period * p.fps));
  if (n < 2) throw ConfigError("generate_gait: clip would have fewer than 2 frames");
  const double h = 1.0 / p.fps;
  MotionClip clip;
  clip.name = gait_name(kind);
  clip.skill = clip.name;
  clip.fps = p.fps;
  clip.frames.resize(n);
  for (int i = 0; i < n; ++i) {
    const double t = i * h;
    SimState s = gait_pose(kind, p, spec, t);
    const SimState a = gait_pose(kind, p, spec, t - h);
    const SimState b = gait_pose(kind, p, spec, t + h);
    for (int k = 0; k < kBodies; ++k) {
      s.body[k].vx = (b.body[k].x - a.body[k].x) / (2 * h);
      s.body[k].vy = (b.body[k].y - a.body[k].y) / (2 * h);
      s.body[k].omega = wrap_angle(b.body[k].theta - a.body[k].theta) / (2 * h);
    }
    clip.frames[i] = s;
  }
  return clip;
}

MotionClip generate_gait(const std::string& kind, int cycles, const CharacterSpec& spec) {
  const GaitKind k = parse_gait(kind);
  return generate_gait(k, cycles, spec, default_gait_params(k));
}

SimState mirror_state(const SimState& s) {
  SimState m = s;
  std::swap(m.body[1], m.body[3]);
  std::swap(m.body[2], m.body[4]);
  return m;
}

Action mirror_action(const Action& a) { return {a[2], a[3], a[0], a[1]}; }

MotionClip mirror(const MotionClip& clip) {
  MotionClip m = clip;
  const std::string suffix = "_mirror";
  if (m.name.size() > suffix.size() &&
      m.name.compare(m.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    m.name.resize(m.name.size() - suffix.size());
  } else {
    m.name += suffix;
  }
  for (SimState& s : m.frames) s = mirror_state(s);
  return m;
}

MotionClip resample(const MotionClip& clip, double fps) {
  if (!(fps > 0)) throw ConfigError("resample: fps must be positive");
  clip.validate();
  MotionClip out = clip;
  out.fps = fps;
  const int n = static_cast<int>(std::floor(clip.duration() * fps + 1e-9)) + 1;
  out.frames.resize(n);
  for (int j = 0; j < n; ++j) {
    const double pos = j * clip.fps / fps;
    int i = static_cast<int>(std::floor(pos));
    double s = pos - i;
    if (s < 1e-9) {
      s = 0;
    } else if (s > 1 - 1e-9) {
      s = 0;
      ++i;
    }
    i = std::min(i, clip.frame_count() - 1);
    if (s == 0) {
      out.frames[j] = clip.frames[i];
      continue;
    }
    const SimState& a = clip.frames[i];
    const SimState& b = clip.frames[i + 1];
    SimState& r = out.frames[j];
    for (int k = 0; k < kBodies; ++k) {
      const BodyState &p = a.body[k], &q = b.body[k];
      r.body[k] = {p.x + s * (q.x - p.x),          p.y + s * (q.y - p.y),
                   p.theta + s * wrap_angle(q.theta - p.theta),
                   p.vx + s * (q.vx - p.vx),       p.vy + s * (q.vy - p.vy),
                   p.omega + s * (q.omega - p.omega)};
    }
  }
  return out;
}

SimState shift_x(const SimState& s, double dx) {
  SimState r = s;
  for (BodyState& b : r.body) b.x += dx;
  return r;
}

// ---- CSV ----

namespace {

const char* kFieldNames[6] = {"x", "y", "theta", "vx", "vy", "omega"};

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_real(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw DataError(where + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

void write_clip_csv(const std::string& path, const MotionClip& clip) {
  clip.validate();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << "# fps=" << format_real(clip.fps) << "\n";
  f << "# name=" << clip.name << "\n";
  f << "frame,time";
  for (int b = 0; b < kBodies; ++b)
    for (const char* n : kFieldNames) f << ",b" << b << "_" << n;
  f << ",skill\n";
  for (int i = 0; i < clip.frame_count(); ++i) {
    f << i << "," << format_real(i / clip.fps);
    for (double v : clip.frames[i].flatten()) f << "," << format_real(v);
    f << "," << clip.skill << "\n";
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

MotionClip read_clip_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open motion file '" + path + "'");
  MotionClip clip;
  clip.fps = 0;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      const std::string val = line.substr(eq + 1);
      if (key == "fps") clip.fps = parse_real(val, where);
      if (key == "name") clip.name = val;
      continue;
    }
    const auto cols = split(line, ',');
    if (!header) {
      if (cols.size() != 3 + kStateDim || cols[0] != "frame") {
        throw DataError(where + ": unexpected header");
      }
      header = true;
      continue;
    }
    if (cols.size() != 3 + kStateDim) throw DataError(where + ": wrong column count");
    std::array<double, kStateDim> v;
    for (int k = 0; k < kStateDim; ++k) v[k] = parse_real(cols[2 + k], where);
    const std::string& skill = cols.back();
    if (clip.frames.empty()) {
      clip.skill = skill;
    } else if (skill != clip.skill) {
      throw DataError(where + ": skill label changes inside a clip");
    }
    clip.frames.push_back(SimState::unflatten(v));
  }
  if (clip.name.empty()) clip.name = fs::path(path).stem().string();
  clip.validate();
  return clip;
}

std::vector<std::string> Dataset::skills() const {
  std::vector<std::string> out;
  for (const MotionClip& c : clips)
    if (std::find(out.begin(), out.end(), c.skill) == out.end()) out.push_back(c.skill);
  return out;
}

int Dataset::skill_id(int clip) const {
  const auto s = skills();
  return static_cast<int>(std::find(s.begin(), s.end(), clips.at(clip).skill) - s.begin());
}

int Dataset::total_frames() const {
  int n = 0;
  for (const MotionClip& c : clips) n += c.frame_count();
  return n;
}

void write_dataset(const std::string& dir, const Dataset& data) {
  if (data.empty()) throw ConfigError("dataset has no clips");
  for (const MotionClip& c : data.clips) c.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  nlohmann::json manifest;
  manifest["clips"] = nlohmann::json::array();
  for (const MotionClip& c : data.clips) {
    const std::string file = c.name + ".csv";
    write_clip_csv((fs::path(dir) / file).string(), c);
    manifest["clips"].push_back(
        {{"name", c.name}, {"file", file}, {"skill", c.skill}, {"frames", c.frame_count()}});
  }
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ofstream f(mpath, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + mpath + "'");
  f << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream f(mpath);
  if (!f) throw IoError("cannot open dataset manifest '" + mpath + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + mpath + "': " + e.what());
  }
  Dataset d;
  for (const auto& entry : manifest.at("clips")) {
    MotionClip c = read_clip_csv((fs::path(dir) / entry.at("file").get<std::string>()).string());
    if (entry.contains("skill")) c.skill = entry["skill"].get<std::string>();
    if (entry.contains("name")) c.name = entry["name"].get<std::string>();
    d.clips.push_back(std::move(c));
  }
  if (d.empty()) throw DataError("'" + mpath + "' lists no clips");
  return d;
}

double reward(const LocalState& sim, const LocalState& ref, const ReconWeights& w,
              double temperature) {
  if (!(temperature > 0)) throw ConfigError("reward temperature must be positive");
  return std::exp(-recon_distance(sim, ref, w) / temperature);
}

// ---- value table ----

ValueTable::ValueTable(const std::vector<int>& frame_counts, double alpha) : alpha_(alpha) {
  if (!(alpha > 0 && alpha <= 1)) throw ConfigError("value blend rate must be in (0, 1]");
  for (int n : frame_counts) {
    if (n < 1) throw DataError("value table: clip without frames");
    values_.emplace_back(n, 0.0);
  }
  if (values_.empty()) throw DataError("value table: no clips");
}

ValueTable::ValueTable(const Dataset& data, double alpha)
    : ValueTable(
          [&] {
            std::vector<int> n;
            for (const MotionClip& c : data.clips) n.push_back(c.frame_count());
            return n;
          }(),
          alpha) {}

int ValueTable::size() const {
  int n = 0;
  for (const auto& v : values_) n += static_cast<int>(v.size());
  return n;
}

void ValueTable::check(int clip, int frame) const {
  if (clip < 0 || clip >= clip_count() || frame < 0 || frame >= frame_count(clip)) {
    throw DataError("value table index (" + std::to_string(clip) + ", " +
                    std::to_string(frame) + ") out of range");
  }
}

double ValueTable::value(int clip, int frame) const {
  check(clip, frame);
  return values_[clip][frame];
}

void ValueTable::set_value(int clip, int frame, double v) {
  check(clip, frame);
  if (!std::isfinite(v)) throw NumericError("value table: non-finite value");
  values_[clip][frame] = v;
  dirty_ = true;
}

double ValueTable::weight(int clip, int frame) const {
  return 1.0 / std::max(0.01, value(clip, frame));
}

void ValueTable::rebuild() const {
  cumulative_.clear();
  double acc = 0;
  for (const auto& clip : values_)
    for (double v : clip) {
      acc += 1.0 / std::max(0.01, v);
      cumulative_.push_back(acc);
    }
  dirty_ = false;
}

double ValueTable::probability(int clip, int frame) const {
  if (dirty_) rebuild();
  return weight(clip, frame) / cumulative_.back();
}

std::pair<int, int> ValueTable::sample(Rng& rng) const {
  if (values_.empty()) throw DataError("value table is empty");
  if (dirty_) rebuild();
  const double u = rng.uniform() * cumulative_.back();
  int flat = static_cast<int>(std::upper_bound(cumulative_.begin(), cumulative_.end(), u) -
                              cumulative_.begin());
  flat = std::min(flat, static_cast<int>(cumulative_.size()) - 1);
  for (int c = 0; c < clip_count(); ++c) {
    if (flat < frame_count(c)) return {c, flat};
    flat -= frame_count(c);
  }
  return {clip_count() - 1, frame_count(clip_count() - 1) - 1};
}

nlohmann::json ValueTable::to_json() const {
  return {{"alpha", alpha_}, {"values", values_}};
}

ValueTable ValueTable::from_json(const nlohmann::json& j) {
  ValueTable t;
  t.alpha_ = j.at("alpha");
  t.values_ = j.at("values").get<std::vector<std::vector<double>>>();
  return t;
}

void update_values(ValueTable& table, std::span<const double> rewards,
                   std::span<const FrameRef> refs, double gamma, double bootstrap) {
  if (rewards.size() != refs.size()) throw DataError("update_values: rewards/refs length mismatch");
  if (!(gamma > 0 && gamma < 1)) throw ConfigError("update_values: gamma must be in (0, 1)");
  for (const FrameRef& r : refs) (void)table.value(r.clip, r.frame);  // range check first
  std::vector<double> ret(rewards.size());
  double g = bootstrap;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    g = rewards[i] + gamma * g;
    ret[i] = g;
  }
  const double a = table.alpha();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double v = table.value(refs[i].clip, refs[i].frame);
    table.set_value(refs[i].clip, refs[i].frame, (1 - a) * v + a * ret[i]);
  }
}

std::pair<int, int> sample_start_frame(const ValueTable& table, Rng& rng) {
  return table.sample(rng);
}

// ---- rollout buffer ----

RolloutBuffer::RolloutBuffer(int capacity, int staging_target)
    : capacity_(capacity), staging_target_(staging_target) {
  if (capacity < 1 || staging_target < 1) throw ConfigError("buffer sizes must be positive");
}

void RolloutBuffer::stage(Trajectory t) {
  if (t.states.size() != t.actions.size() + 1 || t.refs.size() != t.states.size()) {
    throw DataError("trajectory arrays are inconsistent");
  }
  staged_count_ += t.transitions();
  staging_.push_back(std::move(t));
}

void RolloutBuffer::merge() {
  for (Trajectory& t : staging_) {
    stored_count_ += t.transitions();
    stored_.push_back(std::move(t));
  }
  staging_.clear();
  staged_count_ = 0;
  while (stored_count_ > capacity_ && !stored_.empty()) {
    stored_count_ -= stored_.front().transitions();
    stored_.pop_front();
  }
}

int RolloutBuffer::window_count(int horizon) const {
  int n = 0;
  for (const Trajectory& t : stored_) n += std::max(0, t.transitions() - horizon + 1);
  return n;
}

std::pair<int, int> RolloutBuffer::sample_window(int horizon, Rng& rng) const {
  const int total = window_count(horizon);
  if (total <= 0) {
    throw DataError("rollout buffer has no trajectory with " + std::to_string(horizon) +
                    " transitions");
  }
  int k = rng.uniform_int(total);
  for (int i = 0; i < static_cast<int>(stored_.size()); ++i) {
    const int n = std::max(0, stored_[i].transitions() - horizon + 1);
    if (k < n) return {i, k};
    k -= n;
  }
  throw DataError("rollout buffer sampling fell off the end");
}

namespace {

template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
void get(std::istream& i, T& v) {
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw DataError("rollout buffer file is truncated");
}

}  // namespace

void RolloutBuffer::save(const std::string& path) const {
  if (!staging_.empty()) throw DataError("cannot save a buffer with staged trajectories");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp + "'");
    f.write("CVAEBUF1", 8);
    put(f, capacity_);
    put(f, staging_target_);
    put(f, static_cast<int>(stored_.size()));
    for (const Trajectory& t : stored_) {
      put(f, t.transitions());
      put(f, static_cast<int>(t.fell));
      for (const SimState& s : t.states) put(f, s.flatten());
      for (const Action& a : t.actions) put(f, a);
      for (const FrameRef& r : t.refs) {
        put(f, r.clip);
        put(f, r.frame);
        put(f, r.x_offset);
      }
      put(f, static_cast<int>(t.rewards.size()));
      for (double r : t.rewards) put(f, r);
    }
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

void RolloutBuffer::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open rollout buffer '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "CVAEBUF1", 8) != 0) throw DataError("'" + path + "' is not a buffer");
  RolloutBuffer b;
  int n;
  get(f, b.capacity_);
  get(f, b.staging_target_);
  get(f, n);
  for (int i = 0; i < n; ++i) {
    Trajectory t;
    int len, fell, nr;
    get(f, len);
    get(f, fell);
    t.fell = fell != 0;
    t.states.resize(len + 1);
    t.actions.resize(len);
    t.refs.resize(len + 1);
    for (SimState& s : t.states) {
      std::array<double, kStateDim> v;
      get(f, v);
      s = SimState::unflatten(v);
    }
    for (Action& a : t.actions) get(f, a);
    for (FrameRef& r : t.refs) {
      get(f, r.clip);
      get(f, r.frame);
      get(f, r.x_offset);
    }
    get(f, nr);
    t.rewards.resize(nr);
    for (double& r : t.rewards) get(f, r);
    b.stored_count_ += len;
    b.stored_.push_back(std::move(t));
  }
  *this = std::move(b);
}

CONTROLVAE_NAMESPACE_END
