#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "controlvae/motiondata.hpp"

using namespace controlvae;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cvae_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("generate_gait: frame counts") {
  CharacterSpec spec;
  CHECK(generate_gait("walk", 2, spec).frame_count() == 40);
  CHECK(generate_gait("hop", 1, spec).frame_count() == 12);
  CHECK(generate_gait("crouch", 1, spec).frame_count() == 40);
  CHECK_THROWS_AS(generate_gait("moonwalk", 1, spec), ConfigError);
  CHECK_THROWS_AS(generate_gait("walk", 0, spec), ConfigError);
}

TEST_CASE("generate_gait: stand is static") {
  CharacterSpec spec;
  const MotionClip c = generate_gait("stand", 3, spec);
  for (const SimState& s : c.frames) {
    CHECK(s == c.frames[0]);
    for (const BodyState& b : s.body) {
      CHECK(b.vx == 0);
      CHECK(b.vy == 0);
      CHECK(b.omega == 0);
    }
  }
}

TEST_CASE("generate_gait: velocities are central differences of the poses") {
  CharacterSpec spec;
  for (const char* kind : {"walk", "hop", "stand", "crouch"}) {
    const MotionClip c = generate_gait(kind, 2, spec);
    const double h = 1.0 / c.fps;
    for (int i = 1; i + 1 < c.frame_count(); ++i) {
      for (int b = 0; b < kBodies; ++b) {
        const BodyState &p = c.frames[i - 1].body[b], &n = c.frames[i + 1].body[b],
                        &s = c.frames[i].body[b];
        CHECK(std::fabs(s.vx - (n.x - p.x) / (2 * h)) < 1e-8);
        CHECK(std::fabs(s.vy - (n.y - p.y) / (2 * h)) < 1e-8);
        CHECK(std::fabs(s.omega - wrap_angle(n.theta - p.theta) / (2 * h)) < 1e-8);
      }
    }
  }
}

TEST_CASE("generate_gait: poses are valid and keep the root up") {
  CharacterSpec spec;
  for (const char* kind : {"walk", "hop", "stand"}) {
    const MotionClip c = generate_gait(kind, 3, spec);
    for (const SimState& s : c.frames) {
      CHECK(joint_error(s, spec) < 1e-9);
      CHECK(s.body[0].y > 0.5);
      CHECK(lowest_point(s, spec) > -1e-9);
    }
  }
  // crouch goes below the fall height at the bottom of the cycle
  const MotionClip crouch = generate_gait("crouch", 1, spec);
  double lowest = 10;
  for (const SimState& s : crouch.frames) lowest = std::min(lowest, s.body[0].y);
  CHECK(lowest < 0.5);
}

TEST_CASE("generate_gait: walk stance feet stay planted") {
  CharacterSpec spec;
  const MotionClip c = generate_gait("walk", 2, spec);
  // left foot is in stance over the first 60% of each cycle
  const Vec2 f0 = body_point(c.frames[1].body[2], {0, -spec.length[2] / 2});
  for (int i = 2; i < 11; ++i) {
    const Vec2 f = body_point(c.frames[i].body[2], {0, -spec.length[2] / 2});
    CHECK(f.x == doctest::Approx(f0.x).epsilon(1e-9));
    CHECK(std::fabs(f.y) < 1e-9);
  }
  // root advances at the configured speed
  CHECK(c.frames[20].body[0].x - c.frames[0].body[0].x == doctest::Approx(0.6));
}

TEST_CASE("mirror") {
  CharacterSpec spec;
  const MotionClip walk = generate_gait("walk", 2, spec);
  const MotionClip m = mirror(walk);
  CHECK(m.name == "walk_mirror");
  const MotionClip mm = mirror(m);
  CHECK(mm.name == "walk");
  for (int i = 0; i < walk.frame_count(); ++i) {
    CHECK(mm.frames[i] == walk.frames[i]);
    CHECK(joint_angles(m.frames[i])[0] == joint_angles(walk.frames[i])[2]);
    CHECK(joint_angles(m.frames[i])[3] == joint_angles(walk.frames[i])[1]);
  }
  // a pose with identical legs is a fixed point
  MotionClip sym;
  sym.name = "sym";
  const SimState p = forward_kinematics(spec, {}, {0.2, -0.3, 0.2, -0.3});
  sym.frames = {p, p, p};
  const MotionClip ms = mirror(sym);
  for (int i = 0; i < 3; ++i) CHECK(ms.frames[i] == sym.frames[i]);
  CHECK(mirror_action({1, 2, 3, 4}) == Action{3, 4, 1, 2});
}

TEST_CASE("resample") {
  CharacterSpec spec;
  const MotionClip walk = generate_gait("walk", 2, spec);
  const MotionClip same = resample(walk, 20);
  REQUIRE(same.frame_count() == walk.frame_count());
  for (int i = 0; i < walk.frame_count(); ++i) CHECK(same.frames[i] == walk.frames[i]);

  GaitParams p = default_gait_params(GaitKind::Walk);
  p.fps = 40;
  const MotionClip fast = generate_gait(GaitKind::Walk, 1, spec, p);
  REQUIRE(fast.frame_count() == 40);
  const MotionClip slow = resample(fast, 20);
  REQUIRE(slow.frame_count() == 20);
  for (int i = 0; i < 20; ++i) {
    const auto a = slow.frames[i].flatten(), b = fast.frames[2 * i].flatten();
    for (int k = 0; k < kStateDim; ++k) CHECK(std::fabs(a[k] - b[k]) < 1e-9);
  }

  const MotionClip still = generate_gait("stand", 1, spec);
  const MotionClip up = resample(still, 33);
  for (const SimState& s : up.frames) CHECK(s == still.frames[0]);
  CHECK(up.frames.front() == still.frames.front());

  // angles interpolate along the short arc
  MotionClip wrap;
  wrap.name = "wrap";
  SimState a, b;
  a.body[0].theta = kPi - 0.1;
  b.body[0].theta = -kPi + 0.1;
  wrap.frames = {a, b};
  const MotionClip mid = resample(wrap, 40);
  CHECK(std::fabs(wrap_angle(mid.frames[1].body[0].theta - kPi)) < 1e-12);
  CHECK_THROWS_AS(resample(walk, 0), ConfigError);
}

TEST_CASE("clip CSV round trip is bit exact") {
  const std::string dir = temp_dir("csv");
  CharacterSpec spec;
  const MotionClip c = generate_gait("hop", 2, spec);
  const std::string path = dir + "/hop.csv";
  write_clip_csv(path, c);
  const MotionClip r = read_clip_csv(path);
  CHECK(r.name == c.name);
  CHECK(r.skill == c.skill);
  CHECK(r.fps == c.fps);
  REQUIRE(r.frame_count() == c.frame_count());
  for (int i = 0; i < c.frame_count(); ++i) CHECK(r.frames[i] == c.frames[i]);

  std::ofstream(dir + "/bad.csv") << "# fps=20\nframe,time\n";
  CHECK_THROWS_AS(read_clip_csv(dir + "/bad.csv"), DataError);
  CHECK_THROWS_AS(read_clip_csv(dir + "/missing.csv"), IoError);
}

TEST_CASE("dataset manifest round trip") {
  const std::string dir = temp_dir("dataset");
  CharacterSpec spec;
  Dataset d;
  d.clips.push_back(generate_gait("walk", 2, spec));
  d.clips.push_back(mirror(d.clips[0]));
  d.clips.push_back(generate_gait("hop", 2, spec));
  write_dataset(dir, d);
  const Dataset r = read_dataset(dir);
  REQUIRE(r.size() == 3);
  CHECK(r.skills() == std::vector<std::string>{"walk", "hop"});
  CHECK(r.skill_id(1) == 0);
  CHECK(r.skill_id(2) == 1);
  CHECK(r.clips[1].name == "walk_mirror");
  CHECK(r.total_frames() == d.total_frames());
  CHECK(slurp(dir + "/walk.csv") == [&] {
    write_dataset(dir, d);
    return slurp(dir + "/walk.csv");
  }());
  CHECK_THROWS_AS(write_dataset(temp_dir("empty"), Dataset{}), ConfigError);
}

TEST_CASE("reward examples") {
  CharacterSpec spec;
  const LocalState a = to_local(generate_gait("walk", 1, spec).frames[3]);
  ReconWeights w;
  CHECK(reward(a, a, w) == 1.0);
  LocalState b = a;
  b[8] += 10;  // weight 2 -> distance 20
  CHECK(reward(b, a, w, 20) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(reward(b, a, w, 20) == doctest::Approx(0.367879).epsilon(1e-6));
  LocalState c = a;
  c[8] += 11;
  CHECK(reward(c, a, w) < reward(b, a, w));
  CHECK_THROWS_AS(reward(a, a, w, 0), ConfigError);
}

TEST_CASE("update_values examples") {
  ValueTable t({5, 3}, 0.5);
  t.set_value(0, 0, 2.0);
  std::vector<double> zeros(3, 0.0);
  std::vector<FrameRef> refs{{0, 0}, {0, 1}, {0, 2}};
  update_values(t, zeros, refs, 0.95, 0.0);
  CHECK(t.value(0, 0) == doctest::Approx(1.0));
  CHECK(t.value(0, 1) == 0);
  CHECK(t.value(1, 0) == 0);  // unvisited

  // geometric series with full replacement
  const int T = 200;
  ValueTable full({T + 1}, 1.0);
  std::vector<double> ones(T + 1, 1.0);
  std::vector<FrameRef> seq;
  for (int i = 0; i <= T; ++i) seq.push_back({0, i});
  update_values(full, ones, seq, 0.95, 0.0);
  CHECK(full.value(0, 0) == doctest::Approx((1 - std::pow(0.95, T + 1)) / (1 - 0.95)));
  CHECK(full.value(0, T) == doctest::Approx(1.0));
  // bootstrap enters with gamma^(T+1-t)
  ValueTable boot({2}, 1.0);
  std::vector<double> r2{0.0, 0.0};
  update_values(boot, r2, std::vector<FrameRef>{{0, 0}, {0, 1}}, 0.5, 8.0);
  CHECK(boot.value(0, 0) == doctest::Approx(2.0));
  CHECK(boot.value(0, 1) == doctest::Approx(4.0));

  std::vector<FrameRef> bad{{0, 7}};
  std::vector<double> one{1.0};
  CHECK_THROWS_AS(update_values(t, one, bad, 0.95, 0), DataError);
}

TEST_CASE("sample_start_frame follows 1/max(0.01, V)") {
  Rng rng(11);
  ValueTable two({2});
  two.set_value(0, 0, 1.0);
  two.set_value(0, 1, 0.0);
  CHECK(two.weight(0, 1) == 100);
  CHECK(two.probability(0, 0) == doctest::Approx(1.0 / 101));
  two.set_value(0, 1, 0.001);
  CHECK(two.weight(0, 1) == 100);  // capped
  int hits[2] = {0, 0};
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++hits[sample_start_frame(two, rng).second];
  CHECK(hits[1] / double(n) == doctest::Approx(100.0 / 101).epsilon(0.02));
  CHECK(hits[0] / double(n) == doctest::Approx(1.0 / 101).epsilon(0.1));

  // equal values: chi-square against uniform over 10 frames (9 dof, p=0.01 -> 21.67)
  ValueTable flat({4, 6});
  std::vector<int> counts(10, 0);
  for (int i = 0; i < n; ++i) {
    auto [c, f] = flat.sample(rng);
    ++counts[c * 4 + f];
  }
  double chi2 = 0;
  for (int k : counts) chi2 += (k - n / 10.0) * (k - n / 10.0) / (n / 10.0);
  CHECK(chi2 < 21.67);
}

TEST_CASE("value table json round trip") {
  ValueTable t({3, 2}, 0.2);
  t.set_value(1, 1, 0.75);
  const ValueTable r = ValueTable::from_json(t.to_json());
  CHECK(r.alpha() == 0.2);
  CHECK(r.value(1, 1) == 0.75);
  CHECK(r.size() == 5);
}

namespace {

Trajectory dummy_trajectory(int len, int tag) {
  Trajectory t;
  for (int i = 0; i <= len; ++i) {
    SimState s;
    s.body[0].x = tag;
    s.body[0].y = i;
    t.states.push_back(s);
    t.refs.push_back({tag, i, 0.5});
    t.rewards.push_back(0.1 * i);
  }
  t.actions.assign(len, Action{0.1, 0.2, 0.3, 0.4});
  return t;
}

}  // namespace

TEST_CASE("rollout buffer staging and merge") {
  RolloutBuffer b(100, 30);
  b.stage(dummy_trajectory(20, 0));
  CHECK_FALSE(b.staging_full());
  b.stage(dummy_trajectory(15, 1));
  CHECK(b.staging_full());
  CHECK(b.staged_states() == 35);
  b.merge();
  CHECK(b.staged_states() == 0);
  CHECK(b.stored_states() == 35);
  for (int k = 2; k < 8; ++k) {
    b.stage(dummy_trajectory(20, k));
    b.merge();
    CHECK(b.stored_states() <= 100);
  }
  // oldest dropped whole, insertion order kept
  int prev = -1;
  for (const Trajectory& t : b.trajectories()) {
    CHECK(t.refs[0].clip > prev);
    prev = t.refs[0].clip;
  }
  CHECK(b.trajectories().back().refs[0].clip == 7);
  CHECK(b.stored_states() == 100);

  Rng rng(3);
  CHECK(b.window_count(8) == 5 * 13);
  for (int i = 0; i < 200; ++i) {
    auto [tr, st] = b.sample_window(8, rng);
    CHECK(st + 8 <= b.trajectories()[tr].transitions());
  }
  CHECK_THROWS_AS(b.sample_window(50, rng), DataError);

  Trajectory broken = dummy_trajectory(3, 9);
  broken.actions.pop_back();
  CHECK_THROWS_AS(b.stage(broken), DataError);
}

TEST_CASE("rollout buffer save/load") {
  const std::string dir = temp_dir("buffer");
  RolloutBuffer b(100, 30);
  b.stage(dummy_trajectory(12, 0));
  b.stage(dummy_trajectory(7, 1));
  b.merge();
  b.save(dir + "/buf.bin");
  RolloutBuffer r;
  r.load(dir + "/buf.bin");
  CHECK(r.stored_states() == 19);
  CHECK(r.capacity() == 100);
  REQUIRE(r.trajectories().size() == 2);
  const Trajectory &x = r.trajectories()[1], &y = b.trajectories()[1];
  CHECK(x.states == y.states);
  CHECK(x.actions == y.actions);
  CHECK(x.rewards == y.rewards);
  CHECK(x.refs[3].frame == 3);
  CHECK(x.refs[3].x_offset == 0.5);
}
