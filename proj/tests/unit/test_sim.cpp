#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "itrack/sim.hpp"

using namespace itrack;

namespace {

WorldConfig static_cfg() {
  WorldConfig c;
  c.target_speed = 0.0;
  return c;
}

TargetScript hold_still() {
  TargetScript s;
  s.speed = 0.0;
  s.waypoints = {{0.0, 0.0}};
  return s;
}

}  // namespace

TEST_CASE("visibility sector is inclusive at the boundary") {
  const WorldConfig c;
  CHECK(is_visible({750.0, 45.0}, c));
  CHECK(is_visible({750.0, -45.0}, c));
  CHECK_FALSE(is_visible({751.0, 0.0}, c));
  CHECK(is_visible({400.0, -44.9}, c));
  CHECK_FALSE(is_visible({400.0, 45.1}, c));
}

TEST_CASE("angle normalization") {
  CHECK(normalize_angle(190.0) == doctest::Approx(-170.0));
  CHECK(normalize_angle(-180.0) == doctest::Approx(180.0));
  CHECK(normalize_angle(720.0) == doctest::Approx(0.0));
}

TEST_CASE("actions clamp and normalize") {
  const Action a(250.0, -90.0);
  CHECK(a.linear == 100.0);
  CHECK(a.angular == -30.0);
  const Action n = Action::from_normalized(0.5, -1.0);
  CHECK(n.linear == doctest::Approx(50.0));
  CHECK(n.angular == doctest::Approx(-30.0));
  CHECK(n.normalized()[0] == doctest::Approx(0.5));
}

TEST_CASE("reset is deterministic and lands inside the sector") {
  const WorldConfig c;
  const World a = World::reset(c, 42), b = World::reset(c, 42);
  CHECK(a.relative() == b.relative());
  CHECK(a.tracker() == b.tracker());
  CHECK(World::reset(c, 1).relative() != World::reset(c, 2).relative());
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const RelativeState r = World::reset(c, s).relative();
    CHECK(is_visible(r, c));
    CHECK(r.rho > 200.0);
    CHECK(r.rho < 750.0);
    CHECK(std::abs(r.theta) < 45.0);
  }
  const World w = World::reset(c, 3);
  CHECK(w.tracker().x == 0.0);
  CHECK(w.tracker().y == 0.0);
}

TEST_CASE("zero action with a static target leaves the relative state unchanged") {
  World w = World::reset(static_cfg(), 9);
  const RelativeState r0 = w.relative();
  for (int i = 0; i < 50; ++i) w.step(Action{});
  CHECK(w.relative().rho == doctest::Approx(r0.rho).epsilon(1e-12));
  CHECK(w.relative().theta == doctest::Approx(r0.theta).epsilon(1e-12));
}

TEST_CASE("full forward speed closes 2 cm per tick") {
  World w = World::reset(static_cfg(), 0, hold_still());
  w.place_tracker_relative({500.0, 0.0});
  const auto r = w.step(Action(100.0, 0.0));
  CHECK(r.rel.rho == doctest::Approx(498.0).epsilon(1e-12));
  CHECK(r.rel.theta == doctest::Approx(0.0));
}

TEST_CASE("positive angular velocity turns right") {
  World w = World::reset(static_cfg(), 0, hold_still());
  w.place_tracker_relative({400.0, 0.0});
  w.step(Action(0.0, 30.0));
  CHECK(w.relative().theta == doctest::Approx(-0.6));
}

TEST_CASE("twenty lost steps terminate the episode") {
  World w = World::reset(static_cfg(), 0, hold_still());
  w.place_tracker_relative({400.0, 90.0});
  REQUIRE_FALSE(w.target_visible());
  for (int i = 1; i < 20; ++i) {
    const auto r = w.step(Action{});
    CHECK(r.status.running());
    CHECK(r.status.lost_counter == i);
  }
  const auto last = w.step(Action{});
  CHECK(last.status.state == RunState::kLost);
  CHECK_THROWS_AS(w.step(Action{}), EpisodeTerminatedError);
}

TEST_CASE("lost counter resets when the target comes back") {
  World w = World::reset(static_cfg(), 0, hold_still());
  w.place_tracker_relative({400.0, 50.0});
  for (int i = 0; i < 5; ++i) w.step(Action{});
  CHECK(w.status().lost_counter == 5);
  w.place_tracker_relative({400.0, 0.0});
  w.step(Action{});
  CHECK(w.status().lost_counter == 0);
}

TEST_CASE("episodes complete after max steps") {
  WorldConfig c = static_cfg();
  c.max_steps = 30;
  World w = World::reset(c, 0);
  EpisodeStatus st;
  for (int i = 0; i < 30; ++i) st = w.step(Action{}).status;
  CHECK(st.state == RunState::kCompleted);
  CHECK(st.step == 30);
  CHECK_THROWS_AS(w.step(Action{}), EpisodeTerminatedError);
}

TEST_CASE("observation composes projection and masking") {
  World w = World::reset(WorldConfig{}, 5);
  const Observation o = w.observe(CameraModel{});
  REQUIRE(o.bbox);
  CHECK(*o.bbox == *project(w.relative()));
  CHECK(o.mask.count() > 0);
  w.place_tracker_relative({400.0, 60.0});
  const Observation lost = w.observe(CameraModel{});
  CHECK_FALSE(lost.bbox);
  CHECK(lost.mask.count() == 0);
  w.place_tracker_relative({800.0, 0.0});
  CHECK_FALSE(w.observe_bbox(CameraModel{}));
}

TEST_CASE("unproject of the observation recovers the state") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> rho(200.0, 750.0), th(-44.0, 44.0);
  World w = World::reset(static_cfg(), 0, hold_still());
  for (int i = 0; i < 1000; ++i) {
    const RelativeState want{rho(rng), th(rng)};
    w.place_tracker_relative(want);
    const auto b = w.observe_bbox(CameraModel{});
    REQUIRE(b);
    const RelativeState got = unproject(*b);
    CHECK(std::abs(got.rho - w.relative().rho) < 1e-6);
    CHECK(std::abs(got.theta - w.relative().theta) < 1e-6);
    CHECK(std::abs(w.relative().rho - want.rho) < 1e-6);
  }
}

TEST_CASE("bit exact replay and bounded displacement") {
  WorldConfig c;
  c.target_speed = 2.0;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Action> actions;
  for (int i = 0; i < 500; ++i) actions.push_back(Action::from_normalized(u(rng), u(rng)));

  World a = World::reset(c, 77), b = World::reset(c, 77);
  for (const Action& act : actions) {
    if (!a.status().running()) break;
    const Pose2D ta = a.tracker(), ga = a.target();
    a.step(act);
    b.step(act);
    CHECK(a.tracker() == b.tracker());
    CHECK(a.target() == b.target());
    CHECK(std::hypot(a.tracker().x - ta.x, a.tracker().y - ta.y) <= 100.0 * c.dt + 1e-9);
    CHECK(std::hypot(a.target().x - ga.x, a.target().y - ga.y) <= 200.0 * c.dt + 1e-9);
    const RelativeState r = relative_state(a.tracker(), a.target());
    CHECK(std::abs(r.rho - a.relative().rho) < 1e-9);
  }
}

TEST_CASE("scripted waypoints are followed in order") {
  TargetScript s;
  s.speed = 1.0;
  s.waypoints = {{300.0, 0.0}, {300.0, 300.0}};
  WorldConfig c = static_cfg();
  c.max_steps = 5000;
  World w = World::reset(c, 0, s);
  w.set_target_pose({0.0, 0.0, 0.0});
  w.place_tracker_relative({400.0, 0.0});
  for (int i = 0; i < 2000; ++i) {
    w.place_tracker_relative({300.0, 0.0});
    w.step(Action{});
  }
  CHECK(std::hypot(w.target().x - 300.0, w.target().y - 300.0) <= 50.0 + 1e-9);
}

TEST_CASE("world config json round trip and validation") {
  WorldConfig c;
  c.target_speed = 1.5;
  c.seed = 12;
  const nlohmann::json j = c;
  const auto back = j.get<WorldConfig>();
  CHECK(back.target_speed == 1.5);
  CHECK(back.seed == 12);
  WorldConfig bad;
  bad.dt = 0.0;
  CHECK_THROWS(bad.validate());

  TargetScript s;
  s.waypoints = {{1.0, 2.0}};
  s.loop = true;
  const nlohmann::json js = s;
  const auto sb = js.get<TargetScript>();
  CHECK(sb.waypoints == s.waypoints);
  CHECK(sb.loop);
}
