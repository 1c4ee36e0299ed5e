#include "itrack/sim.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace itrack {

double normalize_angle(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a <= -180.0) a += 360.0;
  if (a > 180.0) a -= 360.0;
  return a;
}

Action::Action(double lin, double ang)
    : linear(std::clamp(std::isfinite(lin) ? lin : 0.0, -kMaxLinear, kMaxLinear)),
      angular(std::clamp(std::isfinite(ang) ? ang : 0.0, -kMaxAngular, kMaxAngular)) {}

Action Action::from_normalized(double lin, double ang) {
  return Action(lin * kMaxLinear, ang * kMaxAngular);
}

std::array<double, 2> Action::normalized() const {
  return {linear / kMaxLinear, angular / kMaxAngular};
}

void WorldConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (target_speed < 0.0 || target_turn_rate < 0.0) {
    throw std::invalid_argument("speeds must be non-negative");
  }
  if (!(arena_half_extent > 0.0) || !(rho_max > 0.0) ||
      !(theta_max > 0.0 && theta_max <= 360.0)) {
    throw std::invalid_argument("arena and visibility extents must be positive");
  }
  if (lost_steps_to_terminate < 1 || max_steps < 1) {
    throw std::invalid_argument("step limits must be >= 1");
  }
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"arena_half_extent", c.arena_half_extent},
       {"dt", c.dt},
       {"target_speed", c.target_speed},
       {"target_turn_rate", c.target_turn_rate},
       {"waypoint_radius", c.waypoint_radius},
       {"rho_max", c.rho_max},
       {"theta_max", c.theta_max},
       {"lost_steps_to_terminate", c.lost_steps_to_terminate},
       {"max_steps", c.max_steps},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.arena_half_extent = j.value("arena_half_extent", d.arena_half_extent);
  c.dt = j.value("dt", d.dt);
  c.target_speed = j.value("target_speed", d.target_speed);
  c.target_turn_rate = j.value("target_turn_rate", d.target_turn_rate);
  c.waypoint_radius = j.value("waypoint_radius", d.waypoint_radius);
  c.rho_max = j.value("rho_max", d.rho_max);
  c.theta_max = j.value("theta_max", d.theta_max);
  c.lost_steps_to_terminate =
      j.value("lost_steps_to_terminate", d.lost_steps_to_terminate);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

void to_json(nlohmann::json& j, const TargetScript& s) {
  j = nlohmann::json::object();
  j["waypoints"] = nlohmann::json::array();
  for (const auto& w : s.waypoints) j["waypoints"].push_back({w[0], w[1]});
  j["loop"] = s.loop;
  if (s.speed) j["speed"] = *s.speed;
}

void from_json(const nlohmann::json& j, TargetScript& s) {
  s = TargetScript{};
  for (const auto& w : j.at("waypoints")) {
    if (!w.is_array() || w.size() != 2) {
      throw std::invalid_argument("waypoint must be [x, y]");
    }
    s.waypoints.push_back({w[0].get<double>(), w[1].get<double>()});
  }
  s.loop = j.value("loop", false);
  if (j.contains("speed")) s.speed = j["speed"].get<double>();
}

std::string to_string(RunState s) {
  switch (s) {
    case RunState::kRunning: return "running";
    case RunState::kCompleted: return "completed";
    case RunState::kLost: return "lost";
  }
  return "unknown";
}

bool is_visible(const RelativeState& rel, const WorldConfig& cfg) {
  return rel.rho <= cfg.rho_max && std::abs(rel.theta) <= 0.5 * cfg.theta_max;
}

RelativeState relative_state(const Pose2D& tracker, const Pose2D& target) {
  const double dx = target.x - tracker.x;
  const double dy = target.y - tracker.y;
  const double rho = std::hypot(dx, dy);
  if (rho == 0.0) return {0.0, 0.0};
  return {rho, normalize_angle(rad2deg(std::atan2(dy, dx)) - tracker.yaw)};
}

World::World(const WorldConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(seed), target_speed_(cfg.target_speed) {
  cfg_.validate();
}

World World::reset(const WorldConfig& cfg, std::uint64_t seed) {
  return reset(cfg, seed, {});
}

World World::reset(const WorldConfig& cfg, std::uint64_t seed, TargetScript script) {
  World w(cfg, seed);
  std::uniform_real_distribution<double> yaw(-180.0, 180.0);
  std::uniform_real_distribution<double> rho(200.0, 750.0);
  std::uniform_real_distribution<double> theta(-45.0, 45.0);

  w.tracker_ = {0.0, 0.0, normalize_angle(yaw(w.rng_))};
  double r = rho(w.rng_);
  double t = theta(w.rng_);
  // uniform_real_distribution is half-open; keep both bounds open.
  while (r <= 200.0) r = rho(w.rng_);
  while (t <= -45.0) t = theta(w.rng_);
  const double bearing = deg2rad(w.tracker_.yaw + t);
  w.target_ = {r * std::cos(bearing), r * std::sin(bearing),
               normalize_angle(yaw(w.rng_))};
  w.set_script(std::move(script));
  return w;
}

void World::set_script(TargetScript script) {
  script_ = std::move(script);
  script_index_ = 0;
  target_stopped_ = false;
  if (script_.speed) target_speed_ = *script_.speed;
  next_waypoint();
}

void World::next_waypoint() {
  if (!script_.empty()) {
    if (script_index_ >= script_.waypoints.size()) {
      if (!script_.loop) {
        target_stopped_ = true;
        return;
      }
      script_index_ = 0;
    }
    waypoint_ = script_.waypoints[script_index_++];
    return;
  }
  std::uniform_real_distribution<double> u(-cfg_.arena_half_extent,
                                           cfg_.arena_half_extent);
  const double x = u(rng_);
  const double y = u(rng_);
  waypoint_ = {x, y};
}

void World::clamp_to_arena(Pose2D& p) const {
  const double e = cfg_.arena_half_extent;
  p.x = std::clamp(p.x, -e, e);
  p.y = std::clamp(p.y, -e, e);
}

void World::advance_target() {
  if (target_stopped_ || target_speed_ <= 0.0) return;
  double dx = waypoint_[0] - target_.x;
  double dy = waypoint_[1] - target_.y;
  if (std::hypot(dx, dy) < cfg_.waypoint_radius) {
    next_waypoint();
    if (target_stopped_) return;
    dx = waypoint_[0] - target_.x;
    dy = waypoint_[1] - target_.y;
  }
  const double desired = rad2deg(std::atan2(dy, dx));
  const double max_turn = cfg_.target_turn_rate * cfg_.dt;
  const double turn =
      std::clamp(normalize_angle(desired - target_.yaw), -max_turn, max_turn);
  target_.yaw = normalize_angle(target_.yaw + turn);
  const double dist = target_speed_ * 100.0 * cfg_.dt;
  target_.x += dist * std::cos(deg2rad(target_.yaw));
  target_.y += dist * std::sin(deg2rad(target_.yaw));
  clamp_to_arena(target_);
}

World::StepResult World::step(const Action& a) {
  if (!status_.running()) {
    throw EpisodeTerminatedError("step() called on a terminated episode");
  }
  const Action act(a.linear, a.angular);
  tracker_.yaw = normalize_angle(tracker_.yaw + act.angular * cfg_.dt);
  const double dist = act.linear * cfg_.dt;
  tracker_.x += dist * std::cos(deg2rad(tracker_.yaw));
  tracker_.y += dist * std::sin(deg2rad(tracker_.yaw));
  clamp_to_arena(tracker_);

  advance_target();

  ++status_.step;
  const RelativeState rel = relative();
  if (is_visible(rel, cfg_)) {
    status_.lost_counter = 0;
  } else {
    ++status_.lost_counter;
  }
  if (status_.lost_counter >= cfg_.lost_steps_to_terminate) {
    status_.state = RunState::kLost;
  } else if (status_.step >= cfg_.max_steps) {
    status_.state = RunState::kCompleted;
  }
  return {rel, status_};
}

std::optional<BBox> World::observe_bbox(const CameraModel& cam) const {
  const RelativeState rel = relative();
  if (!is_visible(rel, cfg_)) return std::nullopt;
  return project(rel, cam);
}

Observation World::observe(const CameraModel& cam, bool with_mask) const {
  Observation o;
  o.bbox = observe_bbox(cam);
  if (with_mask) {
    o.mask = o.bbox ? render_mask(*o.bbox, cam) : MaskImage(cam.resolution);
  }
  return o;
}

void World::place_tracker_relative(const RelativeState& rel) {
  // Keep the tracker heading, move it so the target appears at rel.
  const double bearing = deg2rad(tracker_.yaw + rel.theta);
  tracker_.x = target_.x - rel.rho * std::cos(bearing);
  tracker_.y = target_.y - rel.rho * std::sin(bearing);
}

void World::set_target_pose(const Pose2D& pose) {
  target_ = pose;
  clamp_to_arena(target_);
}

}  // namespace itrack
