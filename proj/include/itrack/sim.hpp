#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "itrack/geometry.hpp"

namespace itrack {

// World frame: x right, y down (screen convention), yaw in degrees measured
// clockwise from +x. A positive relative angle therefore means the target is
// to the tracker's right, and a positive angular velocity turns right.
struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

double normalize_angle(double deg);  // into (-180, 180]

struct Action {
  static constexpr double kMaxLinear = 100.0;  // cm/s
  static constexpr double kMaxAngular = 30.0;  // deg/s

  double linear = 0.0;
  double angular = 0.0;

  Action() = default;
  Action(double lin, double ang);  // clamps to bounds

  // [-1, 1]^2 <-> actuator units.
  static Action from_normalized(double lin, double ang);
  std::array<double, 2> normalized() const;

  friend bool operator==(const Action&, const Action&) = default;
};

struct WorldConfig {
  double arena_half_extent = 1500.0;  // cm
  double dt = 0.02;                   // s
  double target_speed = 0.5;          // m/s
  double target_turn_rate = 90.0;     // deg/s
  double waypoint_radius = 50.0;      // cm
  double rho_max = 750.0;             // cm
  double theta_max = 90.0;            // deg, full fan angle
  int lost_steps_to_terminate = 20;
  int max_steps = 500;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// Scripted target motion. When `waypoints` is non-empty the target follows
// them in order (optionally looping) instead of sampling random ones; once
// exhausted without looping the target stops.
struct TargetScript {
  std::vector<std::array<double, 2>> waypoints;  // cm, world frame
  bool loop = false;
  std::optional<double> speed;  // m/s, overrides WorldConfig::target_speed

  bool empty() const { return waypoints.empty(); }
};

void to_json(nlohmann::json& j, const TargetScript& s);
void from_json(const nlohmann::json& j, TargetScript& s);

enum class RunState { kRunning, kCompleted, kLost };

struct EpisodeStatus {
  int step = 0;
  RunState state = RunState::kRunning;
  int lost_counter = 0;

  bool running() const { return state == RunState::kRunning; }
};

std::string to_string(RunState s);

class EpisodeTerminatedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Observation {
  std::optional<BBox> bbox;  // nullopt = lost
  MaskImage mask;
};

bool is_visible(const RelativeState& rel, const WorldConfig& cfg);

RelativeState relative_state(const Pose2D& tracker, const Pose2D& target);

class World {
 public:
  // Tracker at the arena center, target uniform in rho in (200, 750) and
  // |theta| < 45 deg.
  static World reset(const WorldConfig& cfg, std::uint64_t seed);
  static World reset(const WorldConfig& cfg, std::uint64_t seed,
                     TargetScript script);

  struct StepResult {
    RelativeState rel;
    EpisodeStatus status;
  };

  StepResult step(const Action& tracker_action);

  RelativeState relative() const { return relative_state(tracker_, target_); }
  bool target_visible() const { return is_visible(relative(), cfg_); }
  Observation observe(const CameraModel& cam, bool with_mask = true) const;
  std::optional<BBox> observe_bbox(const CameraModel& cam) const;

  // Moves the tracker so the target sits at `rel`, keeping the target fixed.
  void place_tracker_relative(const RelativeState& rel);
  // Scenario hooks.
  void set_target_pose(const Pose2D& pose);
  void set_target_speed(double mps) { target_speed_ = mps; }
  void set_script(TargetScript script);

  const Pose2D& tracker() const { return tracker_; }
  const Pose2D& target() const { return target_; }
  const std::array<double, 2>& waypoint() const { return waypoint_; }
  const EpisodeStatus& status() const { return status_; }
  const WorldConfig& config() const { return cfg_; }
  double target_speed() const { return target_speed_; }

 private:
  World(const WorldConfig& cfg, std::uint64_t seed);

  void advance_target();
  void next_waypoint();
  void clamp_to_arena(Pose2D& p) const;

  WorldConfig cfg_;
  std::mt19937_64 rng_;
  Pose2D tracker_;
  Pose2D target_;
  std::array<double, 2> waypoint_{0.0, 0.0};
  double target_speed_ = 0.0;  // m/s
  TargetScript script_;
  std::size_t script_index_ = 0;
  bool target_stopped_ = false;
  EpisodeStatus status_;
};

}  // namespace itrack
