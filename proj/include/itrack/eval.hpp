#pragma once

// Evaluation protocol: instruction-conditioned reward, scheduled goal
// switches routed through the aligner, AR/EL/SR aggregation, parser scoring
// and report files.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "itrack/aligner.hpp"
#include "itrack/controllers.hpp"
#include "itrack/geometry.hpp"
#include "itrack/policy.hpp"
#include "itrack/sim.hpp"

namespace itrack {

constexpr double kEvalRhoMax = 750.0;
constexpr double kEvalThetaMax = 90.0;

struct GoalSpec {
  double rho = 350.0;
  double theta = 0.0;
  std::string label = "custom";  // close | far | left | right | custom

  RelativeState state() const { return {rho, theta}; }
  void validate() const;  // inside the visibility sector
};

GoalSpec goal_close();
GoalSpec goal_far();
GoalSpec goal_left();
GoalSpec goal_right();
std::vector<GoalSpec> canonical_goals();  // close, far, left, right
GoalSpec initial_goal();                   // (350, 0), the session default too

// May be negative; 1 exactly at the goal.
double eval_reward(const RelativeState& rel, const GoalSpec& g);

// Table rows whose intent is the given absolute goal.
std::vector<std::string> instructions_for(const GoalSpec& g);

// ---- controllers ----

struct ControlInput {
  int tick = 0;
  double dt = 0.02;
  std::optional<BBox> obs;
  RelativeState rel;  // ground truth, used by state-based controllers only
  BBox goal;          // the controller's current goal box
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual void reset() = 0;
  virtual Action act(const ControlInput& in) = 0;
  virtual std::string name() const = 0;
  // Oracle hook: when set, the harness places the tracker at this relative
  // state after every step instead of trusting the dynamics.
  virtual std::optional<RelativeState> teleport(const GoalSpec& truth) const {
    (void)truth;
    return std::nullopt;
  }
};

// Goal state recovered from the goal box by unprojection.
class StatePidController : public Controller {
 public:
  explicit StatePidController(ControllerConfig cfg = {}, CameraModel cam = {})
      : cfg_(cfg), cam_(cam) {}
  void reset() override {
    pid_.reset();
    goal_box_.reset();
  }
  Action act(const ControlInput& in) override;
  std::string name() const override { return "pid"; }

 private:
  ControllerConfig cfg_;
  CameraModel cam_;
  PidPair pid_;
  std::optional<BBox> goal_box_;
  RelativeState goal_state_{kReferenceRho, kReferenceTheta};
};

class BboxPidController : public Controller {
 public:
  explicit BboxPidController(ControllerConfig cfg = {}) : cfg_(cfg) {}
  void reset() override { pid_.reset(); }
  Action act(const ControlInput& in) override;
  std::string name() const override { return "bbox-pid"; }

 private:
  ControllerConfig cfg_;
  PidPair pid_;
};

class PolicyController : public Controller {
 public:
  PolicyController(std::shared_ptr<const PolicyNetwork> net, bool deterministic = true,
                   std::uint64_t seed = 0, CameraModel cam = {});
  void reset() override;
  Action act(const ControlInput& in) override;
  std::string name() const override { return "policy"; }

 private:
  std::shared_ptr<const PolicyNetwork> net_;
  bool deterministic_;
  std::uint64_t seed_;
  CameraModel cam_;
  std::mt19937_64 rng_;
  ad::Matrix hidden_;
};

// Uniform random action, resampled every `hold` ticks.
class RandomController : public Controller {
 public:
  explicit RandomController(std::uint64_t seed, int hold = 25);
  void reset() override { rng_.seed(seed_); }
  Action act(const ControlInput& in) override;
  std::string name() const override { return "random"; }

 private:
  std::uint64_t seed_;
  int hold_;
  std::mt19937_64 rng_;
  Action current_;
};

class TeleportOracle : public Controller {
 public:
  void reset() override {}
  Action act(const ControlInput&) override { return {}; }
  std::string name() const override { return "oracle"; }
  std::optional<RelativeState> teleport(const GoalSpec& truth) const override {
    return truth.state();
  }
};

// Builds a fresh controller for one episode from its seed.
using ControllerFactory = std::function<std::unique_ptr<Controller>(std::uint64_t seed)>;

// pid | bbox-pid | policy | random | oracle; policy needs a network.
ControllerFactory controller_factory(const std::string& name,
                                     std::shared_ptr<const PolicyNetwork> net = nullptr,
                                     const ControllerConfig& ctl = {},
                                     const CameraModel& cam = {});

// ---- episodes ----

// A goal change at `tick`. With text the change goes through the aligner and
// `truth` (or the table mapping when absent) scores it; without text the box
// of `truth` is applied directly.
struct ScheduleItem {
  int tick = 0;
  std::string text;
  std::optional<GoalSpec> truth;
};

struct EpisodeConfig {
  WorldConfig world;
  CameraModel camera;
  GoalSpec initial = initial_goal();
  int aligner_latency_ticks = 0;  // goal box lands this many ticks after issue
};

struct Segment {
  int start_tick = 0;      // ground-truth switch
  int applied_tick = 0;    // goal box reached the controller
  GoalSpec truth;
  std::string text;
  BBox goal;
  std::optional<Provenance> provenance;  // absent when applied directly
};

struct EpisodeRecord {
  int length = 0;
  RunState outcome = RunState::kRunning;
  double accumulated = 0.0;
  std::vector<double> rewards;
  // Normalized distance between observed and goal box centers; NaN when lost.
  std::vector<double> center_distance;
  std::vector<Segment> segments;
};

// Ground truth of a relative instruction at issue time, clamped into the
// sector.
GoalSpec resolve_truth(const std::string& text, const RelativeState& at_issue);

// Called after every step with the world, observation, active goal box and
// step reward.
using TickObserver = std::function<void(const World&, const std::optional<BBox>&, const BBox&,
                                        double)>;

EpisodeRecord run_episode(Controller& controller, const std::vector<ScheduleItem>& schedule,
                          const EpisodeConfig& cfg, std::uint64_t world_seed,
                          AlignerBackend& backend, MemoryBank& bank,
                          const TickObserver& observer = {});

// ---- aggregate evaluation ----

struct EvalConfig {
  int episodes = 50;
  int max_steps = 500;
  int switches = 4;           // 0..4, sampled without replacement
  double target_speed = 0.5;  // m/s
  std::uint64_t seed = 0;
  int aligner_latency_ticks = 0;
  WorldConfig world;
  CameraModel camera;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

// Switch ticks evenly spaced over the episode, goals drawn without
// replacement, one table instruction sampled per goal.
std::vector<ScheduleItem> make_schedule(const EvalConfig& cfg, std::mt19937_64& rng);

struct Metrics {
  double ar = 0.0;  // mean accumulated reward
  double el = 0.0;  // mean episode length
  double sr = 0.0;  // fraction reaching max_steps
  int episodes = 0;
};

Metrics aggregate(const std::vector<EpisodeRecord>& records, int max_steps);

struct EvalResult {
  std::string controller;
  Metrics metrics;
  std::vector<EpisodeRecord> records;
};

// Episode seeds and schedules depend only on cfg.seed, so every controller
// sees the same protocol.
EvalResult evaluate(const ControllerFactory& factory, const EvalConfig& cfg);

// ---- parser scoring ----

struct ParserCase {
  std::string text;
  GoalIntent intent;
  bool correct = false;
  std::string detail;
};

struct ParserReport {
  double accuracy = 0.0;
  std::vector<ParserCase> cases;
};

// Validity bands for absolute goals; nullopt when the intent has no band.
std::optional<bool> absolute_goal_valid(const GoalIntent& intent, const BBox& goal);
std::optional<bool> relative_delta_valid(const GoalIntent& intent, const GoalDelta& d);

ParserReport parser_accuracy(AlignerBackend& backend, const CameraModel& cam = {});

// ---- reports ----

nlohmann::json report_json(const EvalConfig& cfg, const std::vector<EvalResult>& results);
std::string report_markdown(const EvalConfig& cfg, const std::vector<EvalResult>& results);
// Writes report.json and report.md into `dir`.
void write_reports(const std::string& dir, const EvalConfig& cfg,
                   const std::vector<EvalResult>& results);

}  // namespace itrack
