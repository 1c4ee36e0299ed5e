#pragma once

#include <optional>
#include <random>

#include <nlohmann/json_fwd.hpp>

#include "itrack/geometry.hpp"
#include "itrack/sim.hpp"

namespace itrack {

struct PidGains {
  double kp = 0.0;
  double ki = 0.0;
  double kd = 0.0;
};

struct PidState {
  double integral = 0.0;
  double prev_error = 0.0;
  bool initialized = false;

  void reset() { *this = PidState{}; }
};

// Rectangular integration, derivative on error, zero derivative on the first
// call. Output is not clipped.
double pid_step(PidState& state, double error, const PidGains& gains, double dt);

// Defaults are the tuned gains for the state-based and bbox-based
// controllers. The bbox scalings map normalized errors into the range the
// gains were tuned for.
struct ControllerConfig {
  PidGains state_speed{5.0, 0.1, 0.05};
  PidGains state_angle{1.0, 0.01, 0.0};
  PidGains bbox_speed{0.2, 0.01, 0.03};
  PidGains bbox_angle{0.05, 0.01, 0.1};
  double bbox_area_scale = 10000.0;
  double bbox_x_scale = 1000.0;
};

void to_json(nlohmann::json& j, const ControllerConfig& c);
void from_json(const nlohmann::json& j, ControllerConfig& c);

struct PidPair {
  PidState linear;
  PidState angular;

  void reset() {
    linear.reset();
    angular.reset();
  }
};

Action state_pid_action(const RelativeState& rel, const RelativeState& goal,
                        PidPair& states, double dt,
                        const ControllerConfig& cfg = {});

// Lost observation holds still and leaves the PID memory untouched.
Action bbox_pid_action(const std::optional<BBox>& obs, const BBox& goal,
                       PidPair& states, double dt,
                       const ControllerConfig& cfg = {});

struct PerturbationConfig {
  double p = 0.15;
  int l_max = 4;

  void validate() const;
};

// Multi-level random perturbation: while idle, start a burst of
// L ~ U{1..l_max} uniformly random actions with probability p per step.
class Perturber {
 public:
  Perturber(PerturbationConfig cfg, std::uint64_t seed);

  Action apply(const Action& a);
  bool last_was_perturbed() const { return last_perturbed_; }
  int remaining() const { return remaining_; }
  void reset() {
    remaining_ = 0;
    last_perturbed_ = false;
  }

 private:
  PerturbationConfig cfg_;
  std::mt19937_64 rng_;
  int remaining_ = 0;
  bool last_perturbed_ = false;
};

// Long-run fraction of perturbed steps for the renewal process above.
double expected_perturbed_fraction(const PerturbationConfig& cfg);

}  // namespace itrack
