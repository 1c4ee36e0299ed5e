#include "itrack/controllers.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace itrack {

double pid_step(PidState& s, double error, const PidGains& g, double dt) {
  s.integral += error * dt;
  const double derivative = s.initialized ? (error - s.prev_error) / dt : 0.0;
  s.prev_error = error;
  s.initialized = true;
  return g.kp * error + g.ki * s.integral + g.kd * derivative;
}

namespace {

void gains_to_json(nlohmann::json& j, const char* key, const PidGains& g) {
  j[key] = {g.kp, g.ki, g.kd};
}

void gains_from_json(const nlohmann::json& j, const char* key, PidGains& g) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) {
    throw std::invalid_argument(std::string(key) + " must be [kp, ki, kd]");
  }
  g = {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
  if (!std::isfinite(g.kp) || !std::isfinite(g.ki) || !std::isfinite(g.kd)) {
    throw std::invalid_argument(std::string(key) + " gains must be finite");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const ControllerConfig& c) {
  j = nlohmann::json::object();
  gains_to_json(j, "state_speed", c.state_speed);
  gains_to_json(j, "state_angle", c.state_angle);
  gains_to_json(j, "bbox_speed", c.bbox_speed);
  gains_to_json(j, "bbox_angle", c.bbox_angle);
  j["bbox_area_scale"] = c.bbox_area_scale;
  j["bbox_x_scale"] = c.bbox_x_scale;
}

void from_json(const nlohmann::json& j, ControllerConfig& c) {
  c = ControllerConfig{};
  gains_from_json(j, "state_speed", c.state_speed);
  gains_from_json(j, "state_angle", c.state_angle);
  gains_from_json(j, "bbox_speed", c.bbox_speed);
  gains_from_json(j, "bbox_angle", c.bbox_angle);
  c.bbox_area_scale = j.value("bbox_area_scale", c.bbox_area_scale);
  c.bbox_x_scale = j.value("bbox_x_scale", c.bbox_x_scale);
}

Action state_pid_action(const RelativeState& rel, const RelativeState& goal,
                        PidPair& states, double dt, const ControllerConfig& cfg) {
  const double lin = pid_step(states.linear, rel.rho - goal.rho, cfg.state_speed, dt);
  const double ang =
      pid_step(states.angular, normalize_angle(rel.theta - goal.theta),
               cfg.state_angle, dt);
  return Action(lin, ang);
}

Action bbox_pid_action(const std::optional<BBox>& obs, const BBox& goal,
                       PidPair& states, double dt, const ControllerConfig& cfg) {
  if (!obs) return Action(0.0, 0.0);
  const double area_err = cfg.bbox_area_scale * (goal.area() - obs->area());
  const double x_err = cfg.bbox_x_scale * (goal.cx - obs->cx);
  const double lin = pid_step(states.linear, area_err, cfg.bbox_speed, dt);
  // Target right of the goal (x_err < 0) must turn the tracker right.
  const double ang = -pid_step(states.angular, x_err, cfg.bbox_angle, dt);
  return Action(lin, ang);
}

void PerturbationConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  if (l_max < 1) throw std::invalid_argument("l_max must be >= 1");
}

Perturber::Perturber(PerturbationConfig cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(seed) {
  cfg_.validate();
}

Action Perturber::apply(const Action& a) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (remaining_ == 0 && u01(rng_) < cfg_.p) {
    std::uniform_int_distribution<int> len(1, cfg_.l_max);
    remaining_ = len(rng_);
  }
  if (remaining_ > 0) {
    --remaining_;
    last_perturbed_ = true;
    std::uniform_real_distribution<double> lin(-Action::kMaxLinear, Action::kMaxLinear);
    std::uniform_real_distribution<double> ang(-Action::kMaxAngular,
                                               Action::kMaxAngular);
    const double l = lin(rng_);
    const double g = ang(rng_);
    return Action(l, g);
  }
  last_perturbed_ = false;
  return a;
}

double expected_perturbed_fraction(const PerturbationConfig& cfg) {
  const double mean_len = 0.5 * (1.0 + cfg.l_max);
  return cfg.p * mean_len / (1.0 + cfg.p * (mean_len - 1.0));
}

}  // namespace itrack
