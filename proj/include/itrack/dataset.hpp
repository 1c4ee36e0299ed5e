#pragma once

// Offline trajectories from the perturbed state-PID behavior policy, with
// IoU rewards, stored as JSONL.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "itrack/controllers.hpp"
#include "itrack/geometry.hpp"
#include "itrack/sim.hpp"

namespace itrack {

class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(const std::string& path, int line, const std::string& what);
  int line() const { return line_; }

 private:
  int line_;
};

struct Transition {
  int episode = 0;
  int step = 0;
  RelativeState s;
  std::optional<BBox> o;
  std::array<double, 2> a{};  // normalized [-1, 1]
  double r = 0.0;
  std::optional<BBox> o2;
  RelativeState s2;
  BBox goal;                  // G_final
  RelativeState goal_state;   // (rho*, theta*) behind G_final
  bool terminal = false;      // episode ended by target loss after this step
};

double transition_reward(const std::optional<BBox>& obs, const BBox& goal);

struct CollectConfig {
  long n_steps = 200000;
  double rho_min = 200.0, rho_max = 600.0;
  double theta_min = -25.0, theta_max = 25.0;
  PerturbationConfig perturbation;
  int episode_cap = 500;
  // Per-episode target speed drawn uniformly from this list; empty uses the
  // world config speed.
  std::vector<double> speeds;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const CollectConfig& c);
void from_json(const nlohmann::json& j, CollectConfig& c);

struct GoalSample {
  RelativeState goal;
  BBox bbox;
};

GoalSample sample_goal(std::mt19937_64& rng, const CollectConfig& cfg,
                       const CameraModel& cam = {});

struct DatasetHeader {
  int version = 1;
  CameraModel camera;
  WorldConfig world;
  CollectConfig collect;
  ControllerConfig controller;
  std::uint64_t seed = 0;
  std::vector<std::string> merged_from;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Transition> transitions;

  // [begin, end) transition index ranges, one per episode.
  std::vector<std::pair<std::size_t, std::size_t>> episodes() const;
};

Dataset collect(const WorldConfig& world, const CollectConfig& cfg,
                const CameraModel& cam = {}, const ControllerConfig& ctl = {});

nlohmann::json transition_to_json(const Transition& t);
Transition transition_from_json(const nlohmann::json& j);

void write_dataset(const Dataset& d, const std::string& path);
Dataset read_dataset(const std::string& path);

// Concatenates shards, renumbering episodes consecutively.
Dataset merge_datasets(const std::vector<std::string>& paths);

std::string shard_name(std::uint64_t seed);  // traj-{seed}.jsonl

}  // namespace itrack
