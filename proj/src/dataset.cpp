#include "itrack/dataset.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace itrack {

namespace {
constexpr const char* kSchema = "itrack-traj";
constexpr int kVersion = 1;
constexpr double kRewardTolerance = 1e-9;
}  // namespace

DatasetFormatError::DatasetFormatError(const std::string& path, int line,
                                       const std::string& what)
    : std::runtime_error(fmt::format("{}:{}: {}", path, line, what)), line_(line) {}

double transition_reward(const std::optional<BBox>& obs, const BBox& goal) {
  return obs ? iou(goal, *obs) : 0.0;
}

void CollectConfig::validate() const {
  if (n_steps < 1) throw std::invalid_argument("n_steps must be positive");
  if (!(rho_min > 0.0 && rho_min < rho_max)) throw std::invalid_argument("bad rho range");
  if (!(theta_min < theta_max) || theta_min <= -45.0 || theta_max >= 45.0) {
    throw std::invalid_argument("theta range must lie inside the visibility sector");
  }
  if (rho_max > 750.0) throw std::invalid_argument("rho range exceeds visibility radius");
  if (episode_cap < 1) throw std::invalid_argument("episode_cap must be positive");
  for (double s : speeds) {
    if (!(s >= 0.0)) throw std::invalid_argument("speeds must be non-negative");
  }
  perturbation.validate();
}

void to_json(nlohmann::json& j, const CollectConfig& c) {
  j = {{"n_steps", c.n_steps},         {"rho_min", c.rho_min},
       {"rho_max", c.rho_max},         {"theta_min", c.theta_min},
       {"theta_max", c.theta_max},     {"perturb_p", c.perturbation.p},
       {"perturb_l_max", c.perturbation.l_max}, {"episode_cap", c.episode_cap},
       {"speeds", c.speeds},           {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CollectConfig& c) {
  c = CollectConfig{};
  c.n_steps = j.value("n_steps", c.n_steps);
  c.rho_min = j.value("rho_min", c.rho_min);
  c.rho_max = j.value("rho_max", c.rho_max);
  c.theta_min = j.value("theta_min", c.theta_min);
  c.theta_max = j.value("theta_max", c.theta_max);
  c.perturbation.p = j.value("perturb_p", c.perturbation.p);
  c.perturbation.l_max = j.value("perturb_l_max", c.perturbation.l_max);
  c.episode_cap = j.value("episode_cap", c.episode_cap);
  c.speeds = j.value("speeds", c.speeds);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

GoalSample sample_goal(std::mt19937_64& rng, const CollectConfig& cfg, const CameraModel& cam) {
  std::uniform_real_distribution<double> rho(cfg.rho_min, cfg.rho_max);
  std::uniform_real_distribution<double> theta(cfg.theta_min, cfg.theta_max);
  GoalSample g;
  g.goal.rho = rho(rng);
  g.goal.theta = theta(rng);
  auto b = project(g.goal, cam);
  if (!b) throw std::logic_error("sampled goal outside the field of view");
  g.bbox = *b;
  return g;
}

std::vector<std::pair<std::size_t, std::size_t>> Dataset::episodes() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= transitions.size(); ++i) {
    if (i == transitions.size() || transitions[i].episode != transitions[begin].episode) {
      out.emplace_back(begin, i);
      begin = i;
    }
  }
  return out;
}

Dataset collect(const WorldConfig& world, const CollectConfig& cfg, const CameraModel& cam,
                const ControllerConfig& ctl) {
  world.validate();
  cfg.validate();
  Dataset d;
  d.header.camera = cam;
  d.header.world = world;
  d.header.collect = cfg;
  d.header.controller = ctl;
  d.header.seed = cfg.seed;

  std::mt19937_64 master(cfg.seed);
  int episode = 0;
  while (static_cast<long>(d.transitions.size()) < cfg.n_steps) {
    const std::uint64_t world_seed = master();
    const std::uint64_t perturb_seed = master();
    const GoalSample goal = sample_goal(master, cfg, cam);
    WorldConfig wc = world;
    wc.max_steps = cfg.episode_cap;
    if (!cfg.speeds.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, cfg.speeds.size() - 1);
      wc.target_speed = cfg.speeds[pick(master)];
    }
    World w = World::reset(wc, world_seed);
    Perturber perturber(cfg.perturbation, perturb_seed);
    PidPair pid;

    std::optional<BBox> o = w.observe_bbox(cam);
    RelativeState s = w.relative();
    while (w.status().running()) {
      const Action a = perturber.apply(state_pid_action(s, goal.goal, pid, wc.dt, ctl));
      const auto res = w.step(a);
      Transition t;
      t.episode = episode;
      t.step = res.status.step - 1;
      t.s = s;
      t.o = o;
      t.a = a.normalized();
      t.r = transition_reward(o, goal.bbox);
      t.o2 = w.observe_bbox(cam);
      t.s2 = res.rel;
      t.goal = goal.bbox;
      t.goal_state = goal.goal;
      t.terminal = res.status.state == RunState::kLost;
      d.transitions.push_back(t);
      o = t.o2;
      s = t.s2;
    }
    ++episode;
  }
  return d;
}

// ---- serialization ----

namespace {

nlohmann::json state_json(const RelativeState& s) { return {s.rho, s.theta}; }

RelativeState state_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("state must be [rho, theta]");
  return {j[0].get<double>(), j[1].get<double>()};
}

nlohmann::json obs_json(const std::optional<BBox>& b) {
  return b ? to_json(*b) : nlohmann::json(nullptr);
}

std::optional<BBox> obs_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return bbox_from_json(j);
}

nlohmann::json header_json(const DatasetHeader& h) {
  nlohmann::json j;
  j["schema"] = kSchema;
  j["version"] = h.version;
  j["camera"] = h.camera;
  j["world"] = h.world;
  j["collect"] = h.collect;
  j["controller"] = h.controller;
  j["seed"] = h.seed;
  if (!h.merged_from.empty()) j["merged_from"] = h.merged_from;
  return j;
}

DatasetHeader header_from(const nlohmann::json& j) {
  if (j.value("schema", "") != kSchema) throw std::invalid_argument("not a trajectory file");
  DatasetHeader h;
  h.version = j.at("version").get<int>();
  if (h.version != kVersion) {
    throw std::invalid_argument(fmt::format("unsupported schema version {}", h.version));
  }
  h.camera = j.at("camera").get<CameraModel>();
  h.world = j.at("world").get<WorldConfig>();
  h.collect = j.at("collect").get<CollectConfig>();
  h.controller = j.at("controller").get<ControllerConfig>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.merged_from = j.value("merged_from", std::vector<std::string>{});
  return h;
}

void validate_transition(const Transition& t) {
  for (const auto& o : {t.o, t.o2}) {
    if (o && !is_valid(*o)) throw std::invalid_argument("invalid observation box");
  }
  if (!is_valid(t.goal)) throw std::invalid_argument("invalid goal box");
  for (double a : t.a) {
    if (!(a >= -1.0 && a <= 1.0)) throw std::invalid_argument("action outside [-1, 1]");
  }
  if (!(t.r >= 0.0 && t.r <= 1.0)) throw std::invalid_argument("reward outside [0, 1]");
  const double expect = transition_reward(t.o, t.goal);
  if (std::abs(expect - t.r) > kRewardTolerance) {
    throw std::invalid_argument(
        fmt::format("reward {} does not match IoU recomputation {}", t.r, expect));
  }
  if (t.s.rho < 0.0 || t.s2.rho < 0.0) throw std::invalid_argument("negative rho");
  if (t.step < 0 || t.episode < 0) throw std::invalid_argument("negative index");
}

}  // namespace

nlohmann::json transition_to_json(const Transition& t) {
  return {{"ep", t.episode},       {"t", t.step},         {"s", state_json(t.s)},
          {"o", obs_json(t.o)},    {"a", t.a},            {"r", t.r},
          {"o2", obs_json(t.o2)},  {"s2", state_json(t.s2)}, {"g", to_json(t.goal)},
          {"gs", state_json(t.goal_state)}, {"term", t.terminal}};
}

Transition transition_from_json(const nlohmann::json& j) {
  Transition t;
  t.episode = j.at("ep").get<int>();
  t.step = j.at("t").get<int>();
  t.s = state_from(j.at("s"));
  t.o = obs_from(j.at("o"));
  t.a = j.at("a").get<std::array<double, 2>>();
  t.r = j.at("r").get<double>();
  t.o2 = obs_from(j.at("o2"));
  t.s2 = state_from(j.at("s2"));
  t.goal = bbox_from_json(j.at("g"));
  t.goal_state = state_from(j.at("gs"));
  t.terminal = j.at("term").get<bool>();
  return t;
}

void write_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << header_json(d.header).dump() << '\n';
  for (const auto& t : d.transitions) out << transition_to_json(t).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Dataset d;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  const Transition* prev = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        d.header = header_from(j);
        have_header = true;
        continue;
      }
      Transition t = transition_from_json(j);
      validate_transition(t);
      if (prev) {
        if (t.episode == prev->episode) {
          if (t.step != prev->step + 1) throw std::invalid_argument("step index gap");
          if (prev->terminal) throw std::invalid_argument("transition after terminal step");
        } else if (t.episode < prev->episode) {
          throw std::invalid_argument("episode ids must not decrease");
        }
      }
      d.transitions.push_back(std::move(t));
      prev = &d.transitions.back();
    } catch (const DatasetFormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw DatasetFormatError(path, lineno, e.what());
    }
  }
  if (!have_header) throw DatasetFormatError(path, lineno, "missing header");
  return d;
}

Dataset merge_datasets(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::invalid_argument("nothing to merge");
  Dataset out;
  int next_episode = 0;
  for (std::size_t k = 0; k < paths.size(); ++k) {
    Dataset shard = read_dataset(paths[k]);
    if (k == 0) {
      out.header = shard.header;
    } else if (nlohmann::json(shard.header.camera) != nlohmann::json(out.header.camera)) {
      throw std::invalid_argument(paths[k] + ": camera model differs from first shard");
    }
    out.header.merged_from.push_back(paths[k]);
    int last = -1, mapped = next_episode - 1;
    for (auto& t : shard.transitions) {
      if (t.episode != last) {
        last = t.episode;
        mapped = next_episode++;
      }
      t.episode = mapped;
      out.transitions.push_back(t);
    }
  }
  return out;
}

std::string shard_name(std::uint64_t seed) { return fmt::format("traj-{}.jsonl", seed); }

}  // namespace itrack
