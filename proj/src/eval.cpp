#include "itrack/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace itrack {

namespace {
constexpr double kTruthRhoMin = 150.0;
constexpr double kTruthRhoMax = 750.0;
constexpr double kTruthThetaLimit = 44.0;
}  // namespace

void GoalSpec::validate() const {
  if (!(rho > 0.0 && rho <= kEvalRhoMax && std::abs(theta) <= 0.5 * kEvalThetaMax)) {
    throw std::invalid_argument(fmt::format("goal ({}, {}) outside the visibility sector", rho, theta));
  }
}

GoalSpec goal_close() { return {200.0, 0.0, "close"}; }
GoalSpec goal_far() { return {450.0, 0.0, "far"}; }
GoalSpec goal_left() { return {350.0, -20.0, "left"}; }
GoalSpec goal_right() { return {350.0, 20.0, "right"}; }
std::vector<GoalSpec> canonical_goals() { return {goal_close(), goal_far(), goal_left(), goal_right()}; }
GoalSpec initial_goal() { return {kReferenceRho, kReferenceTheta, "custom"}; }

double eval_reward(const RelativeState& rel, const GoalSpec& g) {
  return 1.0 - std::abs(rel.rho - g.rho) / kEvalRhoMax - std::abs(rel.theta - g.theta) / kEvalThetaMax;
}

std::vector<std::string> instructions_for(const GoalSpec& g) {
  std::vector<std::string> out;
  for (const auto& row : instruction_table()) {
    if (row.intent.kind == GoalKind::kAbsolute && row.intent.rho == g.rho &&
        row.intent.theta == g.theta) {
      out.push_back(row.text);
    }
  }
  return out;
}

// ---- controllers ----

Action StatePidController::act(const ControlInput& in) {
  if (!goal_box_ || !(*goal_box_ == in.goal)) {
    try {
      goal_state_ = unproject(in.goal, cam_);
    } catch (const AmbiguousDepthError&) {
      // keep the previous goal state
    }
    goal_box_ = in.goal;
  }
  return state_pid_action(in.rel, goal_state_, pid_, in.dt, cfg_);
}

Action BboxPidController::act(const ControlInput& in) {
  return bbox_pid_action(in.obs, in.goal, pid_, in.dt, cfg_);
}

PolicyController::PolicyController(std::shared_ptr<const PolicyNetwork> net, bool deterministic,
                                   std::uint64_t seed, CameraModel cam)
    : net_(std::move(net)), deterministic_(deterministic), seed_(seed), cam_(cam), rng_(seed) {
  if (!net_) throw std::invalid_argument("policy controller needs a network");
  hidden_ = zero_hidden(*net_);
}

void PolicyController::reset() {
  rng_.seed(seed_);
  hidden_ = zero_hidden(*net_);
}

Action PolicyController::act(const ControlInput& in) {
  PolicyStep s = itrack::act(*net_, in.obs, in.goal, hidden_, deterministic_, &rng_, cam_);
  hidden_ = std::move(s.hidden);
  return s.action;
}

RandomController::RandomController(std::uint64_t seed, int hold)
    : seed_(seed), hold_(hold), rng_(seed) {
  if (hold < 1) throw std::invalid_argument("hold must be positive");
}

Action RandomController::act(const ControlInput& in) {
  if (in.tick % hold_ == 0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double lin = u(rng_);
    current_ = Action::from_normalized(lin, u(rng_));
  }
  return current_;
}

ControllerFactory controller_factory(const std::string& name,
                                     std::shared_ptr<const PolicyNetwork> net,
                                     const ControllerConfig& ctl, const CameraModel& cam) {
  if (name == "pid") {
    return [ctl, cam](std::uint64_t) { return std::make_unique<StatePidController>(ctl, cam); };
  }
  if (name == "bbox-pid") {
    return [ctl](std::uint64_t) { return std::make_unique<BboxPidController>(ctl); };
  }
  if (name == "policy") {
    if (!net) throw std::invalid_argument("controller 'policy' needs a checkpoint");
    return [net, cam](std::uint64_t seed) {
      return std::make_unique<PolicyController>(net, true, seed, cam);
    };
  }
  if (name == "random") {
    return [](std::uint64_t seed) { return std::make_unique<RandomController>(seed); };
  }
  if (name == "oracle") {
    return [](std::uint64_t) { return std::make_unique<TeleportOracle>(); };
  }
  throw std::invalid_argument("unknown controller '" + name + "'");
}

// ---- episodes ----

GoalSpec resolve_truth(const std::string& text, const RelativeState& at_issue) {
  std::optional<GoalIntent> intent;
  for (const auto& row : instruction_table()) {
    if (row.text == text) intent = row.intent;
  }
  if (!intent) intent = classify_instruction(text);
  if (intent->kind == GoalKind::kAbsolute) {
    GoalSpec g{intent->rho, intent->theta, "custom"};
    for (const auto& c : canonical_goals()) {
      if (c.rho == g.rho && c.theta == g.theta) g.label = c.label;
    }
    return g;
  }
  return {std::clamp(at_issue.rho + intent->rho, kTruthRhoMin, kTruthRhoMax),
          std::clamp(at_issue.theta + intent->theta, -kTruthThetaLimit, kTruthThetaLimit),
          "custom"};
}

namespace {

BBox goal_box_of(const GoalSpec& g, const CameraModel& cam) {
  auto b = project(g.state(), cam);
  if (!b) throw std::invalid_argument("goal outside the field of view");
  return *b;
}

struct PendingGoal {
  int ready_tick;
  std::size_t segment;
  BBox box;
};

}  // namespace

EpisodeRecord run_episode(Controller& controller, const std::vector<ScheduleItem>& schedule,
                          const EpisodeConfig& cfg, std::uint64_t world_seed,
                          AlignerBackend& backend, MemoryBank& bank,
                          const TickObserver& observer) {
  if (cfg.aligner_latency_ticks < 0) throw std::invalid_argument("negative aligner latency");
  cfg.initial.validate();
  std::vector<ScheduleItem> items = schedule;
  std::stable_sort(items.begin(), items.end(),
                   [](const ScheduleItem& a, const ScheduleItem& b) { return a.tick < b.tick; });

  World w = World::reset(cfg.world, world_seed);
  controller.reset();
  EpisodeRecord rec;
  GoalSpec truth = cfg.initial;
  BBox goal = goal_box_of(truth, cfg.camera);
  rec.segments.push_back({0, 0, truth, "", goal, std::nullopt});
  std::vector<PendingGoal> pending;
  std::size_t next = 0;
  std::optional<BBox> obs = w.observe_bbox(cfg.camera);

  while (w.status().running()) {
    const int tick = w.status().step;
    for (; next < items.size() && items[next].tick <= tick; ++next) {
      const ScheduleItem& it = items[next];
      Segment seg;
      seg.start_tick = tick;
      seg.text = it.text;
      seg.truth = it.truth ? *it.truth : resolve_truth(it.text, w.relative());
      seg.truth.validate();
      truth = seg.truth;
      if (it.text.empty()) {
        seg.goal = goal_box_of(seg.truth, cfg.camera);
        seg.applied_tick = tick;
        goal = seg.goal;
        rec.segments.push_back(seg);
        continue;
      }
      // Stale-goal contract: a failed parse leaves the previous goal active.
      seg.applied_tick = -1;
      seg.goal = goal;
      try {
        const SpatialGoal sg = align({it.text, tick}, obs.value_or(goal), bank, backend);
        seg.goal = sg.bbox;
        seg.provenance = sg.provenance;
        pending.push_back({tick + cfg.aligner_latency_ticks, rec.segments.size(), sg.bbox});
      } catch (const UnrecognizedInstructionError&) {
      } catch (const BackendError&) {
      }
      rec.segments.push_back(seg);
    }
    for (auto p = pending.begin(); p != pending.end();) {
      if (p->ready_tick <= tick) {
        goal = p->box;
        rec.segments[p->segment].applied_tick = tick;
        p = pending.erase(p);
      } else {
        ++p;
      }
    }

    ControlInput in;
    in.tick = tick;
    in.dt = cfg.world.dt;
    in.obs = obs;
    in.rel = w.relative();
    in.goal = goal;
    w.step(controller.act(in));
    if (auto t = controller.teleport(truth)) w.place_tracker_relative(*t);

    const double r = eval_reward(w.relative(), truth);
    rec.rewards.push_back(r);
    rec.accumulated += r;
    obs = w.observe_bbox(cfg.camera);
    rec.center_distance.push_back(obs ? std::hypot(obs->cx - goal.cx, obs->cy - goal.cy)
                                      : std::numeric_limits<double>::quiet_NaN());
    if (observer) observer(w, obs, goal, r);
  }
  rec.length = w.status().step;
  rec.outcome = w.status().state;
  return rec;
}

// ---- aggregate evaluation ----

void EvalConfig::validate() const {
  if (episodes < 1) throw std::invalid_argument("episodes must be positive");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be positive");
  if (switches < 0 || switches > static_cast<int>(canonical_goals().size())) {
    throw std::invalid_argument("switches must lie in [0, 4]");
  }
  if (!(target_speed >= 0.0)) throw std::invalid_argument("target_speed must be non-negative");
  if (aligner_latency_ticks < 0) throw std::invalid_argument("negative aligner latency");
  world.validate();
  camera.validate();
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"episodes", c.episodes},
       {"max_steps", c.max_steps},
       {"switches", c.switches},
       {"target_speed", c.target_speed},
       {"seed", c.seed},
       {"aligner_latency_ticks", c.aligner_latency_ticks},
       {"world", c.world},
       {"camera", c.camera}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c = EvalConfig{};
  c.episodes = j.value("episodes", c.episodes);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.switches = j.value("switches", c.switches);
  c.target_speed = j.value("target_speed", c.target_speed);
  c.seed = j.value("seed", c.seed);
  c.aligner_latency_ticks = j.value("aligner_latency_ticks", c.aligner_latency_ticks);
  if (j.contains("world")) c.world = j.at("world").get<WorldConfig>();
  if (j.contains("camera")) c.camera = j.at("camera").get<CameraModel>();
  c.validate();
}

std::vector<ScheduleItem> make_schedule(const EvalConfig& cfg, std::mt19937_64& rng) {
  std::vector<GoalSpec> goals = canonical_goals();
  std::shuffle(goals.begin(), goals.end(), rng);
  std::vector<ScheduleItem> out;
  for (int k = 0; k < cfg.switches; ++k) {
    const auto texts = instructions_for(goals[k]);
    std::uniform_int_distribution<std::size_t> pick(0, texts.size() - 1);
    ScheduleItem it;
    it.tick = (k + 1) * cfg.max_steps / (cfg.switches + 1);
    it.text = texts[pick(rng)];
    it.truth = goals[k];
    out.push_back(it);
  }
  return out;
}

Metrics aggregate(const std::vector<EpisodeRecord>& records, int max_steps) {
  Metrics m;
  m.episodes = static_cast<int>(records.size());
  if (records.empty()) return m;
  for (const auto& r : records) {
    m.ar += r.accumulated;
    m.el += r.length;
    m.sr += r.length >= max_steps ? 1.0 : 0.0;
  }
  m.ar /= m.episodes;
  m.el /= m.episodes;
  m.sr /= m.episodes;
  return m;
}

EvalResult evaluate(const ControllerFactory& factory, const EvalConfig& cfg) {
  cfg.validate();
  EpisodeConfig ec;
  ec.world = cfg.world;
  ec.world.max_steps = cfg.max_steps;
  ec.world.target_speed = cfg.target_speed;
  ec.camera = cfg.camera;
  ec.aligner_latency_ticks = cfg.aligner_latency_ticks;

  RuleConfig rc;
  rc.camera = cfg.camera;
  RuleBackend backend(rc);
  const MemoryBank seeded = MemoryBank::seeded(cfg.camera);

  EvalResult res;
  std::mt19937_64 master(cfg.seed);
  for (int e = 0; e < cfg.episodes; ++e) {
    const std::uint64_t world_seed = master();
    std::mt19937_64 sched_rng(master());
    const std::uint64_t ctl_seed = master();
    const auto schedule = make_schedule(cfg, sched_rng);
    auto ctl = factory(ctl_seed);
    if (e == 0) res.controller = ctl->name();
    MemoryBank bank = seeded;
    res.records.push_back(run_episode(*ctl, schedule, ec, world_seed, backend, bank));
  }
  res.metrics = aggregate(res.records, cfg.max_steps);
  return res;
}

// ---- parser scoring ----

std::optional<bool> absolute_goal_valid(const GoalIntent& intent, const BBox& goal) {
  if (intent.kind != GoalKind::kAbsolute) return std::nullopt;
  const auto in = [](double v, double lo, double hi) { return v > lo && v < hi; };
  const double area = goal.area();
  if (intent.rho == 200.0 && intent.theta == 0.0) return in(area, 0.06, 0.3) && in(goal.cx, 0.4, 0.6);
  if (intent.rho == 450.0 && intent.theta == 0.0) return in(area, 0.0, 0.06) && in(goal.cx, 0.4, 0.6);
  if (intent.rho == 350.0 && intent.theta == -20.0) return in(goal.cx, 0.0, 0.4);
  if (intent.rho == 350.0 && intent.theta == 20.0) return in(goal.cx, 0.6, 1.0);
  return std::nullopt;
}

std::optional<bool> relative_delta_valid(const GoalIntent& intent, const GoalDelta& d) {
  if (intent.kind != GoalKind::kRelative) return std::nullopt;
  if (intent.rho < 0.0 && intent.theta == 0.0) return d.dw > 0.0 && d.dh > 0.0;
  if (intent.rho > 0.0 && intent.theta == 0.0) return d.dw < 0.0 && d.dh < 0.0;
  if (intent.rho == 0.0 && intent.theta < 0.0) return d.dcx < 0.0;
  if (intent.rho == 0.0 && intent.theta > 0.0) return d.dcx > 0.0;
  return std::nullopt;
}

ParserReport parser_accuracy(AlignerBackend& backend, const CameraModel& cam) {
  const BBox ref = *project({kReferenceRho, kReferenceTheta}, cam);
  const MemoryBank seeded = MemoryBank::seeded(cam);
  ParserReport rep;
  int correct = 0;
  for (const auto& row : instruction_table()) {
    ParserCase c{row.text, row.intent, false, ""};
    try {
      std::optional<bool> ok;
      if (row.intent.kind == GoalKind::kAbsolute) {
        MemoryBank bank = seeded;
        const SpatialGoal g = align({row.text, 0}, ref, bank, backend);
        ok = absolute_goal_valid(row.intent, g.bbox);
        c.detail = format_fixed(g.bbox);
      } else {
        const ParseResult p = backend.parse(row.text, ref);
        ok = relative_delta_valid(row.intent, p.delta);
        c.detail = fmt::format("[{:.6f}, {:.6f}, {:.6f}, {:.6f}]", p.delta.dcx, p.delta.dcy,
                               p.delta.dw, p.delta.dh);
      }
      if (!ok) throw std::logic_error("no validity rule for this intent");
      c.correct = *ok;
    } catch (const std::exception& e) {
      c.detail = e.what();
    }
    correct += c.correct ? 1 : 0;
    rep.cases.push_back(c);
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.cases.size());
  return rep;
}

// ---- reports ----

nlohmann::json report_json(const EvalConfig& cfg, const std::vector<EvalResult>& results) {
  nlohmann::json j;
  j["schema"] = "itrack-eval";
  j["version"] = 1;
  j["config"] = cfg;
  j["results"] = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json eps = nlohmann::json::array();
    for (std::size_t i = 0; i < r.records.size(); ++i) {
      const auto& e = r.records[i];
      nlohmann::json goals = nlohmann::json::array();
      for (const auto& s : e.segments) goals.push_back(s.truth.label);
      eps.push_back({{"index", i},
                     {"length", e.length},
                     {"outcome", to_string(e.outcome)},
                     {"accumulated", e.accumulated},
                     {"goals", goals}});
    }
    j["results"].push_back({{"controller", r.controller},
                            {"AR", r.metrics.ar},
                            {"EL", r.metrics.el},
                            {"SR", r.metrics.sr},
                            {"episodes", eps}});
  }
  return j;
}

std::string report_markdown(const EvalConfig& cfg, const std::vector<EvalResult>& results) {
  std::ostringstream out;
  out << fmt::format("# Evaluation\n\n{} episodes, {} steps, {} switches, target {} m/s, seed {}\n\n",
                     cfg.episodes, cfg.max_steps, cfg.switches, cfg.target_speed, cfg.seed);
  out << "| Controller | AR/EL/SR | AR | EL | SR |\n|---|---|---|---|---|\n";
  for (const auto& r : results) {
    const auto& m = r.metrics;
    out << fmt::format("| {} | {:.0f}/{:.0f}/{:.2f} | {:.2f} | {:.1f} | {:.2f} |\n", r.controller,
                       m.ar, m.el, m.sr, m.ar, m.el, m.sr);
  }
  return out.str();
}

void write_reports(const std::string& dir, const EvalConfig& cfg,
                   const std::vector<EvalResult>& results) {
  std::filesystem::create_directories(dir);
  const auto base = std::filesystem::path(dir);
  std::ofstream js(base / "report.json");
  js << report_json(cfg, results).dump(2) << '\n';
  std::ofstream md(base / "report.md");
  md << report_markdown(cfg, results);
  if (!js || !md) throw std::runtime_error("cannot write reports in " + dir);
}

}  // namespace itrack
