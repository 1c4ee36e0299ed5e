#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "itrack/service.hpp"

namespace itrack {

// ---- wire messages ----

namespace {

std::string ref_of(const nlohmann::json& j) {
  const auto it = j.find("ref");
  if (it == j.end()) throw WireError(std::nullopt, "missing ref");
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<long long>());
  throw WireError(std::nullopt, "ref must be a string or integer");
}

const nlohmann::json& field(const nlohmann::json& j, const char* name, const std::string& ref) {
  const auto it = j.find(name);
  if (it == j.end()) throw WireError(ref, fmt::format("missing field '{}'", name));
  return *it;
}

nlohmann::json pose_json(const Pose2D& p) { return {{"x", p.x}, {"y", p.y}, {"yaw", p.yaw}}; }

}  // namespace

ClientMessage parse_client_message(const std::string& raw) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error& e) {
    throw WireError(std::nullopt, fmt::format("malformed JSON: {}", e.what()));
  }
  if (!j.is_object()) throw WireError(std::nullopt, "message must be a JSON object");
  ClientMessage m;
  m.ref = ref_of(j);
  if (j.contains("v") && j["v"] != kWireVersion) {
    throw WireError(m.ref, fmt::format("unsupported wire version {}", j["v"].dump()));
  }
  const auto& type = field(j, "type", m.ref);
  if (!type.is_string()) throw WireError(m.ref, "type must be a string");
  const std::string t = type.get<std::string>();
  try {
    if (t == "instruction") {
      m.kind = ClientKind::kInstruction;
      m.text = field(j, "text", m.ref).get<std::string>();
      if (m.text.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw WireError(m.ref, "empty instruction");
      }
    } else if (t == "goal_box") {
      m.kind = ClientKind::kGoalBox;
      const BBox b = bbox_from_json(field(j, "bbox", m.ref));
      if (!(b.w > 0.0 && b.h > 0.0)) throw WireError(m.ref, "goal box must have positive size");
      m.bbox = clamp_to_unit(b);
    } else if (t == "control") {
      m.kind = ClientKind::kControl;
      const std::string c = field(j, "command", m.ref).get<std::string>();
      if (c == "pause") {
        m.command = ControlCommand::kPause;
      } else if (c == "resume") {
        m.command = ControlCommand::kResume;
      } else if (c == "reset") {
        m.command = ControlCommand::kReset;
      } else if (c == "speed") {
        m.command = ControlCommand::kSpeed;
        m.speed = field(j, "value", m.ref).get<double>();
        if (!(m.speed >= 0.0 && std::isfinite(m.speed))) {
          throw WireError(m.ref, "speed must be a non-negative number");
        }
      } else if (c == "controller") {
        m.command = ControlCommand::kController;
        m.controller = field(j, "value", m.ref).get<std::string>();
      } else {
        throw WireError(m.ref, fmt::format("unknown control command '{}'", c));
      }
    } else {
      throw WireError(m.ref, fmt::format("unknown message type '{}'", t));
    }
  } catch (const WireError&) {
    throw;
  } catch (const std::exception& e) {
    throw WireError(m.ref, e.what());
  }
  return m;
}

nlohmann::json ack_message(const std::string& ref, const std::string& detail) {
  return {{"type", "ack"}, {"v", kWireVersion}, {"ref", ref}, {"detail", detail}};
}

nlohmann::json error_message(const std::optional<std::string>& ref, const std::string& detail) {
  return {{"type", "error"},
          {"v", kWireVersion},
          {"ref", ref ? nlohmann::json(*ref) : nlohmann::json(nullptr)},
          {"detail", detail}};
}

nlohmann::json state_message(const TickState& s) {
  return {{"type", "state"},
          {"v", kWireVersion},
          {"tick", s.tick},
          {"episode", s.episode},
          {"step", s.step},
          {"status", to_string(s.status)},
          {"paused", s.paused},
          {"controller", s.controller},
          {"tracker", pose_json(s.tracker)},
          {"target", pose_json(s.target)},
          {"rel", {{"rho", s.rel.rho}, {"theta", s.rel.theta}}},
          {"obs", s.obs ? to_json(*s.obs) : nlohmann::json(nullptr)},
          {"goal",
           {{"bbox", to_json(s.goal.bbox)},
            {"provenance", to_string(s.goal.provenance)},
            {"source", s.goal.source},
            {"ref", s.goal.ref},
            {"since", s.goal_since}}},
          {"reward", s.reward}};
}

// ---- config ----

void SessionConfig::validate() const {
  world.validate();
  camera.validate();
  if (!(tick_hz > 0.0)) throw std::invalid_argument("tick_hz must be positive");
  if (decimation < 1) throw std::invalid_argument("decimation must be positive");
  if (outbound_capacity < 1) throw std::invalid_argument("outbound_capacity must be positive");
  if (aligner_latency.count() < 0) throw std::invalid_argument("negative aligner latency");
  if (max_ticks < 0) throw std::invalid_argument("max_ticks must be non-negative");
  if (controller == "policy" && !policy) {
    throw std::invalid_argument("controller 'policy' needs a checkpoint");
  }
}

void to_json(nlohmann::json& j, const SessionConfig& c) {
  j = {{"world", c.world},
       {"camera", c.camera},
       {"control", c.control},
       {"tick_hz", c.tick_hz},
       {"realtime", c.realtime},
       {"decimation", c.decimation},
       {"outbound_capacity", c.outbound_capacity},
       {"aligner_latency_ms", c.aligner_latency.count()},
       {"controller", c.controller},
       {"seed", c.seed},
       {"reset_on_end", c.reset_on_end},
       {"max_ticks", c.max_ticks}};
}

void from_json(const nlohmann::json& j, SessionConfig& c) {
  c = SessionConfig{};
  if (j.contains("world")) c.world = j.at("world").get<WorldConfig>();
  if (j.contains("camera")) c.camera = j.at("camera").get<CameraModel>();
  if (j.contains("control")) c.control = j.at("control").get<ControllerConfig>();
  c.tick_hz = j.value("tick_hz", c.tick_hz);
  c.realtime = j.value("realtime", c.realtime);
  c.decimation = j.value("decimation", c.decimation);
  c.outbound_capacity = j.value("outbound_capacity", c.outbound_capacity);
  c.aligner_latency = std::chrono::milliseconds(
      j.value("aligner_latency_ms", static_cast<long long>(c.aligner_latency.count())));
  c.controller = j.value("controller", c.controller);
  c.seed = j.value("seed", c.seed);
  c.reset_on_end = j.value("reset_on_end", c.reset_on_end);
  c.max_ticks = j.value("max_ticks", c.max_ticks);
}

// ---- outbound queue ----

void OutboundQueue::push_reply(std::string msg) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_) return;
    replies_.push_back(std::move(msg));
  }
  cv_.notify_one();
}

void OutboundQueue::push_state(std::string msg) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_) return;
    if (states_.size() >= capacity_) {
      states_.pop_front();
      dropped_.fetch_add(1);
    }
    states_.push_back(std::move(msg));
  }
  cv_.notify_one();
}

std::optional<std::string> OutboundQueue::pop(std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return closed_ || !replies_.empty() || !states_.empty(); });
  auto& q = !replies_.empty() ? replies_ : states_;
  if (q.empty()) return std::nullopt;
  std::string m = std::move(q.front());
  q.pop_front();
  return m;
}

void OutboundQueue::close() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

// ---- session ----

namespace {

ActiveGoal default_goal(const CameraModel& cam) {
  const auto b = project(initial_goal().state(), cam);
  if (!b) throw std::invalid_argument("default goal outside the field of view");
  return {*b, Provenance::kGenerated, "", ""};
}

}  // namespace

Session::Session(SessionConfig cfg, std::unique_ptr<AlignerBackend> backend, MemoryBank bank)
    : cfg_(std::move(cfg)),
      backend_(std::move(backend)),
      bank_(std::move(bank)),
      goal_(default_goal(cfg_.camera)),
      out_(cfg_.outbound_capacity) {
  cfg_.validate();
  if (!backend_) throw std::invalid_argument("session needs an aligner backend");
  if (cfg_.controller.empty()) cfg_.controller = cfg_.policy ? "policy" : "pid";
  make_controller(cfg_.controller);
}

Session::~Session() { stop(); }

std::unique_ptr<Controller> Session::make_controller(const std::string& name) const {
  if (name == "policy" && !cfg_.policy) {
    throw std::invalid_argument("no policy checkpoint loaded");
  }
  if (name != "pid" && name != "bbox-pid" && name != "policy" && name != "random") {
    throw std::invalid_argument(fmt::format("unknown controller '{}'", name));
  }
  return controller_factory(name, cfg_.policy, cfg_.control, cfg_.camera)(cfg_.seed);
}

void Session::start() {
  if (running_.exchange(true)) return;
  stopping_ = false;
  sim_thread_ = std::thread([this] { sim_loop(); });
  aligner_thread_ = std::thread([this] { aligner_loop(); });
}

void Session::wait() {
  if (sim_thread_.joinable()) sim_thread_.join();
}

void Session::stop() {
  {
    std::lock_guard<std::mutex> lock(align_mu_);
    stopping_ = true;
  }
  align_cv_.notify_all();
  if (sim_thread_.joinable()) sim_thread_.join();
  if (aligner_thread_.joinable()) aligner_thread_.join();
  out_.close();
  running_ = false;
}

std::optional<std::string> Session::next_outbound(std::chrono::milliseconds timeout) {
  return out_.pop(timeout);
}

SessionStats Session::stats() const {
  std::lock_guard<std::mutex> lock(stats_mu_);
  SessionStats s = stats_;
  s.dropped_states = out_.dropped();
  return s;
}

void Session::submit(const std::string& raw) {
  ClientMessage m;
  try {
    m = parse_client_message(raw);
  } catch (const WireError& e) {
    reply(error_message(e.ref(), e.what()));
    return;
  }
  switch (m.kind) {
    case ClientKind::kInstruction: {
      Pending p;
      p.text = m.text;
      p.ref = m.ref;
      {
        std::lock_guard<std::mutex> lock(obs_mu_);
        p.obs = last_obs_;
      }
      p.goal = goal_.load()->bbox;
      {
        std::lock_guard<std::mutex> lock(align_mu_);
        instructions_.push_back(std::move(p));
      }
      align_cv_.notify_one();
      reply(ack_message(m.ref, "queued"));
      return;
    }
    case ClientKind::kGoalBox:
      goal_.store({m.bbox, Provenance::kUserBox, "", m.ref});
      reply(ack_message(m.ref, "goal set"));
      return;
    case ClientKind::kControl:
      if (m.command == ControlCommand::kController) {
        try {
          make_controller(m.controller);
        } catch (const std::exception& e) {
          reply(error_message(m.ref, e.what()));
          return;
        }
      }
      {
        std::lock_guard<std::mutex> lock(control_mu_);
        controls_.push_back(m);
      }
      reply(ack_message(m.ref, "applied at next tick"));
      return;
  }
}

void Session::aligner_loop() {
  for (;;) {
    Pending p;
    {
      std::unique_lock<std::mutex> lock(align_mu_);
      align_cv_.wait(lock, [&] { return stopping_.load() || !instructions_.empty(); });
      if (stopping_) return;
      p = std::move(instructions_.front());
      instructions_.pop_front();
      if (cfg_.aligner_latency.count() > 0 &&
          align_cv_.wait_for(lock, cfg_.aligner_latency, [&] { return stopping_.load(); })) {
        return;
      }
    }
    try {
      std::int64_t tick;
      {
        std::lock_guard<std::mutex> lock(obs_mu_);
        tick = last_tick_;
      }
      const SpatialGoal g = align({p.text, static_cast<int>(tick)}, p.obs.value_or(p.goal),
                                  bank_, *backend_);
      goal_.store({g.bbox, g.provenance, p.text, p.ref});
    } catch (const std::exception& e) {
      reply(error_message(p.ref, e.what()));
    }
  }
}

void Session::sim_loop() {
  using clock = std::chrono::steady_clock;
  std::mt19937_64 seeds(cfg_.seed);
  WorldConfig wc = cfg_.world;
  World world = World::reset(wc, seeds());
  std::string ctl_name = cfg_.controller;
  std::unique_ptr<Controller> ctl = make_controller(ctl_name);
  ctl->reset();
  int episode = 0;
  bool paused = false;
  std::optional<BBox> obs = world.observe_bbox(cfg_.camera);
  std::shared_ptr<const ActiveGoal> goal = goal_.load();
  std::int64_t goal_since = 0;

  const auto period = std::chrono::duration_cast<clock::duration>(
      std::chrono::duration<double>(1.0 / cfg_.tick_hz));
  auto deadline = clock::now();
  std::optional<clock::time_point> prev_start;

  for (std::int64_t tick = 0; !stopping_; ++tick) {
    if (cfg_.max_ticks > 0 && tick >= cfg_.max_ticks) break;
    if (cfg_.realtime) {
      std::this_thread::sleep_until(deadline);
      deadline += period;
    }
    const auto start = clock::now();
    if (prev_start) {
      std::lock_guard<std::mutex> lock(stats_mu_);
      stats_.tick_periods.push_back(std::chrono::duration<double>(start - *prev_start).count());
    }
    prev_start = start;

    std::deque<ClientMessage> controls;
    {
      std::lock_guard<std::mutex> lock(control_mu_);
      controls.swap(controls_);
    }
    for (const auto& c : controls) {
      switch (c.command) {
        case ControlCommand::kPause: paused = true; break;
        case ControlCommand::kResume: paused = false; break;
        case ControlCommand::kReset:
          world = World::reset(wc, seeds());
          ++episode;
          ctl->reset();
          obs = world.observe_bbox(cfg_.camera);
          break;
        case ControlCommand::kSpeed:
          wc.target_speed = c.speed;
          world.set_target_speed(c.speed);
          break;
        case ControlCommand::kController:
          ctl_name = c.controller;
          ctl = make_controller(ctl_name);
          ctl->reset();
          break;
      }
    }

    auto latest = goal_.load();
    if (latest != goal) {
      goal = std::move(latest);
      goal_since = tick;
      std::lock_guard<std::mutex> lock(stats_mu_);
      ++stats_.goals_applied;
    }

    bool ended = false;
    if (!paused && world.status().running()) {
      ControlInput in;
      in.tick = world.status().step;
      in.dt = wc.dt;
      in.obs = obs;
      in.rel = world.relative();
      in.goal = goal->bbox;
      world.step(ctl->act(in));
      obs = world.observe_bbox(cfg_.camera);
      ended = !world.status().running();
    }
    {
      std::lock_guard<std::mutex> lock(obs_mu_);
      last_obs_ = obs;
      last_tick_ = tick;
    }

    if (tick % cfg_.decimation == 0) {
      TickState s;
      s.tick = tick;
      s.episode = episode;
      s.step = world.status().step;
      s.status = world.status().state;
      s.tracker = world.tracker();
      s.target = world.target();
      s.rel = world.relative();
      s.obs = obs;
      s.goal = *goal;
      s.goal_since = goal_since;
      s.reward = obs ? iou(goal->bbox, *obs) : 0.0;
      s.controller = ctl_name;
      s.paused = paused;
      out_.push_state(state_message(s).dump());
    }

    {
      std::lock_guard<std::mutex> lock(stats_mu_);
      stats_.ticks = tick + 1;
      if (ended && world.status().state == RunState::kCompleted) ++stats_.episodes_completed;
      if (ended && world.status().state == RunState::kLost) ++stats_.episodes_lost;
    }
    if (ended && cfg_.reset_on_end) {
      world = World::reset(wc, seeds());
      ++episode;
      ctl->reset();
      obs = world.observe_bbox(cfg_.camera);
    }
  }
}

}  // namespace itrack
