#pragma once

// Live sessions: a paced simulation loop, an aligner worker and a bounded
// outbound queue, plus the websocket/static-file server around them.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "itrack/aligner.hpp"
#include "itrack/controllers.hpp"
#include "itrack/eval.hpp"
#include "itrack/policy.hpp"
#include "itrack/sim.hpp"

namespace itrack {

constexpr int kWireVersion = 1;

// ---- wire messages ----

class WireError : public std::runtime_error {
 public:
  WireError(std::optional<std::string> ref, const std::string& what)
      : std::runtime_error(what), ref_(std::move(ref)) {}
  const std::optional<std::string>& ref() const { return ref_; }

 private:
  std::optional<std::string> ref_;
};

enum class ClientKind { kInstruction, kGoalBox, kControl };
enum class ControlCommand { kPause, kResume, kReset, kSpeed, kController };

struct ClientMessage {
  ClientKind kind = ClientKind::kInstruction;
  std::string ref;
  std::string text;                 // instruction
  BBox bbox;                        // goal_box, clamped into the unit square
  ControlCommand command = ControlCommand::kPause;
  double speed = 0.0;               // control speed, m/s
  std::string controller;           // control controller
};

// Throws WireError carrying the ref when one could be read.
ClientMessage parse_client_message(const std::string& raw);

nlohmann::json ack_message(const std::string& ref, const std::string& detail);
nlohmann::json error_message(const std::optional<std::string>& ref, const std::string& detail);

// The goal currently steering the controller.
struct ActiveGoal {
  BBox bbox;
  Provenance provenance = Provenance::kGenerated;
  std::string source;  // instruction text, empty for defaults and drawn boxes
  std::string ref;     // client message that produced it
};

struct TickState {
  std::int64_t tick = 0;   // session clock, monotone across episodes
  int episode = 0;
  int step = 0;            // within the episode
  RunState status = RunState::kRunning;
  Pose2D tracker;
  Pose2D target;
  RelativeState rel;
  std::optional<BBox> obs;
  ActiveGoal goal;
  std::int64_t goal_since = 0;  // tick at which this goal first steered
  double reward = 0.0;     // IoU of observation and goal, 0 when lost
  std::string controller;
  bool paused = false;
};

nlohmann::json state_message(const TickState& s);

// ---- session ----

struct SessionConfig {
  WorldConfig world;
  CameraModel camera;
  ControllerConfig control;
  double tick_hz = 50.0;
  bool realtime = true;          // false runs ticks back to back
  int decimation = 1;            // broadcast every n-th tick
  std::size_t outbound_capacity = 256;  // state messages kept for a slow client
  std::chrono::milliseconds aligner_latency{0};  // injected before each parse
  std::string controller = "";   // empty: policy when loaded, else pid
  std::shared_ptr<const PolicyNetwork> policy;
  std::uint64_t seed = 0;
  bool reset_on_end = true;      // start a new episode when one ends
  std::int64_t max_ticks = 0;    // stop after this many ticks, 0 runs forever

  void validate() const;
};

void to_json(nlohmann::json& j, const SessionConfig& c);
void from_json(const nlohmann::json& j, SessionConfig& c);

// Latest-goal slot. Readers get a consistent snapshot; writers replace it
// whole.
class GoalSlot {
 public:
  explicit GoalSlot(ActiveGoal g) : goal_(std::make_shared<const ActiveGoal>(std::move(g))) {}
  std::shared_ptr<const ActiveGoal> load() const {
    std::lock_guard<std::mutex> lock(mu_);
    return goal_;
  }
  void store(ActiveGoal g) {
    auto next = std::make_shared<const ActiveGoal>(std::move(g));
    std::lock_guard<std::mutex> lock(mu_);
    goal_.swap(next);
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const ActiveGoal> goal_;
};

// Replies are never dropped; state messages beyond capacity evict the oldest.
class OutboundQueue {
 public:
  explicit OutboundQueue(std::size_t capacity) : capacity_(capacity) {}
  void push_reply(std::string msg);
  void push_state(std::string msg);
  // Waits up to `timeout` for a message; nullopt after timeout or close.
  std::optional<std::string> pop(std::chrono::milliseconds timeout);
  void close();
  std::uint64_t dropped() const { return dropped_.load(); }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> replies_;
  std::deque<std::string> states_;
  bool closed_ = false;
  std::atomic<std::uint64_t> dropped_{0};
};

struct SessionStats {
  std::int64_t ticks = 0;
  int episodes_completed = 0;
  int episodes_lost = 0;
  int goals_applied = 0;
  std::uint64_t dropped_states = 0;
  std::vector<double> tick_periods;  // seconds between tick starts
};

class Session {
 public:
  Session(SessionConfig cfg, std::unique_ptr<AlignerBackend> backend, MemoryBank bank);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  void start();
  void stop();
  // Blocks until the tick budget is spent or stop() is called.
  void wait();

  // Handles one client message; the ack or error goes to the outbound queue.
  void submit(const std::string& raw);
  std::optional<std::string> next_outbound(std::chrono::milliseconds timeout);

  std::shared_ptr<const ActiveGoal> goal() const { return goal_.load(); }
  SessionStats stats() const;
  bool running() const { return running_.load(); }

 private:
  struct Pending {
    std::string text;
    std::string ref;
    std::optional<BBox> obs;
    BBox goal;
  };

  void sim_loop();
  void aligner_loop();
  void reply(const nlohmann::json& j) { out_.push_reply(j.dump()); }
  std::unique_ptr<Controller> make_controller(const std::string& name) const;

  SessionConfig cfg_;
  std::unique_ptr<AlignerBackend> backend_;
  MemoryBank bank_;
  GoalSlot goal_;
  OutboundQueue out_;

  // Control commands handed to the sim loop, applied at the next tick.
  std::mutex control_mu_;
  std::deque<ClientMessage> controls_;

  std::mutex align_mu_;
  std::condition_variable align_cv_;
  std::deque<Pending> instructions_;

  // Last observation published by the sim loop for the aligner.
  mutable std::mutex obs_mu_;
  std::optional<BBox> last_obs_;
  std::int64_t last_tick_ = 0;

  mutable std::mutex stats_mu_;
  SessionStats stats_;

  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  std::thread sim_thread_;
  std::thread aligner_thread_;
};

// ---- server ----

struct ServerConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
  std::string static_dir;      // served at /, empty disables
  SessionConfig session;
  std::string memory_path;     // bank to load, empty seeds from the table
  std::string backend = "rule";  // rule | remote
};

std::unique_ptr<AlignerBackend> make_backend(const std::string& name, const CameraModel& cam);

// Content type for a static file name.
std::string mime_type(const std::string& path);
// Maps a request target onto a file under root; nullopt when it escapes root.
std::optional<std::string> resolve_static(const std::string& root, const std::string& target);

class Server {
 public:
  explicit Server(ServerConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  unsigned short start();
  void stop();
  // Serves on the calling thread until stop().
  void run();

  struct Impl;  // defined with the connection handlers

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace itrack
