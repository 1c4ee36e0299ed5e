#include "itrack/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "itrack/aligner.hpp"
#include "itrack/dataset.hpp"
#include "itrack/eval.hpp"
#include "itrack/service.hpp"
#include "itrack/trainer.hpp"

namespace itrack {

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

// --config may appear anywhere; it is read before the flags are bound so
// explicit flags override file values.
std::string find_config(int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

nlohmann::json section(const nlohmann::json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : nlohmann::json::object();
}

struct CollectOptions {
  WorldConfig world;
  CollectConfig collect;
  ControllerConfig control;
  std::string out;
};

struct TrainOptions {
  TrainConfig train;
  std::vector<std::string> data;
  std::string encoder = "vector";
  int eval_episodes = 10;
  bool quiet = false;
};

struct EvalOptions {
  EvalConfig eval;
  std::vector<std::string> controllers{"pid"};
  std::string checkpoint;
  std::string out = ".";
};

struct ParseOptions {
  std::string text;
  std::vector<double> bbox;
  std::string backend = "rule";
  std::string memory;
};

struct ServeOptions {
  ServerConfig server;
  std::string checkpoint;
  long long latency_ms = 0;
  bool headless = false;
};

struct DemoOptions {
  EvalConfig eval;
  std::string controller = "pid";
  std::string checkpoint;
  int every = 25;
  bool ascii = false;
  std::string trace;
};

void load_sections(const nlohmann::json& cfg, CollectOptions& c, TrainOptions& t, EvalOptions& e,
                   ServeOptions& s, DemoOptions& d) {
  const auto jc = section(cfg, "collect");
  if (!jc.empty()) {
    if (jc.contains("world")) c.world = jc.at("world").get<WorldConfig>();
    if (jc.contains("controller")) c.control = jc.at("controller").get<ControllerConfig>();
    nlohmann::json rest = jc;
    rest.erase("world");
    rest.erase("controller");
    rest.erase("out");
    c.collect = rest.get<CollectConfig>();
    c.out = jc.value("out", c.out);
  }
  const auto jt = section(cfg, "train");
  if (!jt.empty()) {
    t.train = jt.get<TrainConfig>();
    t.data = jt.value("data", t.data);
    t.encoder = to_string(t.train.dims.mode);
    t.eval_episodes = jt.value("eval_episodes", t.eval_episodes);
  }
  const auto je = section(cfg, "eval");
  if (!je.empty()) {
    e.eval = je.get<EvalConfig>();
    e.controllers = je.value("controllers", e.controllers);
    e.checkpoint = je.value("checkpoint", e.checkpoint);
    e.out = je.value("out", e.out);
    d.eval = e.eval;
  }
  const auto js = section(cfg, "serve");
  if (!js.empty()) {
    if (js.contains("session")) s.server.session = js.at("session").get<SessionConfig>();
    s.server.address = js.value("address", s.server.address);
    s.server.port = js.value("port", s.server.port);
    s.server.static_dir = js.value("static_dir", s.server.static_dir);
    s.server.memory_path = js.value("memory", s.server.memory_path);
    s.server.backend = js.value("backend", s.server.backend);
    s.checkpoint = js.value("checkpoint", s.checkpoint);
    s.latency_ms = s.server.session.aligner_latency.count();
    s.headless = !s.server.session.realtime;
  }
}

std::shared_ptr<const PolicyNetwork> maybe_load(const std::string& path) {
  if (path.empty()) return nullptr;
  return std::make_shared<PolicyNetwork>(load_checkpoint(path));
}

void add_eval_flags(CLI::App* sub, EvalConfig& e) {
  sub->add_option("--episodes", e.episodes, "Episodes to run")->capture_default_str();
  sub->add_option("--steps", e.max_steps, "Steps per episode")->capture_default_str();
  sub->add_option("--switches", e.switches, "Instruction switches per episode (0-4)")
      ->capture_default_str();
  sub->add_option("--speed", e.target_speed, "Target speed in m/s")->capture_default_str();
  sub->add_option("--seed", e.seed, "Protocol seed")->capture_default_str();
  sub->add_option("--latency-ticks", e.aligner_latency_ticks,
                  "Ticks between an instruction and its goal box")
      ->capture_default_str();
}

// Image-plane sketch: goal outline '+', observed box '#', both '@'.
std::string ascii_frame(const std::optional<BBox>& obs, const BBox& goal) {
  constexpr int W = 48, H = 20;
  std::string out;
  const auto inside = [](const BBox& b, double x, double y) {
    return x >= b.left() && x <= b.right() && y >= b.top() && y <= b.bottom();
  };
  const auto on_edge = [&](const BBox& b, int col, int row) {
    const double x = (col + 0.5) / W, y = (row + 0.5) / H;
    if (!inside(b, x, y)) return false;
    const double dx = 1.0 / W, dy = 1.0 / H;
    return !inside(b, x - dx, y) || !inside(b, x + dx, y) || !inside(b, x, y - dy) ||
           !inside(b, x, y + dy);
  };
  out += '.' + std::string(W, '-') + ".\n";
  for (int r = 0; r < H; ++r) {
    out += '|';
    for (int c = 0; c < W; ++c) {
      const bool o = obs && inside(*obs, (c + 0.5) / W, (r + 0.5) / H);
      const bool g = on_edge(goal, c, r);
      out += o && g ? '@' : o ? '#' : g ? '+' : ' ';
    }
    out += "|\n";
  }
  out += '\'' + std::string(W, '-') + "'\n";
  return out;
}

int cmd_collect(const CollectOptions& o, std::ostream& out) {
  const Dataset d = collect(o.world, o.collect, CameraModel{}, o.control);
  const std::string path = o.out.empty() ? shard_name(o.collect.seed) : o.out;
  write_dataset(d, path);
  out << fmt::format("wrote {} transitions in {} episodes to {}\n", d.transitions.size(),
                     d.episodes().size(), path);
  return 0;
}

int cmd_merge(const std::vector<std::string>& inputs, const std::string& path, std::ostream& out) {
  const Dataset d = merge_datasets(inputs);
  write_dataset(d, path);
  out << fmt::format("merged {} shards, {} transitions, {} episodes into {}\n", inputs.size(),
                     d.transitions.size(), d.episodes().size(), path);
  return 0;
}

int cmd_train(TrainOptions o, std::ostream& out, std::ostream& err) {
  o.train.dims.mode = encoder_mode_from_string(o.encoder);
  if (o.train.checkpoint_path.empty()) o.train.checkpoint_path = "policy.json";
  const Dataset d = o.data.size() == 1 ? read_dataset(o.data.front()) : merge_datasets(o.data);
  EvalHook hook;
  if (o.train.eval_every > 0) {
    hook = [&](const PolicyNetwork& net, long) {
      EvalConfig ec;
      ec.episodes = o.eval_episodes;
      ec.seed = o.train.seed;
      auto shared = std::make_shared<const PolicyNetwork>(net);
      const Metrics m = evaluate(controller_factory("policy", shared), ec).metrics;
      return nlohmann::json{{"AR", m.ar}, {"EL", m.el}, {"SR", m.sr}};
    };
  }
  LogHook log;
  if (!o.quiet) {
    log = [&err](const nlohmann::json& j) { err << j.dump() << '\n'; };
  }
  const TrainResult r = train(d, o.train, hook, log);
  out << fmt::format("saved {} after {} steps (validation reward mse {:.5f}, q_data {:.4f}, "
                     "q_uniform {:.4f})\n",
                     o.train.checkpoint_path, o.train.steps, r.validation.reward_mse,
                     r.validation.q_data, r.validation.q_uniform);
  return 0;
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto net = maybe_load(o.checkpoint);
  std::vector<EvalResult> results;
  for (const auto& name : o.controllers) {
    results.push_back(evaluate(controller_factory(name, net, ControllerConfig{}, o.eval.camera), o.eval));
  }
  write_reports(o.out, o.eval, results);
  out << report_markdown(o.eval, results);
  return 0;
}

int cmd_parse(const ParseOptions& o, std::ostream& out) {
  BBox current;
  if (o.bbox.empty()) {
    current = *project({kReferenceRho, kReferenceTheta});
  } else if (o.bbox.size() == 4) {
    current = {o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]};
    if (!is_valid(current)) throw std::invalid_argument("--bbox is not a valid box");
  } else {
    throw std::invalid_argument("--bbox takes four numbers: cx cy w h");
  }
  MemoryBank bank = o.memory.empty() ? MemoryBank::seeded() : MemoryBank::load(o.memory);
  auto backend = make_backend(o.backend, CameraModel{});
  const SpatialGoal g = align({o.text, 0}, current, bank, *backend);
  const nlohmann::json j = {{"instruction", o.text},
                            {"category", g.category.str()},
                            {"bbox", to_json(g.bbox)},
                            {"provenance", to_string(g.provenance)},
                            {"candidate", to_json(g.candidate)},
                            {"retrieved_iou", g.retrieved_iou},
                            {"retrieved_index", g.retrieved_index},
                            {"backend", backend->name()}};
  out << j.dump(2) << '\n';
  return 0;
}

int cmd_serve(ServeOptions o, std::ostream& out) {
  o.server.session.policy = maybe_load(o.checkpoint);
  o.server.session.aligner_latency = std::chrono::milliseconds(o.latency_ms);
  o.server.session.realtime = !o.headless;
  Server server(o.server);
  g_interrupted = false;
  const auto prev_int = std::signal(SIGINT, on_signal);
  const auto prev_term = std::signal(SIGTERM, on_signal);
  const unsigned short port = server.start();
  out << fmt::format("listening on ws://{}:{}/session\n", o.server.address, port) << std::flush;
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  std::signal(SIGINT, prev_int);
  std::signal(SIGTERM, prev_term);
  return 0;
}

int cmd_demo(const DemoOptions& o, std::ostream& out) {
  if (o.every < 1) throw std::invalid_argument("--every must be positive");
  const auto net = maybe_load(o.checkpoint);
  const auto factory = controller_factory(o.controller, net, ControllerConfig{}, o.eval.camera);
  o.eval.validate();
  std::mt19937_64 master(o.eval.seed);
  const std::uint64_t world_seed = master();
  std::mt19937_64 sched_rng(master());
  const std::uint64_t ctl_seed = master();
  const auto schedule = make_schedule(o.eval, sched_rng);
  auto ctl = factory(ctl_seed);

  EpisodeConfig ec;
  ec.world = o.eval.world;
  ec.world.max_steps = o.eval.max_steps;
  ec.world.target_speed = o.eval.target_speed;
  ec.camera = o.eval.camera;
  ec.aligner_latency_ticks = o.eval.aligner_latency_ticks;
  RuleConfig rc;
  rc.camera = o.eval.camera;
  RuleBackend backend(rc);
  MemoryBank bank = MemoryBank::seeded(o.eval.camera);

  std::ofstream trace;
  if (!o.trace.empty()) {
    trace.open(o.trace);
    if (!trace) throw std::runtime_error("cannot write " + o.trace);
    trace << "tick,rho,theta,obs_cx,obs_cy,obs_w,obs_h,goal_cx,goal_cy,goal_w,goal_h,reward\n";
  }
  std::optional<BBox> last_goal;
  const auto observer = [&](const World& w, const std::optional<BBox>& obs, const BBox& goal,
                            double r) {
    const int tick = w.status().step;
    const auto rel = w.relative();
    if (trace.is_open()) {
      const BBox ob = obs.value_or(BBox{0, 0, 0, 0});
      trace << fmt::format("{},{:.4f},{:.4f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n",
                           tick, rel.rho, rel.theta, ob.cx, ob.cy, ob.w, ob.h, goal.cx, goal.cy,
                           goal.w, goal.h, r);
    }
    const bool switched = !last_goal || !(*last_goal == goal);
    last_goal = goal;
    if (o.ascii && switched) {
      out << fmt::format("tick {} new goal {}\n", tick, format_fixed(goal)) << ascii_frame(obs, goal);
    }
    if (tick % o.every == 0 || !w.status().running()) {
      out << fmt::format("tick {:4d}  rho {:7.2f}  theta {:7.2f}  reward {:7.4f}  obs {}\n", tick,
                         rel.rho, rel.theta, r, obs ? format_fixed(*obs) : std::string("lost"));
    }
  };
  const EpisodeRecord rec = run_episode(*ctl, schedule, ec, world_seed, backend, bank, observer);
  for (const auto& s : rec.segments) {
    out << fmt::format("segment from tick {} ({}): goal {} applied at {}{}\n", s.start_tick,
                       s.truth.label, format_fixed(s.goal), s.applied_tick,
                       s.text.empty() ? "" : fmt::format(" via \"{}\"", s.text));
  }
  if (o.ascii && last_goal) out << ascii_frame(std::nullopt, *last_goal);
  out << fmt::format("{} after {} steps, accumulated reward {:.2f}\n", to_string(rec.outcome),
                     rec.length, rec.accumulated);
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CollectOptions co;
  TrainOptions to;
  EvalOptions eo;
  ParseOptions po;
  ServeOptions so;
  DemoOptions dopt;
  std::vector<std::string> merge_inputs;
  std::string merge_out;

  const std::string config_path = find_config(argc, argv);
  if (!config_path.empty()) {
    try {
      std::ifstream in(config_path);
      if (!in) throw std::runtime_error("cannot open config " + config_path);
      load_sections(nlohmann::json::parse(in), co, to, eo, so, dopt);
    } catch (const std::exception& e) {
      err << "error: " << config_path << ": " << e.what() << '\n';
      return 2;
    }
  }

  CLI::App app{"itrack: instruction-driven visual tracking toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_dummy;
  app.add_option("--config", config_dummy,
                 "JSON config with collect/train/eval/serve sections; flags override it");

  auto* collect_cmd = app.add_subcommand("collect", "Collect trajectories with the perturbed state PID");
  collect_cmd->add_option("--steps", co.collect.n_steps, "Minimum transitions")->capture_default_str();
  collect_cmd->add_option("--seed", co.collect.seed, "Collection seed")->capture_default_str();
  collect_cmd->add_option("--out", co.out, "Output file (default traj-{seed}.jsonl)");
  collect_cmd->add_option("--rho-min", co.collect.rho_min, "Goal distance lower bound (cm)")->capture_default_str();
  collect_cmd->add_option("--rho-max", co.collect.rho_max, "Goal distance upper bound (cm)")->capture_default_str();
  collect_cmd->add_option("--theta-min", co.collect.theta_min, "Goal angle lower bound (deg)")->capture_default_str();
  collect_cmd->add_option("--theta-max", co.collect.theta_max, "Goal angle upper bound (deg)")->capture_default_str();
  collect_cmd->add_option("--perturb-p", co.collect.perturbation.p, "Burst start probability")->capture_default_str();
  collect_cmd->add_option("--perturb-l-max", co.collect.perturbation.l_max, "Longest burst")->capture_default_str();
  collect_cmd->add_option("--episode-cap", co.collect.episode_cap, "Steps per episode")->capture_default_str();
  collect_cmd->add_option("--speeds", co.collect.speeds, "Per-episode target speeds to sample from (m/s)");
  collect_cmd->add_option("--target-speed", co.world.target_speed, "Target speed when --speeds is empty")->capture_default_str();

  auto* merge_cmd = app.add_subcommand("merge", "Concatenate trajectory shards");
  merge_cmd->add_option("inputs", merge_inputs, "Shard files")->required();
  merge_cmd->add_option("--out", merge_out, "Merged file")->required();

  auto* train_cmd = app.add_subcommand("train", "Train the policy offline");
  train_cmd->add_option("--data", to.data, "Trajectory files (merged when several)")->required();
  train_cmd->add_option("--out", to.train.checkpoint_path, "Checkpoint path (default policy.json)");
  train_cmd->add_option("--metrics", to.train.metrics_path, "JSONL metrics log");
  train_cmd->add_option("--steps", to.train.steps, "Gradient steps")->capture_default_str();
  train_cmd->add_option("--batch", to.train.batch, "Sequences per batch")->capture_default_str();
  train_cmd->add_option("--seq-len", to.train.seq_len, "Window length")->capture_default_str();
  train_cmd->add_option("--lr", to.train.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--gamma", to.train.gamma, "Discount")->capture_default_str();
  train_cmd->add_option("--alpha", to.train.alpha, "Entropy coefficient")->capture_default_str();
  train_cmd->add_option("--n-uniform", to.train.n_uniform, "Uniform action samples")->capture_default_str();
  train_cmd->add_option("--n-policy", to.train.n_policy, "Policy action samples")->capture_default_str();
  train_cmd->add_option("--tau", to.train.tau, "Target soft-update rate")->capture_default_str();
  train_cmd->add_option("--cql-weight", to.train.cql_weight, "Conservative term weight")->capture_default_str();
  train_cmd->add_option("--reg-weight", to.train.reg_weight, "Reward regression weight")->capture_default_str();
  train_cmd->add_option("--seed", to.train.seed, "Training seed")->capture_default_str();
  train_cmd->add_option("--val-fraction", to.train.val_fraction, "Held-out episode fraction")->capture_default_str();
  train_cmd->add_option("--val-windows", to.train.val_windows, "Validation windows")->capture_default_str();
  train_cmd->add_option("--log-every", to.train.log_every, "Steps between metric records")->capture_default_str();
  train_cmd->add_option("--eval-every", to.train.eval_every, "Steps between evaluations, 0 disables")->capture_default_str();
  train_cmd->add_option("--eval-episodes", to.eval_episodes, "Episodes per periodic evaluation")->capture_default_str();
  train_cmd->add_option("--checkpoint-every", to.train.checkpoint_every, "Steps between checkpoints, 0 disables")->capture_default_str();
  train_cmd->add_option("--encoder", to.encoder, "Observation encoder")
      ->check(CLI::IsMember({"vector", "raster"}))
      ->capture_default_str();
  train_cmd->add_flag("--quiet", to.quiet, "Do not echo metrics to stderr");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate controllers under the switching protocol");
  eval_cmd->add_option("--controller", eo.controllers, "pid, bbox-pid, policy, random or oracle; repeatable")
      ->check(CLI::IsMember({"pid", "bbox-pid", "policy", "random", "oracle"}));
  eval_cmd->add_option("--checkpoint", eo.checkpoint, "Policy checkpoint");
  eval_cmd->add_option("--out", eo.out, "Directory for report.json and report.md")->capture_default_str();
  add_eval_flags(eval_cmd, eo.eval);

  auto* parse_cmd = app.add_subcommand("parse", "Align one instruction and print the goal");
  parse_cmd->add_option("text", po.text, "Instruction")->required();
  parse_cmd->add_option("--bbox", po.bbox, "Current box cx cy w h (default: target at 350 cm, 0 deg)")
      ->expected(4);
  parse_cmd->add_option("--backend", po.backend, "Goal backend")
      ->check(CLI::IsMember({"rule", "remote"}))
      ->capture_default_str();
  parse_cmd->add_option("--memory", po.memory, "Memory bank JSONL (default: seeded table)");

  auto* serve_cmd = app.add_subcommand("serve", "Run the websocket session service");
  serve_cmd->add_option("--address", so.server.address, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", so.server.port, "Port, 0 picks one")->capture_default_str();
  serve_cmd->add_option("--static-dir", so.server.static_dir, "Directory served at /");
  serve_cmd->add_option("--checkpoint", so.checkpoint, "Policy checkpoint");
  serve_cmd->add_option("--controller", so.server.session.controller,
                        "Initial controller (default: policy when a checkpoint is given, else pid)")
      ->check(CLI::IsMember({"pid", "bbox-pid", "policy", "random"}));
  serve_cmd->add_option("--tick-hz", so.server.session.tick_hz, "Simulation rate")->capture_default_str();
  serve_cmd->add_flag("--headless", so.headless, "Run ticks back to back instead of wall-clock paced");
  serve_cmd->add_option("--decimation", so.server.session.decimation, "Broadcast every n-th tick")->capture_default_str();
  serve_cmd->add_option("--aligner-latency-ms", so.latency_ms, "Injected aligner delay")->capture_default_str();
  serve_cmd->add_option("--backend", so.server.backend, "Goal backend")
      ->check(CLI::IsMember({"rule", "remote"}))
      ->capture_default_str();
  serve_cmd->add_option("--memory", so.server.memory_path, "Memory bank JSONL (default: seeded table)");
  serve_cmd->add_option("--seed", so.server.session.seed, "World seed")->capture_default_str();

  auto* demo_cmd = app.add_subcommand("demo", "Run one headless episode and print a trace");
  demo_cmd->add_option("--controller", dopt.controller, "Controller")
      ->check(CLI::IsMember({"pid", "bbox-pid", "policy", "random", "oracle"}))
      ->capture_default_str();
  demo_cmd->add_option("--checkpoint", dopt.checkpoint, "Policy checkpoint");
  demo_cmd->add_option("--every", dopt.every, "Ticks between trace lines")->capture_default_str();
  demo_cmd->add_flag("--ascii", dopt.ascii, "Draw the image plane at every goal change");
  demo_cmd->add_option("--trace", dopt.trace, "CSV file with one row per tick");
  add_eval_flags(demo_cmd, dopt.eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    CLI::App* failed = &app;
    for (auto* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return 2;
  }

  try {
    if (*collect_cmd) return cmd_collect(co, out);
    if (*merge_cmd) return cmd_merge(merge_inputs, merge_out, out);
    if (*train_cmd) return cmd_train(to, out, err);
    if (*eval_cmd) return cmd_eval(eo, out);
    if (*parse_cmd) return cmd_parse(po, out);
    if (*serve_cmd) return cmd_serve(so, out);
    if (*demo_cmd) return cmd_demo(dopt, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace itrack
