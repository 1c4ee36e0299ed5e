// Acceptance checks: one PASS/FAIL line per criterion. Exit code 1 when any
// selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "desk_policy.hpp"
#include "gradcheck.hpp"
#include "itrack/cli.hpp"
#include "itrack/controllers.hpp"
#include "itrack/eval.hpp"
#include "itrack/service.hpp"
#include "itrack/trainer.hpp"

using namespace itrack;
using ad::Matrix;
using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1: geometry oracle ----

double raster_iou(const BBox& a, const BBox& b, int res) {
  long inter = 0, uni = 0;
  for (int y = 0; y < res; ++y) {
    const double py = (y + 0.5) / res;
    const bool ya = std::abs(py - a.cy) < a.h / 2, yb = std::abs(py - b.cy) < b.h / 2;
    if (!ya && !yb) continue;
    for (int x = 0; x < res; ++x) {
      const double px = (x + 0.5) / res;
      const bool ia = ya && std::abs(px - a.cx) < a.w / 2;
      const bool ib = yb && std::abs(px - b.cx) < b.w / 2;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> size(0.02, 0.6), u(0.0, 1.0);
  const double w = size(rng), h = size(rng);
  return {w / 2 + u(rng) * (1 - w), h / 2 + u(rng) * (1 - h), w, h};
}

// A perturbed copy of `a` that still overlaps the unit square.
BBox jitter_box(const BBox& a, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> j(0.0, sigma);
  return clamp_to_unit({std::clamp(a.cx + j(rng), 0.05, 0.95), std::clamp(a.cy + j(rng), 0.05, 0.95),
                        std::max(0.02, a.w + j(rng)), std::max(0.02, a.h + j(rng))});
}

Outcome criterion_geometry() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst_iou = 0.0, worst_overlap = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const BBox a = random_box(rng), b = random_box(rng);
    worst_iou = std::max(worst_iou, std::abs(iou(a, b) - raster_iou(a, b, 512)));
  }
  // Overlapping pairs exercise partial intersections; thin overlaps need a
  // finer raster to stay clear of pixel quantization.
  for (int i = 0; i < 1000; ++i) {
    const BBox a = random_box(rng), b = jitter_box(a, rng, 0.05);
    worst_overlap = std::max(worst_overlap, std::abs(iou(a, b) - raster_iou(a, b, 2048)));
  }
  std::uniform_real_distribution<double> rho(200.0, 750.0), th(-44.0, 44.0);
  double worst_rt = 0.0;
  int unprojectable = 0;
  for (int i = 0; i < 1000; ++i) {
    const RelativeState s{rho(rng), th(rng)};
    const auto b = project(s);
    if (!b) {
      ++unprojectable;
      continue;
    }
    const RelativeState r = unproject(*b);
    worst_rt = std::max({worst_rt, std::abs(r.rho - s.rho) / s.rho,
                         std::abs(r.theta - s.theta) / std::max(std::abs(s.theta), 1.0)});
  }
  const double secs = seconds_since(t0);
  return {worst_iou <= 0.02 && worst_overlap <= 0.02 && worst_rt <= 1e-6 && unprojectable == 0 &&
              secs < 30.0,
          fmt::format("max |iou - raster| {:.4f} on random pairs at 512 px, {:.4f} on overlapping pairs "
                      "at 2048 px (<= 0.02), round trip rel err {:.2e} (<= 1e-6), {} unprojectable, "
                      "{:.1f} s (< 30)",
                      worst_iou, worst_overlap, worst_rt, unprojectable, secs)};
}

// ---- 2: canonical goal bands ----

Outcome criterion_goal_bands() {
  int ok = 0;
  std::string detail;
  for (const GoalSpec& g : canonical_goals()) {
    GoalIntent intent;
    intent.kind = GoalKind::kAbsolute;
    intent.rho = g.rho;
    intent.theta = g.theta;
    const auto b = project(g.state());
    const bool valid = b && absolute_goal_valid(intent, *b).value_or(false);
    ok += valid;
    if (b) {
      detail += fmt::format(" {}: area {:.3f} cx {:.3f}{}", g.label, b->area(), b->cx, valid ? "" : " (out of band)");
    }
  }
  return {ok == 4, fmt::format("{}/4 in band;{}", ok, detail)};
}

// ---- 3: parser benchmark and correction gate ----

Outcome criterion_parser() {
  RuleBackend backend;
  const ParserReport rep = parser_accuracy(backend);
  const int n_correct = static_cast<int>(std::count_if(rep.cases.begin(), rep.cases.end(),
                                                      [](const ParserCase& c) { return c.correct; }));
  std::mt19937_64 rng(303);
  int violations = 0, kept = 0, oracle_disagree = 0;
  for (int i = 0; i < 10000; ++i) {
    const BBox retrieved = random_box(rng);
    const BBox cand = i % 3 == 0 ? random_box(rng) : jitter_box(retrieved, rng, 0.06);
    const BBox out = correct(cand, retrieved);
    const double v = iou(cand, retrieved);
    if (out == cand && !(out == retrieved)) {
      ++kept;
      violations += !(v > 0.5);
    } else if (!(out == retrieved)) {
      ++violations;
    } else if (v > 0.5 && !(cand == retrieved)) {
      ++violations;
    }
    // The gate agrees with a rasterized overlap wherever the raster is unambiguous.
    if (i % 20 == 0) {
      const double r = raster_iou(cand, retrieved, 256);
      if (std::abs(r - 0.5) > 0.02 && ((r > 0.5) != (out == cand))) ++oracle_disagree;
    }
  }
  // Exact boundary: two unit-height halves overlapping in a third of the union.
  const BBox a{0.375, 0.5, 0.5, 0.5}, b{0.5, 0.5, 0.25, 0.5};
  const bool boundary = iou(a, b) == 0.5 && correct(a, b) == b;
  return {n_correct == 42 && violations == 0 && oracle_disagree == 0 && boundary,
          fmt::format("rule backend {}/42; gate violations {} over 10000 pairs ({} kept), raster "
                      "disagreements {}, iou 0.5 boundary keeps retrieved: {}",
                      n_correct, violations, kept, oracle_disagree, boundary ? "yes" : "no")};
}

// ---- 4: PID tracking ----

Outcome criterion_pid() {
  const auto t0 = Clock::now();
  EvalConfig cfg;
  cfg.episodes = 50;
  cfg.switches = 0;
  cfg.target_speed = 0.5;
  cfg.seed = 404;
  const EvalResult pid = evaluate(controller_factory("pid"), cfg);
  const EvalResult bbox = evaluate(controller_factory("bbox-pid"), cfg);
  double settled = 1.0;
  long below = 0, total = 0;
  for (const auto& rec : pid.records) {
    for (int k = 201; k < rec.length; ++k) {
      settled = std::min(settled, rec.rewards[k]);
      below += rec.rewards[k] < 0.9;
      ++total;
    }
  }
  const double secs = seconds_since(t0);
  return {pid.metrics.sr >= 0.95 && settled >= 0.9 && bbox.metrics.sr >= 0.8 && secs < 120.0,
          fmt::format("state-PID SR {:.2f} (>= 0.95), min settled reward {:.3f} (>= 0.9; {} of {} "
                      "settled steps below); bbox-PID SR {:.2f} (>= 0.8); {:.1f} s (< 120)",
                      pid.metrics.sr, settled, below, total, bbox.metrics.sr, secs)};
}

// ---- 5: perturbation statistics ----

Outcome criterion_perturbation() {
  PerturbationConfig pc;
  pc.p = 0.15;
  pc.l_max = 4;
  Perturber p(pc, 505);
  long perturbed = 0;
  const long n = 100000;
  for (long i = 0; i < n; ++i) {
    p.apply(Action{});
    perturbed += p.last_was_perturbed();
  }
  const double frac = static_cast<double>(perturbed) / n, want = expected_perturbed_fraction(pc);
  return {std::abs(frac - want) <= 0.02,
          fmt::format("perturbed fraction {:.4f}, closed form {:.4f}, |diff| {:.4f} (<= 0.02)", frac,
                      want, std::abs(frac - want))};
}

// ---- 6: gradient suite ----

NetworkDims grad_dims(EncoderMode mode) {
  NetworkDims d;
  d.mode = mode;
  d.enc_hidden = 6;
  d.latent = 7;
  d.hidden = 5;
  d.actor_hidden = 4;
  d.critic_hidden = 4;
  d.raster_res = 20;
  d.conv1_channels = 2;
  d.conv2_channels = 3;
  return d;
}

Outcome criterion_gradients() {
  using itrack::testing::check_gradients;
  using itrack::testing::random_matrix;
  struct Component {
    std::string name;
    EncoderMode mode;
    std::function<ad::ParamList(PolicyNetwork&)> params;
    std::function<Var(Tape&, PolicyNetwork&, const Matrix&, const Matrix&, std::mt19937_64&)> loss;
  };
  auto obs_input = [](PolicyNetwork& net, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> rho(200.0, 700.0), th(-40.0, 40.0);
    std::vector<std::optional<BBox>> obs;
    std::vector<BBox> goals;
    for (int i = 0; i < 3; ++i) {
      obs.push_back(project({rho(rng), th(rng)}));
      goals.push_back(*project({rho(rng), th(rng)}));
    }
    obs[1] = std::nullopt;
    return net.encoder_input(obs, goals);
  };
  const std::vector<Component> components{
      {"vector encoder", EncoderMode::kVector, [](PolicyNetwork& n) { return n.encoder_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix& x, const Matrix& w, std::mt19937_64&) {
         return ad::weighted_sum(n.encode(t, t.constant(x), true), w.topRows(3).leftCols(n.dims().latent));
       }},
      {"raster encoder", EncoderMode::kRaster, [](PolicyNetwork& n) { return n.encoder_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix& x, const Matrix& w, std::mt19937_64&) {
         return ad::weighted_sum(n.encode(t, t.constant(x), true), w.topRows(3).leftCols(n.dims().latent));
       }},
      {"reward head", EncoderMode::kVector, [](PolicyNetwork& n) { return n.reward_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix& x, const Matrix& w, std::mt19937_64&) {
         Var z = n.encode(t, t.constant(x), false);
         return ad::weighted_sum(n.reward_head(t, z, true), w.topRows(3).leftCols(1));
       }},
      {"gru", EncoderMode::kVector, [](PolicyNetwork& n) { return n.gru_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix& x, const Matrix& w, std::mt19937_64& rng) {
         Var z = n.encode(t, t.constant(x), false);
         Var h0 = t.constant(random_matrix(rng, 3, n.dims().hidden, 0.5));
         Var h2 = n.gru_step(t, z, n.gru_step(t, z, h0, true), true);
         return ad::weighted_sum(h2, w.topRows(3).leftCols(n.dims().hidden));
       }},
      {"actor", EncoderMode::kVector, [](PolicyNetwork& n) { return n.actor_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix&, const Matrix&, std::mt19937_64& rng) {
         Var h = t.constant(random_matrix(rng, 3, n.dims().hidden, 0.8));
         auto [mean, log_std] = n.actor(t, h, true);
         SquashedSample s = squashed_sample(mean, log_std, random_matrix(rng, 3, 2));
         return ad::add(ad::sum(s.log_prob), ad::sum(ad::square(s.action)));
       }},
      {"critics", EncoderMode::kVector, [](PolicyNetwork& n) { return n.critic_params(); },
       [](Tape& t, PolicyNetwork& n, const Matrix&, const Matrix& w, std::mt19937_64& rng) {
         Var h = t.constant(random_matrix(rng, 3, n.dims().hidden, 0.8));
         Var a = t.constant(random_matrix(rng, 6, 2, 0.5));
         Var q1 = n.critic(t, n.critics[0], h, a, true, 2);
         Var q2 = n.critic(t, n.critics[1], h, t.constant(random_matrix(rng, 3, 2, 0.5)), true);
         return ad::add(ad::weighted_sum(q1, w.leftCols(1)), ad::sum(ad::square(q2)));
       }},
  };
  double worst = 0.0;
  int kinks = 0, checked = 0;
  std::string per;
  for (const Component& c : components) {
    double cw = 0.0;
    for (int cfg = 0; cfg < 20; ++cfg) {
      PolicyNetwork net(grad_dims(c.mode), 600 + cfg);
      std::mt19937_64 rng(700 + cfg);
      const Matrix x = obs_input(net, rng);
      const Matrix w = random_matrix(rng, 6, 8);
      const std::uint64_t loss_seed = rng();
      auto loss = [&](Tape& t) {
        std::mt19937_64 r(loss_seed);
        return c.loss(t, net, x, w, r);
      };
      const auto rep = check_gradients(c.params(net), loss, cfg, 8);
      cw = std::max(cw, rep.worst);
      kinks += rep.kinks;
      checked += rep.checked;
    }
    worst = std::max(worst, cw);
    per += fmt::format(" {} {:.1e};", c.name, cw);
  }
  return {worst < 1e-4 && kinks * 50 <= checked,
          fmt::format("worst relative error {:.2e} (< 1e-4) over 6 components x 20 configs, {} kinked "
                      "of {} entries;{}",
                      worst, kinks, checked, per)};
}

// ---- 7: conservatism on a toy dataset ----

Outcome criterion_conservatism() {
  CollectConfig cc;
  cc.n_steps = 5000;
  cc.episode_cap = 250;
  cc.seed = 707;
  const Dataset d = collect(WorldConfig{}, cc);
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch = 32;
  tc.lr = 3e-4;
  tc.seed = 7;
  tc.log_every = 500;
  tc.val_fraction = 0.2;
  tc.val_windows = 128;
  const TrainResult r = train(d, tc);

  // Actions on held-out style inputs with the reward head zeroed.
  auto actions = [&](const PolicyNetwork& net) {
    PolicyController ctl(std::make_shared<const PolicyNetwork>(net));
    ctl.reset();
    std::vector<Action> out;
    const BBox goal = *project({300, 10});
    for (int k = 0; k < 200; ++k) {
      ControlInput in;
      in.tick = k;
      in.goal = goal;
      in.obs = k % 37 == 5 ? std::nullopt : project({250.0 + 2.0 * k, 20.0 * std::sin(0.05 * k)});
      out.push_back(ctl.act(in));
    }
    return out;
  };
  PolicyNetwork zeroed = r.net;
  for (ad::Parameter* p : zeroed.reward_params()) p->value.setZero();
  const bool unchanged = actions(r.net) == actions(zeroed);
  const double gap = r.validation.q_data - r.validation.q_uniform;
  return {gap > 0.0 && r.validation.reward_mse < 0.05 && unchanged,
          fmt::format("held-out Q(data) - Q(uniform) {:.3f} (> 0), reward MSE {:.4f} (< 0.05), "
                      "zeroed reward head leaves actions bitwise equal: {}",
                      gap, r.validation.reward_mse, unchanged ? "yes" : "no")};
}

// ---- 8, 9: desk policy ----

struct Desk {
  std::optional<acceptance::CachedPolicy> cached;
  std::shared_ptr<const PolicyNetwork> net;
  std::string error;
};

Desk& desk(const std::string& dir, bool allow_train) {
  static std::optional<Desk> d;
  if (d) return *d;
  d.emplace();
  const auto profile = acceptance::desk_profile();
  d->cached = acceptance::load_cached(dir, profile);
  if (!d->cached && allow_train) {
    std::cerr << "no cached desk policy in " << dir << ", collecting and training\n";
    d->cached = acceptance::prepare(dir, profile, true);
  }
  if (!d->cached) {
    d->error = "no cached desk policy in " + dir + " (run without --no-train to build it)";
    return *d;
  }
  d->net = std::make_shared<const PolicyNetwork>(load_checkpoint(d->cached->checkpoint));
  return *d;
}

EvalConfig desk_protocol(double speed) {
  EvalConfig c;
  c.episodes = 50;
  c.switches = 4;
  c.target_speed = speed;
  c.seed = 808;
  return c;
}

std::map<std::string, Metrics>& desk_metrics(const Desk& dk, double speed) {
  static std::map<double, std::map<std::string, Metrics>> cache;
  auto& m = cache[speed];
  if (m.empty()) {
    const EvalConfig cfg = desk_protocol(speed);
    m["policy"] = evaluate(controller_factory("policy", dk.net), cfg).metrics;
    m["pid"] = evaluate(controller_factory("pid"), cfg).metrics;
    m["bbox-pid"] = evaluate(controller_factory("bbox-pid"), cfg).metrics;
  }
  return m;
}

std::string cell(const Metrics& m) { return fmt::format("AR {:.1f} EL {:.1f} SR {:.2f}", m.ar, m.el, m.sr); }

Outcome criterion_desk(const std::string& dir, bool allow_train) {
  Desk& dk = desk(dir, allow_train);
  if (!dk.net) return {false, dk.error};
  const auto& m = desk_metrics(dk, 0.5);
  const double cpu = dk.cached->manifest.value("cpu_seconds_total", 1e18);
  const long n = dk.cached->manifest.value("transitions", 0L);
  const Metrics& p = m.at("policy");
  const bool beats = p.ar > m.at("pid").ar && p.ar > m.at("bbox-pid").ar;
  return {p.sr >= 0.7 && beats && cpu <= acceptance::kCpuBudgetSeconds && n >= 200000,
          fmt::format("policy {} (SR >= 0.7); pid {}; bbox-pid {}; AR above both: {}; {} transitions, "
                      "collect + train CPU {:.2f} h (<= 4)",
                      cell(p), cell(m.at("pid")), cell(m.at("bbox-pid")), beats ? "yes" : "no", n, cpu / 3600.0)};
}

Outcome criterion_speed(const std::string& dir, bool allow_train) {
  Desk& dk = desk(dir, allow_train);
  if (!dk.net) return {false, dk.error};
  const auto& slow = desk_metrics(dk, 0.5);
  const auto& fast = desk_metrics(dk, 2.0);
  auto degraded = [&](const std::string& k) { return fast.at(k).sr <= 0.5 * slow.at(k).sr; };
  const bool ok = fast.at("policy").sr >= 0.5 && degraded("pid") && degraded("bbox-pid");
  return {ok, fmt::format("SR at 0.5 -> 2.0 m/s: policy {:.2f} -> {:.2f} (>= 0.5); pid {:.2f} -> {:.2f}; "
                          "bbox-pid {:.2f} -> {:.2f} (PIDs must halve)",
                          slow.at("policy").sr, fast.at("policy").sr, slow.at("pid").sr, fast.at("pid").sr,
                          slow.at("bbox-pid").sr, fast.at("bbox-pid").sr)};
}

// ---- 10: adaptation latency ----

Outcome criterion_adaptation() {
  EvalConfig ec;
  ec.switches = 4;
  ec.target_speed = 0.0;
  EpisodeConfig cfg;
  cfg.world.target_speed = 0.0;
  RuleBackend backend;
  const MemoryBank seeded = MemoryBank::seeded();
  std::mt19937_64 master(1010);
  int switches = 0, fast = 0;
  double worst = 0.0;
  std::map<std::string, std::pair<int, int>> by_goal;
  for (int e = 0; e < 20; ++e) {
    std::mt19937_64 sched(master());
    const auto schedule = make_schedule(ec, sched);
    StatePidController pid;
    MemoryBank bank = seeded;
    const EpisodeRecord rec = run_episode(pid, schedule, cfg, master(), backend, bank);
    for (std::size_t k = 1; k < rec.segments.size(); ++k) {
      const Segment& s = rec.segments[k];
      const int end = std::min(s.applied_tick + 30, rec.length);
      bool hit = false;
      for (int t = s.applied_tick; t < end && !hit; ++t) {
        const double c = rec.center_distance[t];
        hit = std::isfinite(c) && c < 0.05;
      }
      double last = rec.center_distance[std::max(end - 1, 0)];
      if (!std::isfinite(last)) last = 1.0;
      if (!hit) worst = std::max(worst, last);
      ++switches;
      fast += hit;
      auto& g = by_goal[s.truth.label];
      g.first += hit;
      ++g.second;
    }
  }
  std::string per;
  for (const auto& [label, c] : by_goal) per += fmt::format(" {} {}/{};", label, c.first, c.second);
  return {switches > 0 && fast == switches,
          fmt::format("{}/{} switches reach center distance < 0.05 within 30 ticks (worst miss {:.3f});{}",
                      fast, switches, worst, per)};
}

// ---- 11: asynchrony ----

Outcome criterion_async() {
  SessionConfig c;
  c.seed = 1111;
  c.aligner_latency = std::chrono::milliseconds(2000);
  c.max_ticks = 1100;
  c.world.target_speed = 0.5;
  Session s(c, make_backend("rule", c.camera), MemoryBank::seeded());
  s.start();
  const std::vector<std::string> texts{"Move closer to the person.", "Keep the person on the left.",
                                       "Follow the person from far away.", "Keep the person on the right."};
  std::thread drain([&] {
    while (s.running()) s.next_outbound(std::chrono::milliseconds(50));
  });
  for (int i = 0; i < 8 && s.running(); ++i) {
    s.submit(nlohmann::json{{"type", "instruction"}, {"ref", std::to_string(i)}, {"text", texts[i % 4]}}.dump());
    std::this_thread::sleep_for(std::chrono::milliseconds(2500));
  }
  s.wait();
  const SessionStats st = s.stats();
  s.stop();
  drain.join();
  const auto& p = st.tick_periods;
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / std::max<std::size_t>(p.size(), 1);
  double var = 0.0;
  for (double x : p) var += (x - mean) * (x - mean);
  const double cv = std::sqrt(var / std::max<std::size_t>(p.size(), 1)) / mean;
  return {st.ticks == 1100 && cv < 0.1 && st.episodes_completed >= 2 && st.goals_applied >= 4,
          fmt::format("{} ticks, mean period {:.2f} ms, coefficient of variation {:.4f} (< 0.1), "
                      "episodes completed {} (>= 2), goals applied {}",
                      st.ticks, 1000.0 * mean, cv, st.episodes_completed, st.goals_applied)};
}

// ---- 12: determinism ----

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "itrack");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / "itrack_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const std::string& f) { return (dir / f).string(); };
  bool ok = true;
  std::string detail;
  auto same = [&](const std::string& what, const std::string& a, const std::string& b) {
    const std::string x = slurp(a), y = slurp(b);
    const bool eq = !x.empty() && x == y;
    ok &= eq;
    detail += fmt::format(" {} {};", what, eq ? "identical" : "DIFFERENT");
  };
  for (const char* f : {"c1.jsonl", "c2.jsonl"}) {
    ok &= run({"collect", "--steps", "5000", "--episode-cap", "250", "--seed", "12", "--out", p(f)}) == 0;
  }
  same("collect", p("c1.jsonl"), p("c2.jsonl"));
  for (const char* f : {"e1", "e2"}) {
    ok &= run({"eval", "--controller", "pid", "--controller", "bbox-pid", "--switches", "4", "--seed", "7",
               "--out", p(f)}) == 0;
  }
  same("eval report", p("e1/report.json"), p("e2/report.json"));
  for (const char* f : {"t1", "t2"}) {
    ok &= run({"train", "--data", p("c1.jsonl"), "--steps", "100", "--seed", "3", "--quiet", "--out",
               p(std::string(f) + ".json"), "--metrics", p(std::string(f) + ".jsonl")}) == 0;
  }
  same("train checkpoint", p("t1.json"), p("t2.json"));
  same("train metrics", p("t1.jsonl"), p("t2.jsonl"));
  fs::remove_all(dir);
  return {ok, "byte comparison:" + detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string desk_dir = ITRACK_DESK_DIR;
  bool no_train = false;
  app.add_option("--only", only, "Criteria to run (default all)");
  app.add_option("--desk-dir", desk_dir, "Cache for the desk-scale policy")->capture_default_str();
  app.add_flag("--no-train", no_train, "Fail the desk criteria instead of training when no cache exists");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"geometry oracle", criterion_geometry},
      {"canonical goal bands", criterion_goal_bands},
      {"parser benchmark and correction gate", criterion_parser},
      {"PID tracking", criterion_pid},
      {"perturbation statistics", criterion_perturbation},
      {"gradient suite", criterion_gradients},
      {"conservatism", criterion_conservatism},
      {"desk-scale end to end", [&] { return criterion_desk(desk_dir, !no_train); }},
      {"speed robustness", [&] { return criterion_speed(desk_dir, !no_train); }},
      {"adaptation latency", criterion_adaptation},
      {"asynchrony", criterion_async},
      {"determinism", criterion_determinism},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << fmt::format("[{}] {:2d} {}: {} ({:.1f} s)", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                             o.detail, seconds_since(t0))
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
