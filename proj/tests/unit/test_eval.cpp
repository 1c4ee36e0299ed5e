#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "itrack/eval.hpp"

using namespace itrack;

namespace {

class ZeroController : public Controller {
 public:
  void reset() override {}
  Action act(const ControlInput&) override { return {}; }
  std::string name() const override { return "zero"; }
};

// Returns whatever box it is given: every delta is zero.
class ZeroBackend : public AlignerBackend {
 public:
  ParseResult parse(const std::string&, const BBox&) override {
    ParseResult r;
    r.category.attributes = {"person"};
    return r;
  }
  std::string name() const override { return "zero"; }
};

ControllerFactory zero_factory() {
  return [](std::uint64_t) { return std::make_unique<ZeroController>(); };
}

EvalConfig small_eval(int episodes, int switches, double speed) {
  EvalConfig c;
  c.episodes = episodes;
  c.switches = switches;
  c.target_speed = speed;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_CASE("eval reward examples") {
  CHECK(eval_reward({200, 0}, goal_close()) == 1.0);
  CHECK(eval_reward({450, 0}, goal_close()) == doctest::Approx(1.0 - 250.0 / 750.0));
  CHECK(eval_reward({350, 20}, goal_left()) == doctest::Approx(1.0 - 40.0 / 90.0));
  CHECK(eval_reward({900, 80}, goal_close()) < 0.0);
}

TEST_CASE("eval reward peaks only at the goal and falls with each error") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> rho(100, 750), th(-45, 45), step(0.1, 50);
  for (int i = 0; i < 500; ++i) {
    GoalSpec g;
    g.rho = rho(rng);
    g.theta = th(rng);
    CHECK(eval_reward(g.state(), g) == 1.0);
    const double dr = rho(rng) - g.rho, dt = th(rng) - g.theta;
    const double base = eval_reward({g.rho + dr, g.theta + dt}, g);
    CHECK(base < 1.0 + 1e-15);
    const double s = step(rng);
    CHECK(eval_reward({g.rho + dr + (dr >= 0 ? s : -s), g.theta + dt}, g) < base);
    CHECK(eval_reward({g.rho + dr, g.theta + dt + (dt >= 0 ? s : -s)}, g) < base);
  }
}

TEST_CASE("canonical goals") {
  const auto g = canonical_goals();
  REQUIRE(g.size() == 4);
  CHECK(g[0].rho == 200.0);
  CHECK(g[1].rho == 450.0);
  CHECK(g[2].theta == -20.0);
  CHECK(g[3].theta == 20.0);
  for (const auto& x : g) {
    CHECK_NOTHROW(x.validate());
    CHECK_FALSE(instructions_for(x).empty());
  }
  GoalSpec outside;
  outside.rho = 900;
  CHECK_THROWS(outside.validate());
}

TEST_CASE("teleporting oracle reaches the upper bound") {
  EvalConfig cfg = small_eval(5, 4, 2.0);
  const EvalResult r = evaluate(controller_factory("oracle"), cfg);
  CHECK(r.metrics.ar == doctest::Approx(500.0).epsilon(1e-12));
  CHECK(r.metrics.sr == 1.0);
  CHECK(r.metrics.el == 500.0);
}

TEST_CASE("four switches give five goal segments") {
  EvalConfig cfg = small_eval(1, 4, 0.5);
  std::mt19937_64 rng(3);
  const auto schedule = make_schedule(cfg, rng);
  REQUIRE(schedule.size() == 4);
  std::vector<std::string> labels;
  for (const auto& s : schedule) {
    REQUIRE(s.truth);
    labels.push_back(s.truth->label);
    CHECK_FALSE(s.text.empty());
  }
  std::sort(labels.begin(), labels.end());
  CHECK(std::unique(labels.begin(), labels.end()) == labels.end());
  CHECK(schedule[0].tick == 100);
  CHECK(schedule[3].tick == 400);

  TeleportOracle oracle;
  RuleBackend backend;
  MemoryBank bank = MemoryBank::seeded();
  const EpisodeRecord rec = run_episode(oracle, schedule, EpisodeConfig{}, 11, backend, bank);
  REQUIRE(rec.segments.size() == 5);
  CHECK(rec.segments[0].start_tick == 0);
  for (int k = 1; k < 5; ++k) {
    CHECK(rec.segments[k].start_tick == schedule[k - 1].tick);
    CHECK(rec.segments[k].truth.label == schedule[k - 1].truth->label);
    CHECK(rec.segments[k].provenance.has_value());
  }
}

TEST_CASE("aligner latency delays the applied goal") {
  EvalConfig cfg = small_eval(1, 2, 0.5);
  std::mt19937_64 rng(4);
  const auto schedule = make_schedule(cfg, rng);
  StatePidController pid;
  RuleBackend backend;
  MemoryBank bank = MemoryBank::seeded();
  EpisodeConfig ec;
  ec.aligner_latency_ticks = 30;
  const EpisodeRecord rec = run_episode(pid, schedule, ec, 5, backend, bank);
  REQUIRE(rec.segments.size() == 3);
  for (int k = 1; k < 3; ++k) {
    CHECK(rec.segments[k].applied_tick == rec.segments[k].start_tick + 30);
  }
}

TEST_CASE("stationary tracker loses a receding target") {
  EvalConfig cfg = small_eval(10, 0, 2.0);
  const EvalResult r = evaluate(zero_factory(), cfg);
  int lost = 0;
  for (const auto& rec : r.records) {
    if (rec.outcome != RunState::kLost) continue;
    ++lost;
    CHECK(rec.length < 500);
    CHECK(static_cast<int>(rec.rewards.size()) == rec.length);
    // The episode ends on the lost limit: the last steps see nothing.
    for (int k = rec.length - 20; k < rec.length; ++k) CHECK(std::isnan(rec.center_distance[k]));
  }
  CHECK(lost >= 8);
}

TEST_CASE("state pid tracks a fixed goal at walking speed") {
  EvalConfig cfg = small_eval(50, 0, 0.5);
  const EvalResult r = evaluate(controller_factory("pid"), cfg);
  CHECK(r.metrics.sr >= 0.95);
  // Settled reward stays high once the loop has converged.
  double worst = 1.0;
  for (const auto& rec : r.records) {
    for (int k = 201; k < rec.length; ++k) worst = std::min(worst, rec.rewards[k]);
  }
  CHECK(worst >= 0.9);
}

TEST_CASE("random controller rarely survives") {
  EvalConfig cfg = small_eval(50, 0, 0.5);
  const EvalResult r = evaluate(controller_factory("random"), cfg);
  CHECK(r.metrics.sr <= 0.1);
}

TEST_CASE("evaluation is deterministic and metrics ignore episode order") {
  EvalConfig cfg = small_eval(6, 2, 1.0);
  const EvalResult a = evaluate(controller_factory("bbox-pid"), cfg);
  const EvalResult b = evaluate(controller_factory("bbox-pid"), cfg);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].rewards == b.records[i].rewards);
  }
  CHECK(a.metrics.ar == b.metrics.ar);

  auto rev = a.records;
  std::reverse(rev.begin(), rev.end());
  const Metrics m = aggregate(rev, 500);
  CHECK(m.ar == doctest::Approx(a.metrics.ar).epsilon(1e-12));
  CHECK(m.el == a.metrics.el);
  CHECK(m.sr == a.metrics.sr);
  CHECK(m.sr >= 0.0);
  CHECK(m.sr <= 1.0);
  CHECK(m.el <= 500.0);
}

TEST_CASE("aggregate of complete episodes") {
  std::vector<EpisodeRecord> recs(3);
  for (auto& r : recs) {
    r.length = 500;
    r.accumulated = 100.0;
    r.outcome = RunState::kCompleted;
  }
  const Metrics m = aggregate(recs, 500);
  CHECK(m.sr == 1.0);
  CHECK(m.el == 500.0);
  CHECK(m.ar == 100.0);
  CHECK(m.episodes == 3);
}

TEST_CASE("relative truth follows the state at issue and stays in the sector") {
  const GoalSpec closer = resolve_truth("Move closer to the target.", {400, 10});
  CHECK(closer.rho < 400);
  CHECK(closer.theta == doctest::Approx(10.0));
  const GoalSpec clamped = resolve_truth("Move closer to the target.", {160, 0});
  CHECK(clamped.rho >= 150.0);
  CHECK_NOTHROW(clamped.validate());
}

TEST_CASE("rule backend scores every table row") {
  RuleBackend backend;
  const ParserReport rep = parser_accuracy(backend);
  CHECK(rep.cases.size() == 42);
  CHECK(rep.accuracy == 1.0);
}

TEST_CASE("zero delta backend fails the relative rows") {
  ZeroBackend backend;
  const ParserReport rep = parser_accuracy(backend);
  REQUIRE(rep.cases.size() == 42);
  for (const auto& c : rep.cases) {
    if (c.intent.kind == GoalKind::kRelative) CHECK_FALSE(c.correct);
  }
}

TEST_CASE("close center band") {
  GoalIntent close;
  close.kind = GoalKind::kAbsolute;
  close.rho = 200;
  close.theta = 0;
  CHECK(absolute_goal_valid(close, BBox{0.5, 0.5, 0.3, 0.5}) == true);   // area 0.15
  CHECK(absolute_goal_valid(close, BBox{0.5, 0.5, 0.1, 0.2}) == false);  // area 0.02
}

TEST_CASE("reports carry every controller") {
  EvalConfig cfg = small_eval(2, 0, 0.5);
  std::vector<EvalResult> results{evaluate(controller_factory("oracle"), cfg),
                                  evaluate(controller_factory("pid"), cfg)};
  const nlohmann::json j = report_json(cfg, results);
  CHECK(j.dump().find("oracle") != std::string::npos);
  const std::string md = report_markdown(cfg, results);
  CHECK(md.find("| oracle") != std::string::npos);
  CHECK(md.find("500.0") != std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "itrack_eval_reports";
  std::filesystem::create_directories(dir);
  write_reports(dir.string(), cfg, results);
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "report.md"));
  std::ifstream in(dir / "report.json");
  CHECK(nlohmann::json::parse(in) == j);
  std::filesystem::remove_all(dir);

  const nlohmann::json cj = cfg;
  CHECK(cj.get<EvalConfig>().episodes == 2);
  EvalConfig bad = cfg;
  bad.switches = 5;
  CHECK_THROWS(bad.validate());
}
