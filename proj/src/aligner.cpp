#include "itrack/aligner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#ifndef ITRACK_ASSET_DIR
#define ITRACK_ASSET_DIR "assets"
#endif

namespace itrack {

std::string TargetCategory::str() const {
  std::string out;
  for (const auto& a : attributes) {
    if (!out.empty()) out += ' ';
    out += a;
  }
  return out;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kGenerated: return "generated";
    case Provenance::kCorrectedFromMemory: return "corrected-from-memory";
    case Provenance::kUserBox: return "user-box";
  }
  return "unknown";
}

const std::vector<TableInstruction>& instruction_table() {
  static const std::vector<TableInstruction> table = [] {
    const GoalIntent close{GoalKind::kAbsolute, 200, 0}, far{GoalKind::kAbsolute, 450, 0};
    const GoalIntent left{GoalKind::kAbsolute, 350, -20}, right{GoalKind::kAbsolute, 350, 20};
    const GoalIntent nearer{GoalKind::kRelative, -150, 0}, further{GoalKind::kRelative, 150, 0};
    const GoalIntent dleft{GoalKind::kRelative, 0, -20}, dright{GoalKind::kRelative, 0, 20};
    return std::vector<TableInstruction>{
        {"Keep the person in the close center.", close},
        {"Ensure the person stays at the close center.", close},
        {"Maintain the person in the center at close range.", close},
        {"Keep the person positioned near the center.", close},
        {"Ensure the person remains close to the center.", close},
        {"Keep the person in the far-away center.", far},
        {"Ensure the person stays at the far-away center.", far},
        {"Keep the person in the center and at a far distance.", far},
        {"Keep the person in the far center.", far},
        {"Ensure the person stays at the far central position.", far},
        {"Keep the person on the left.", left},
        {"Position the person to the left of the center.", left},
        {"Keep the person to the left of the center.", left},
        {"Ensure the person remains on the left side.", left},
        {"Position the person on the left side of the center.", left},
        {"Keep the person aligned to the left.", left},
        {"Keep the person on the right.", right},
        {"Position the person to the right of the center.", right},
        {"Keep the person to the right of the center.", right},
        {"Ensure the person remains on the right side.", right},
        {"Position the person on the right side of the center.", right},
        {"Keep the person aligned to the right.", right},
        {"Keep the person in the current direction but closer.", nearer},
        {"Move the person closer.", nearer},
        {"Move the person closer while maintaining the same direction.", nearer},
        {"Keep the person in the same direction, but reduce the distance.", nearer},
        {"Bring the person closer, keeping the same direction.", nearer},
        {"Keep the person directly in front at a greater distance.", further},
        {"Move further away.", further},
        {"Keep the person ahead at a greater distance.", further},
        {"Increase the distance between you and the front person.", further},
        {"Maintain the person in front, far from you.", further},
        {"Track the person along the left side", dleft},
        {"Shift a bit to the left.", dleft},
        {"Move slightly to the left.", dleft},
        {"Move a bit toward the left.", dleft},
        {"Shift just a little to the left.", dleft},
        {"Track the target along the right side.", dright},
        {"Shift a bit to the right.", dright},
        {"Move slightly to the right.", dright},
        {"Move a bit toward the right.", dright},
        {"Shift just a little to the right.", dright},
    };
  }();
  return table;
}

// ---- text helpers ----

namespace {

// Lowercase, every non-alphanumeric run collapsed to one space.
std::string normalize_text(const std::string& text) {
  std::string out;
  bool space = true;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      out += static_cast<char>(std::tolower(c));
      space = false;
    } else if (!space) {
      out += ' ';
      space = true;
    }
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(normalize_text(text));
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

bool has_word(const std::vector<std::string>& ws, std::initializer_list<const char*> any) {
  for (const auto& w : ws) {
    for (const char* a : any) {
      if (w == a) return true;
    }
  }
  return false;
}

bool has_phrase(const std::string& norm, std::initializer_list<const char*> any) {
  const std::string padded = " " + norm + " ";
  for (const char* a : any) {
    if (padded.find(std::string(" ") + a + " ") != std::string::npos) return true;
  }
  return false;
}

}  // namespace

std::vector<std::string> default_lexicon() { return {"person", "car", "dog", "object"}; }

TargetCategory parse_category(const std::string& text, const std::vector<std::string>& lexicon,
                              bool* matched) {
  static const std::vector<std::string> stop = {
      "the", "a", "an", "to", "of", "from", "at", "in", "on", "and", "with",
      "keep", "follow", "track", "get", "move", "closer", "further", "farther",
      "this", "that", "my", "your", "front", "behind", "near", "away", "toward"};
  const std::vector<std::string> ws = words(text);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (std::find(lexicon.begin(), lexicon.end(), ws[i]) == lexicon.end()) continue;
    std::size_t start = i;
    while (start > 0 && std::find(stop.begin(), stop.end(), ws[start - 1]) == stop.end()) {
      --start;
    }
    if (matched) *matched = true;
    return TargetCategory{{ws.begin() + static_cast<std::ptrdiff_t>(start),
                           ws.begin() + static_cast<std::ptrdiff_t>(i) + 1}};
  }
  if (matched) *matched = false;
  return TargetCategory{{"person"}};
}

// ---- goal arithmetic ----

GoalDelta clip_delta(const GoalDelta& d) {
  auto c = [](double v) { return std::isfinite(v) ? std::clamp(v, -1.0, 1.0) : 0.0; };
  return {c(d.dcx), c(d.dcy), c(d.dw), c(d.dh)};
}

namespace {

constexpr double kMinExtent = 0.01;

// Clamp one axis (center, extent) into [0, 1] keeping at least kMinExtent.
void clamp_axis(double& center, double& extent) {
  extent = std::clamp(extent, kMinExtent, 1.0);
  double lo = center - 0.5 * extent;
  double hi = center + 0.5 * extent;
  // Leave boxes that already fit untouched so a zero delta is exact.
  if (lo >= 0.0 && hi <= 1.0) return;
  lo = std::max(0.0, lo);
  hi = std::min(1.0, hi);
  if (hi - lo < kMinExtent) {
    if (lo <= 0.0) {
      lo = 0.0;
      hi = kMinExtent;
    } else {
      hi = std::min(1.0, hi);
      lo = hi - kMinExtent;
    }
  }
  center = 0.5 * (lo + hi);
  extent = hi - lo;
}

}  // namespace

BBox compose_goal(const BBox& current, const GoalDelta& d) {
  BBox b{current.cx + d.dcx, current.cy + d.dcy, current.w + d.dw, current.h + d.dh};
  b.cx = std::isfinite(b.cx) ? b.cx : 0.5;
  b.cy = std::isfinite(b.cy) ? b.cy : 0.5;
  b.w = std::isfinite(b.w) ? b.w : kMinExtent;
  b.h = std::isfinite(b.h) ? b.h : kMinExtent;
  clamp_axis(b.cx, b.w);
  clamp_axis(b.cy, b.h);
  return b;
}

BBox correct(const BBox& candidate, const BBox& retrieved) {
  return iou(candidate, retrieved) > 0.5 ? candidate : retrieved;
}

// ---- rule backend ----

GoalIntent classify_instruction(const std::string& text) {
  const std::string norm = normalize_text(text);
  const std::vector<std::string> ws = words(text);
  const bool left = has_word(ws, {"left"});
  const bool right = has_word(ws, {"right"});
  if (left && right) throw UnrecognizedInstructionError("conflicting directions: " + text);
  const double side = left ? -20.0 : (right ? 20.0 : 0.0);

  const bool nearer = has_word(ws, {"closer", "nearer"}) ||
                      has_phrase(norm, {"reduce the distance", "decrease the distance"});
  const bool further = has_word(ws, {"further", "farther"}) ||
                       has_phrase(norm, {"greater distance", "increase the distance",
                                         "far from you", "back off"});
  if (nearer && further) throw UnrecognizedInstructionError("conflicting distances: " + text);
  const bool relative = nearer || further ||
                        has_word(ws, {"shift", "slightly", "bit", "little", "along", "move"});

  if (relative) {
    const double drho = nearer ? -150.0 : (further ? 150.0 : 0.0);
    if (drho == 0.0 && side == 0.0) {
      throw UnrecognizedInstructionError("no spatial change in: " + text);
    }
    return {GoalKind::kRelative, drho, side};
  }
  const bool close = has_word(ws, {"close", "near"});
  const bool far = has_word(ws, {"far", "distant"});
  if (close && far) throw UnrecognizedInstructionError("conflicting distances: " + text);
  const bool centered = has_word(ws, {"center", "centre", "central", "middle", "front", "ahead"});
  if (!close && !far && !centered && side == 0.0) {
    throw UnrecognizedInstructionError("unrecognized instruction: " + text);
  }
  return {GoalKind::kAbsolute, close ? 200.0 : (far ? 450.0 : 350.0), side};
}

BBox RuleBackend::goal_box(const GoalIntent& intent, const BBox& current) const {
  const CameraModel& cam = cfg_.camera;
  const double th = std::tan(deg2rad(0.5 * cam.fov_h));
  const double tv = std::tan(deg2rad(0.5 * cam.fov_v));
  auto clamp_rho = [&](double r) { return std::clamp(r, cfg_.rho_min, cfg_.rho_max); };
  auto clamp_theta = [&](double t) {
    return std::clamp(t, -cfg_.theta_limit, cfg_.theta_limit);
  };
  if (intent.kind == GoalKind::kAbsolute) {
    auto b = project({clamp_rho(intent.rho), clamp_theta(intent.theta)}, cam);
    if (!b) throw UnrecognizedInstructionError("goal outside the field of view");
    return *b;
  }
  if (!(current.h > 0.0)) throw UnrecognizedInstructionError("current box has no height");
  // Depth from box height, bearing from horizontal center; the box is then
  // rescaled about the principal point so its own proportions carry over.
  const double rho = cam.target_height / (2.0 * current.h * tv);
  const double theta = rad2deg(std::atan((2.0 * current.cx - 1.0) * th));
  const double rho_new = clamp_rho(rho + intent.rho);
  const double theta_new = clamp_theta(theta + intent.theta);
  const double s = rho / rho_new;
  BBox out{0.5 + 0.5 * std::tan(deg2rad(theta_new)) / th, 0.5 + (current.cy - 0.5) * s,
           current.w * s, current.h * s};
  return clamp_to_unit(out);
}

ParseResult RuleBackend::parse(const std::string& text, const BBox& current) {
  ParseResult r;
  r.category = parse_category(text, cfg_.lexicon);
  const GoalIntent intent = classify_instruction(text);
  const BBox goal = goal_box(intent, current);
  r.delta = clip_delta(difference(goal, current));
  r.reasoning = intent.kind == GoalKind::kAbsolute
                    ? fmt::format("absolute goal rho={:.0f} theta={:.0f}", intent.rho,
                                  intent.theta)
                    : fmt::format("relative change drho={:.0f} dtheta={:.0f}", intent.rho,
                                  intent.theta);
  return r;
}

// ---- remote backend ----

std::string asset_dir() {
  if (const char* env = std::getenv("ITRACK_ASSET_DIR")) return env;
  return ITRACK_ASSET_DIR;
}

std::string load_prompt(const std::string& name) {
  const std::string path = asset_dir() + "/prompts/" + name + ".txt";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing prompt asset " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RemoteConfig RemoteConfig::from_env() {
  RemoteConfig c;
  if (const char* e = std::getenv("ITRACK_LLM_ENDPOINT")) c.endpoint = e;
  if (const char* m = std::getenv("ITRACK_LLM_MODEL")) c.model = m;
  if (const char* k = std::getenv("ITRACK_LLM_API_KEY")) c.api_key = k;
  return c;
}

RemoteBackend::RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.endpoint.empty()) throw std::invalid_argument("remote backend needs an endpoint");
  if (cfg_.system_prompt.empty()) cfg_.system_prompt = load_prompt("instruction_parser");
}

std::string RemoteBackend::user_message(const std::string& text, const BBox& current) {
  return fmt::format("Instruction: \"{}\"\nCurrent bounding box: [{:.2f}, {:.2f}, {:.2f}, {:.2f}].",
                     text, current.cx, current.cy, current.w, current.h);
}

ParseResult RemoteBackend::parse(const std::string& text, const BBox& current) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(cfg_.endpoint, m, url_re)) {
    throw BackendError("bad endpoint url: " + cfg_.endpoint);
  }
  const std::string base = m[1].str();
  const std::string path = m[2].matched ? m[2].str() : "/v1/chat/completions";

  nlohmann::json body = {
      {"model", cfg_.model},
      {"temperature", 0},
      {"messages",
       {{{"role", "system"}, {"content", cfg_.system_prompt}},
        {{"role", "user"}, {"content", user_message(text, current)}}}}};

  httplib::Client cli(base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) throw BackendError("request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw BackendError(fmt::format("backend returned HTTP {}", res->status));
  }
  std::string content;
  try {
    const auto j = nlohmann::json::parse(res->body);
    content = j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed chat response: ") + e.what());
  }
  return parse_chat_response(content);
}

ParseResult parse_chat_response(const std::string& content) {
  ParseResult r;
  static const std::regex cat_re(R"(\*\*Target category:\*\*\s*\[?([^\]\n]*)\]?)",
                                 std::regex::icase);
  std::smatch m;
  if (std::regex_search(content, m, cat_re)) {
    for (std::string w : words(m[1].str())) r.category.attributes.push_back(w);
  }
  if (r.category.attributes.empty()) r.category.attributes = {"person"};

  const std::string marker = "**Bounding Box Increment:**";
  const auto pos = content.find(marker);
  if (pos == std::string::npos) throw BackendError("response lacks a bounding box increment");
  const std::string tail = content.substr(pos + marker.size());
  static const std::string num = R"(\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*)";
  static const std::regex vec_re("\\[" + num + "," + num + "," + num + "," + num + "\\]");
  std::optional<std::smatch> last;
  for (auto it = std::sregex_iterator(tail.begin(), tail.end(), vec_re);
       it != std::sregex_iterator(); ++it) {
    last = *it;
  }
  if (!last) throw BackendError("no [dcx, dcy, dw, dh] vector in response");
  const GoalDelta d{std::stod((*last)[1].str()), std::stod((*last)[2].str()),
                    std::stod((*last)[3].str()), std::stod((*last)[4].str())};
  r.delta = clip_delta(d);
  r.reasoning = tail.substr(0, static_cast<std::size_t>(last->position(0)));
  return r;
}

// ---- memory ----

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

nlohmann::json entry_to_json(const MemoryEntry& e) {
  return {{"text", e.text},
          {"embedding", std::vector<double>(e.embedding.begin(), e.embedding.end())},
          {"bbox", to_json(e.bbox)}};
}

MemoryEntry entry_from_json(const nlohmann::json& j) {
  MemoryEntry e;
  e.text = j.at("text").get<std::string>();
  e.bbox = bbox_from_json(j.at("bbox"));
  const auto v = j.at("embedding").get<std::vector<double>>();
  if (v.size() != kEmbeddingDim) throw std::runtime_error("embedding has wrong dimension");
  std::copy(v.begin(), v.end(), e.embedding.begin());
  double n2 = 0.0;
  for (double x : e.embedding) n2 += x * x;
  if (std::abs(n2 - 1.0) > 1e-6) throw std::runtime_error("embedding is not unit-norm");
  return e;
}

}  // namespace

Embedding embed(const std::string& text) {
  Embedding v{};
  const std::string norm = normalize_text(text);
  const std::string padded = " " + norm + " ";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    v[fnv1a("c:" + padded.substr(i, 3)) % kEmbeddingDim] += 1.0;
  }
  for (const auto& w : words(norm)) v[fnv1a("w:" + w) % kEmbeddingDim] += 1.0;
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  if (n2 == 0.0) {
    v[0] = 1.0;  // empty text still gets a unit vector
    return v;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

double cosine(const Embedding& a, const Embedding& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < kEmbeddingDim; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

MemoryBank::MemoryBank(const MemoryBank& other) {
  std::shared_lock lk(other.mu_);
  entries_ = other.entries_;
}

MemoryBank& MemoryBank::operator=(const MemoryBank& other) {
  if (this == &other) return *this;
  std::vector<MemoryEntry> copy = other.snapshot();
  std::unique_lock lk(mu_);
  entries_ = std::move(copy);
  persist_path_.clear();
  return *this;
}

MemoryBank MemoryBank::seeded(const CameraModel& cam) {
  MemoryBank bank;
  RuleConfig rc;
  rc.camera = cam;
  RuleBackend rule(rc);
  const BBox ref = *project({kReferenceRho, kReferenceTheta}, cam);
  for (const auto& row : instruction_table()) bank.add(row.text, rule.goal_box(row.intent, ref));
  return bank;
}

MemoryBank MemoryBank::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open memory bank " + path);
  MemoryBank bank;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      bank.entries_.push_back(entry_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(fmt::format("{}:{}: {}", path, lineno, e.what()));
    }
  }
  return bank;
}

void MemoryBank::add(const std::string& text, const BBox& bbox) {
  add(MemoryEntry{text, embed(text), bbox});
}

void MemoryBank::add(MemoryEntry e) {
  std::unique_lock lk(mu_);
  if (!persist_path_.empty()) {
    std::ofstream out(persist_path_, std::ios::app);
    out << entry_to_json(e).dump() << '\n';
    if (!out) throw std::runtime_error("cannot append to " + persist_path_);
  }
  entries_.push_back(std::move(e));
}

Retrieval MemoryBank::retrieve(const std::string& text) const {
  const Embedding q = embed(text);
  std::shared_lock lk(mu_);
  if (entries_.empty()) throw std::runtime_error("retrieval from an empty memory bank");
  Retrieval best;
  best.similarity = -2.0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const double s = cosine(q, entries_[i].embedding);
    if (s > best.similarity) {  // strict: ties keep the lowest index
      best.similarity = s;
      best.index = static_cast<int>(i);
    }
  }
  best.entry = entries_[static_cast<std::size_t>(best.index)];
  return best;
}

std::size_t MemoryBank::size() const {
  std::shared_lock lk(mu_);
  return entries_.size();
}

std::vector<MemoryEntry> MemoryBank::snapshot() const {
  std::shared_lock lk(mu_);
  return entries_;
}

void MemoryBank::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write memory bank " + path);
  for (const auto& e : snapshot()) out << entry_to_json(e).dump() << '\n';
}

void MemoryBank::persist_to(const std::string& path) {
  save(path);
  std::unique_lock lk(mu_);
  persist_path_ = path;
}

// ---- pipeline ----

SpatialGoal align(const Instruction& instr, const BBox& obs, MemoryBank& bank,
                  AlignerBackend& backend) {
  if (instr.text.empty()) throw UnrecognizedInstructionError("empty instruction");
  const ParseResult parsed = backend.parse(instr.text, obs);
  SpatialGoal g;
  g.category = parsed.category;
  g.source = instr.text;
  g.candidate = compose_goal(obs, parsed.delta);
  const Retrieval r = bank.retrieve(instr.text);
  g.retrieved_index = r.index;
  g.retrieved_iou = iou(g.candidate, r.entry.bbox);
  g.bbox = correct(g.candidate, r.entry.bbox);
  g.provenance = g.bbox == g.candidate && g.retrieved_iou > 0.5
                     ? Provenance::kGenerated
                     : Provenance::kCorrectedFromMemory;
  bank.add(instr.text, g.bbox);
  return g;
}

}  // namespace itrack
