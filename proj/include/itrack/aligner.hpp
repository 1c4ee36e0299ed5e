#pragma once

// Instruction -> spatial goal: category parsing, goal-delta backends,
// memory-bank retrieval and IoU-gated correction.

#include <array>
#include <chrono>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "itrack/geometry.hpp"

namespace itrack {

class UnrecognizedInstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Instruction {
  std::string text;
  int issue_tick = 0;
};

struct TargetCategory {
  std::vector<std::string> attributes;  // e.g. {"blue", "car"}

  std::string str() const;  // space-joined
  friend bool operator==(const TargetCategory&, const TargetCategory&) = default;
};

enum class Provenance { kGenerated, kCorrectedFromMemory, kUserBox };
std::string to_string(Provenance p);

struct SpatialGoal {
  TargetCategory category;
  BBox bbox;
  Provenance provenance = Provenance::kGenerated;
  std::string source;   // instruction text
  BBox candidate;       // backend goal before correction
  double retrieved_iou = 1.0;
  int retrieved_index = -1;
};

// ---- instruction table ----

enum class GoalKind { kAbsolute, kRelative };

struct GoalIntent {
  GoalKind kind = GoalKind::kAbsolute;
  double rho = 350.0;    // absolute: rho*, relative: delta rho (cm)
  double theta = 0.0;    // absolute: theta*, relative: delta theta (deg)

  friend bool operator==(const GoalIntent&, const GoalIntent&) = default;
};

struct TableInstruction {
  std::string text;
  GoalIntent intent;
};

// The 42-row benchmark: 22 absolute rows followed by 20 relative rows.
const std::vector<TableInstruction>& instruction_table();

// Reference state used to seed relative rows and to score the parser.
constexpr double kReferenceRho = 350.0;
constexpr double kReferenceTheta = 0.0;

// ---- category parsing ----

std::vector<std::string> default_lexicon();
// Lexicon noun plus the adjectives directly before it. Falls back to
// {"person"} when no lexicon word occurs; `matched` reports which path ran.
TargetCategory parse_category(const std::string& text,
                              const std::vector<std::string>& lexicon = default_lexicon(),
                              bool* matched = nullptr);

// ---- goal arithmetic ----

GoalDelta clip_delta(const GoalDelta& d);
BBox compose_goal(const BBox& current, const GoalDelta& d);
// IoU gate: keep the candidate if iou > 0.5, else the retrieved goal.
BBox correct(const BBox& candidate, const BBox& retrieved);

// ---- backends ----

struct ParseResult {
  TargetCategory category;
  GoalDelta delta;       // clipped to [-1, 1]
  std::string reasoning;
};

class AlignerBackend {
 public:
  virtual ~AlignerBackend() = default;
  virtual ParseResult parse(const std::string& text, const BBox& current) = 0;
  virtual std::string name() const = 0;
};

struct RuleConfig {
  std::vector<std::string> lexicon = default_lexicon();
  double rho_min = 150.0;
  double rho_max = 750.0;
  double theta_limit = 44.0;  // deg, keeps goals inside the horizontal fov
  CameraModel camera;
};

// Keyword classifier for the absolute / relative goal taxonomy.
GoalIntent classify_instruction(const std::string& text);

class RuleBackend : public AlignerBackend {
 public:
  explicit RuleBackend(RuleConfig cfg = {}) : cfg_(std::move(cfg)) {}
  ParseResult parse(const std::string& text, const BBox& current) override;
  std::string name() const override { return "rule"; }
  // Goal box for an intent applied at `current`.
  BBox goal_box(const GoalIntent& intent, const BBox& current) const;
  const RuleConfig& config() const { return cfg_; }

 private:
  RuleConfig cfg_;
};

struct RemoteConfig {
  std::string endpoint;   // e.g. http://host:port/v1/chat/completions
  std::string model = "gpt-4o";
  std::string api_key;
  std::chrono::milliseconds timeout{30000};
  std::string system_prompt;  // defaults to the bundled prompt asset

  // Reads ITRACK_LLM_ENDPOINT, ITRACK_LLM_MODEL, ITRACK_LLM_API_KEY.
  static RemoteConfig from_env();
};

// Chat-completion backend speaking the OpenAI-compatible JSON protocol.
class RemoteBackend : public AlignerBackend {
 public:
  explicit RemoteBackend(RemoteConfig cfg);
  ParseResult parse(const std::string& text, const BBox& current) override;
  std::string name() const override { return "remote"; }

  static std::string user_message(const std::string& text, const BBox& current);

 private:
  RemoteConfig cfg_;
};

// Parses "**Target category:** [x]" and the final "[dcx, dcy, dw, dh]".
ParseResult parse_chat_response(const std::string& content);

std::string asset_dir();
std::string load_prompt(const std::string& name);  // assets/prompts/<name>.txt

// ---- memory ----

constexpr int kEmbeddingDim = 256;
using Embedding = std::array<double, kEmbeddingDim>;

Embedding embed(const std::string& text);
double cosine(const Embedding& a, const Embedding& b);

struct MemoryEntry {
  std::string text;
  Embedding embedding{};
  BBox bbox;
};

struct Retrieval {
  MemoryEntry entry;
  int index = -1;
  double similarity = 0.0;
};

// Append-only bank; one writer, many readers.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(const MemoryBank& other);
  MemoryBank& operator=(const MemoryBank& other);

  // The 42 table instructions with their goals projected; relative rows are
  // applied at the reference state.
  static MemoryBank seeded(const CameraModel& cam = {});
  static MemoryBank load(const std::string& path);

  void add(const std::string& text, const BBox& bbox);
  void add(MemoryEntry e);
  Retrieval retrieve(const std::string& text) const;
  std::size_t size() const;
  std::vector<MemoryEntry> snapshot() const;

  // Rewrite the whole bank, or set a file that every add() appends to.
  void save(const std::string& path) const;
  void persist_to(const std::string& path);

 private:
  mutable std::shared_mutex mu_;
  std::vector<MemoryEntry> entries_;
  std::string persist_path_;
};

// Full pipeline; appends the accepted goal to the bank.
SpatialGoal align(const Instruction& instr, const BBox& obs, MemoryBank& bank,
                  AlignerBackend& backend);

}  // namespace itrack
