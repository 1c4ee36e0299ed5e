#pragma once

// Goal-conditioned offline actor-critic training with a conservative
// penalty and auxiliary reward regression.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "itrack/dataset.hpp"
#include "itrack/policy.hpp"

namespace itrack {

struct TrainConfig {
  double lr = 3e-5;
  int batch = 128;
  int seq_len = 20;
  double gamma = 0.99;
  double alpha = 0.2;
  int n_uniform = 10;
  int n_policy = 10;
  double tau = 0.005;
  double cql_weight = 1.0;
  double reg_weight = 1.0;
  long steps = 100000;
  std::uint64_t seed = 0;

  double val_fraction = 0.1;  // episodes held out for validation metrics
  int val_windows = 256;
  long log_every = 100;
  long eval_every = 0;        // 0 disables periodic evaluation
  long checkpoint_every = 0;
  std::string metrics_path;   // JSONL, one line per logged step
  std::string checkpoint_path;
  NetworkDims dims;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Windows of seq_len consecutive transitions from single episodes; row
// layout is time-major (row = t * B + b).
struct SequenceBatch {
  int B = 0;
  int T = 0;
  ad::Matrix inputs;    // (T + 1) * B x input_size; row T*B+b is the final next obs
  ad::Matrix actions;   // T * B x 2
  ad::Matrix rewards;   // T * B x 1
  ad::Matrix not_done;  // T * B x 1, 0 where the episode ended by loss
  ad::Matrix weights;   // T * B x 1, per-goal normalization, sums to 1
  std::vector<BBox> goals;  // per window
};

// Index of every valid window start in the dataset.
class WindowSampler {
 public:
  WindowSampler(const Dataset& d, const std::vector<std::size_t>& episode_ids, int seq_len);

  std::size_t count() const { return starts_.size(); }
  std::size_t sample(std::mt19937_64& rng) const;
  std::size_t start(std::size_t i) const { return starts_[i]; }

 private:
  std::vector<std::size_t> starts_;  // transition index of each window start
};

SequenceBatch make_batch(const Dataset& d, const std::vector<std::size_t>& window_starts,
                         int seq_len, const PolicyNetwork& net);

// Per-sample weights: each distinct goal contributes its mean loss and the
// per-goal terms are averaged, so weights sum to one.
ad::Matrix goal_weights(const std::vector<BBox>& goals, int T);

// Importance-sampled log-integral of exp(Q) minus Q at the data action.
// q_samples and log_density are N x K, q_data is N x 1; returns N x 1.
ad::Var conservative_gap(const ad::Var& q_samples, const ad::Matrix& log_density,
                         const ad::Var& q_data);

struct LossTerms {
  ad::Var critic;        // Bellman error, both critics
  ad::Var conservative;  // weighted conservative penalty, both critics
  ad::Var actor;
  ad::Var reward_reg;
  ad::Var total;
  double q_data_mean = 0.0;
  double q_uniform_mean = 0.0;
  double target_mean = 0.0;
  double log_prob_mean = 0.0;
};

// Pre-drawn randomness for one loss evaluation.
struct LossNoise {
  ad::Matrix uniform_actions;  // K_u * T * B x 2, in [-1, 1]
  ad::Matrix policy_noise;     // K_p * T * B x 2
  ad::Matrix next_noise;       // T * B x 2
  ad::Matrix actor_noise;      // T * B x 2

  static LossNoise draw(std::mt19937_64& rng, int rows, int n_uniform, int n_policy);
};

LossTerms compute_losses(ad::Tape& t, PolicyNetwork& net, const SequenceBatch& batch,
                         const TrainConfig& cfg, const LossNoise& noise);

ad::Var reward_regression_loss(ad::Tape& t, PolicyNetwork& net, const SequenceBatch& batch);

void soft_update(PolicyNetwork& net, double tau);

struct ValidationStats {
  double reward_mse = 0.0;
  double q_data = 0.0;     // mean Q_min at dataset actions
  double q_uniform = 0.0;  // mean Q_min at uniform actions
};

ValidationStats validate_network(const PolicyNetwork& net, const SequenceBatch& batch,
                                 std::mt19937_64& rng);

using EvalHook = std::function<nlohmann::json(const PolicyNetwork&, long step)>;

struct TrainResult {
  PolicyNetwork net;
  std::vector<nlohmann::json> log;
  ValidationStats validation;
};

// Receives every metrics record as it is emitted.
using LogHook = std::function<void(const nlohmann::json&)>;

TrainResult train(const Dataset& d, const TrainConfig& cfg, const EvalHook& eval = {},
                  const LogHook& on_log = {});

}  // namespace itrack
