#pragma once

// Goal-conditioned recurrent actor-critic: encoder + reward head, GRU,
// squashed-Gaussian actor, twin critics.

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "itrack/autodiff.hpp"
#include "itrack/geometry.hpp"
#include "itrack/sim.hpp"

namespace itrack {

enum class EncoderMode { kVector, kRaster };

std::string to_string(EncoderMode m);
EncoderMode encoder_mode_from_string(const std::string& s);

struct NetworkDims {
  EncoderMode mode = EncoderMode::kVector;
  int enc_hidden = 128;    // vector mode
  int latent = 256;
  int hidden = 64;         // GRU state
  int actor_hidden = 64;
  int critic_hidden = 64;
  // raster mode
  int raster_res = 84;
  int conv1_channels = 16;
  int conv2_channels = 32;

  int input_size() const;
  ad::ConvShape conv1() const;
  ad::ConvShape conv2() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const NetworkDims& d);
void from_json(const nlohmann::json& j, NetworkDims& d);

struct Linear {
  ad::Parameter w;  // in x out
  ad::Parameter b;  // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out);
  void init(std::mt19937_64& rng);
  void append(ad::ParamList& out) { out.push_back(&w); out.push_back(&b); }
};

struct CriticNet {
  Linear l1;  // (hidden + 2) -> critic_hidden
  Linear l2;  // critic_hidden -> 1

  CriticNet() = default;
  CriticNet(const std::string& name, const NetworkDims& d);
  ad::ParamList params();
};

class PolicyNetwork {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  PolicyNetwork() : PolicyNetwork(NetworkDims{}, 0) {}
  PolicyNetwork(const NetworkDims& dims, std::uint64_t seed);

  const NetworkDims& dims() const { return dims_; }

  // Feature rows for (observation, goal) pairs; a lost observation is zeros.
  ad::Matrix encoder_input(const std::vector<std::optional<BBox>>& obs,
                           const std::vector<BBox>& goals,
                           const CameraModel& cam = {}) const;
  void encoder_row(const std::optional<BBox>& obs, const BBox& goal,
                   const CameraModel& cam, double* dst) const;

  // Graph builders. With grad=false parameters enter as constants and the
  // network is only read.
  ad::Var encode(ad::Tape& t, const ad::Var& input, bool grad) const;
  ad::Var reward_head(ad::Tape& t, const ad::Var& latent, bool grad) const;
  ad::Var gru_step(ad::Tape& t, const ad::Var& x, const ad::Var& h, bool grad) const;
  // Returns (mean, log_std), each rows x 2; log_std clamped.
  std::pair<ad::Var, ad::Var> actor(ad::Tape& t, const ad::Var& h, bool grad) const;
  // `a` may hold `tiles` stacked action blocks for the same rows of `h`; the
  // feature half of the first layer is then computed once and tiled.
  ad::Var critic(ad::Tape& t, const CriticNet& c, const ad::Var& h, const ad::Var& a,
                 bool grad, int tiles = 1) const;

  ad::ParamList encoder_params();
  ad::ParamList reward_params();
  ad::ParamList gru_params();
  ad::ParamList actor_params();
  ad::ParamList critic_params();  // both online critics
  ad::ParamList all_params();     // online networks only
  ad::ParamList checkpoint_tensors();  // online + target critics

  std::array<CriticNet, 2> critics;
  std::array<CriticNet, 2> target_critics;

  // Vector mode
  Linear enc1, enc2;
  // Raster mode
  ad::Parameter conv1_w, conv1_b, conv2_w, conv2_b;
  Linear enc_fc;

  Linear reward;
  // GRU, gates stacked as [r | z | n] along columns.
  ad::Parameter gru_wx, gru_bx, gru_wh, gru_bh;
  Linear act1, act2;

  void copy_targets_from_online();

 private:
  NetworkDims dims_;
};

struct SquashedSample {
  ad::Var action;    // rows x 2, tanh-squashed
  ad::Var log_prob;  // rows x 1
};

// Reparameterized sample with tanh correction; `noise` is rows x 2 standard
// normal draws.
SquashedSample squashed_sample(const ad::Var& mean, const ad::Var& log_std,
                               const ad::Matrix& noise);

// Density of a = tanh(u), u ~ N(mean, exp(log_std)^2), evaluated at a in (-1,1).
double squashed_log_prob(double a, double mean, double log_std);

struct PolicyOutput {
  std::array<double, 2> mean{};
  std::array<double, 2> log_std{};
  std::array<double, 2> squashed{};
  double log_prob = 0.0;
};

struct PolicyStep {
  Action action;
  PolicyOutput out;
  ad::Matrix hidden;  // 1 x hidden
};

// One inference step. Deterministic mode returns tanh(mean); stochastic mode
// needs `rng`.
PolicyStep act(const PolicyNetwork& net, const std::optional<BBox>& obs, const BBox& goal,
               const ad::Matrix& hidden, bool deterministic, std::mt19937_64* rng = nullptr,
               const CameraModel& cam = {});

ad::Matrix zero_hidden(const PolicyNetwork& net, int rows = 1);

// Checkpoint: JSON with version, mode, dims, and a shape manifest per tensor.
nlohmann::json checkpoint_to_json(const PolicyNetwork& net);
PolicyNetwork checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const PolicyNetwork& net, const std::string& path);
PolicyNetwork load_checkpoint(const std::string& path);

}  // namespace itrack
