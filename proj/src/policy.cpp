#include "itrack/policy.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace itrack {

using ad::Matrix;
using ad::Parameter;
using ad::ParamList;
using ad::Tape;
using ad::Var;

std::string to_string(EncoderMode m) {
  return m == EncoderMode::kVector ? "vector" : "raster";
}

EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "vector") return EncoderMode::kVector;
  if (s == "raster") return EncoderMode::kRaster;
  throw std::invalid_argument("unknown encoder mode: " + s);
}

int NetworkDims::input_size() const {
  return mode == EncoderMode::kVector ? 8 : raster_res * raster_res * 2;
}

ad::ConvShape NetworkDims::conv1() const {
  return {raster_res, raster_res, 2, 8, 4, conv1_channels};
}

ad::ConvShape NetworkDims::conv2() const {
  const ad::ConvShape c1 = conv1();
  return {c1.out_h(), c1.out_w(), conv1_channels, 4, 2, conv2_channels};
}

void NetworkDims::validate() const {
  if (enc_hidden < 1 || latent < 1 || hidden < 1 || actor_hidden < 1 || critic_hidden < 1) {
    throw std::invalid_argument("network dimensions must be positive");
  }
  if (mode == EncoderMode::kRaster) {
    if (conv1_channels < 1 || conv2_channels < 1) {
      throw std::invalid_argument("conv channels must be positive");
    }
    if (raster_res < 8 || conv1().out_h() < 4) {
      throw std::invalid_argument("raster resolution too small for the conv stack");
    }
  }
}

void to_json(nlohmann::json& j, const NetworkDims& d) {
  j = {{"mode", to_string(d.mode)},         {"enc_hidden", d.enc_hidden},
       {"latent", d.latent},                {"hidden", d.hidden},
       {"actor_hidden", d.actor_hidden},    {"critic_hidden", d.critic_hidden},
       {"raster_res", d.raster_res},        {"conv1_channels", d.conv1_channels},
       {"conv2_channels", d.conv2_channels}};
}

void from_json(const nlohmann::json& j, NetworkDims& d) {
  d = NetworkDims{};
  if (j.contains("mode")) d.mode = encoder_mode_from_string(j.at("mode").get<std::string>());
  d.enc_hidden = j.value("enc_hidden", d.enc_hidden);
  d.latent = j.value("latent", d.latent);
  d.hidden = j.value("hidden", d.hidden);
  d.actor_hidden = j.value("actor_hidden", d.actor_hidden);
  d.critic_hidden = j.value("critic_hidden", d.critic_hidden);
  d.raster_res = j.value("raster_res", d.raster_res);
  d.conv1_channels = j.value("conv1_channels", d.conv1_channels);
  d.conv2_channels = j.value("conv2_channels", d.conv2_channels);
  d.validate();
}

namespace {

void init_uniform(Parameter& p, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
}

// Inference binds weights as constants so a shared network is never written.
Var bind(Tape& t, const Parameter& p, bool grad) {
  return grad ? t.param(const_cast<Parameter&>(p)) : t.constant(p.value);
}

Var linear(Tape& t, const Linear& l, const Var& x, bool grad) {
  return ad::add_bias(ad::matmul(x, bind(t, l.w, grad)), bind(t, l.b, grad));
}

constexpr double kLog2 = 0.69314718055994530942;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace

Linear::Linear(const std::string& name, int in, int out)
    : w(name + ".w", in, out), b(name + ".b", 1, out) {}

void Linear::init(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.value.rows()));
  init_uniform(w, bound, rng);
  init_uniform(b, bound, rng);
}

CriticNet::CriticNet(const std::string& name, const NetworkDims& d)
    : l1(name + ".l1", d.hidden + 2, d.critic_hidden), l2(name + ".l2", d.critic_hidden, 1) {}

ParamList CriticNet::params() {
  ParamList out;
  l1.append(out);
  l2.append(out);
  return out;
}

PolicyNetwork::PolicyNetwork(const NetworkDims& dims, std::uint64_t seed) : dims_(dims) {
  dims_.validate();
  std::mt19937_64 rng(seed);
  const int H = dims_.hidden;
  if (dims_.mode == EncoderMode::kVector) {
    enc1 = Linear("enc1", 8, dims_.enc_hidden);
    enc2 = Linear("enc2", dims_.enc_hidden, dims_.latent);
    enc1.init(rng);
    enc2.init(rng);
  } else {
    const ad::ConvShape c1 = dims_.conv1(), c2 = dims_.conv2();
    conv1_w = Parameter("conv1.w", c1.patch(), c1.out_c);
    conv1_b = Parameter("conv1.b", 1, c1.out_c);
    conv2_w = Parameter("conv2.w", c2.patch(), c2.out_c);
    conv2_b = Parameter("conv2.b", 1, c2.out_c);
    const double b1 = 1.0 / std::sqrt(static_cast<double>(c1.patch()));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(c2.patch()));
    init_uniform(conv1_w, b1, rng);
    init_uniform(conv1_b, b1, rng);
    init_uniform(conv2_w, b2, rng);
    init_uniform(conv2_b, b2, rng);
    enc_fc = Linear("enc_fc", c2.out_size(), dims_.latent);
    enc_fc.init(rng);
  }
  reward = Linear("reward", dims_.latent, 1);
  reward.init(rng);

  gru_wx = Parameter("gru.wx", dims_.latent, 3 * H);
  gru_bx = Parameter("gru.bx", 1, 3 * H);
  gru_wh = Parameter("gru.wh", H, 3 * H);
  gru_bh = Parameter("gru.bh", 1, 3 * H);
  const double gb = 1.0 / std::sqrt(static_cast<double>(H));
  for (Parameter* p : {&gru_wx, &gru_bx, &gru_wh, &gru_bh}) init_uniform(*p, gb, rng);

  act1 = Linear("actor.l1", H, dims_.actor_hidden);
  act2 = Linear("actor.l2", dims_.actor_hidden, 4);
  act1.init(rng);
  act2.init(rng);

  for (int i = 0; i < 2; ++i) {
    critics[i] = CriticNet("critic" + std::to_string(i + 1), dims_);
    critics[i].l1.init(rng);
    critics[i].l2.init(rng);
    target_critics[i] = CriticNet("target" + std::to_string(i + 1), dims_);
  }
  copy_targets_from_online();
}

void PolicyNetwork::copy_targets_from_online() {
  for (int i = 0; i < 2; ++i) {
    target_critics[i].l1.w.value = critics[i].l1.w.value;
    target_critics[i].l1.b.value = critics[i].l1.b.value;
    target_critics[i].l2.w.value = critics[i].l2.w.value;
    target_critics[i].l2.b.value = critics[i].l2.b.value;
  }
}

void PolicyNetwork::encoder_row(const std::optional<BBox>& obs, const BBox& goal,
                                const CameraModel& cam, double* dst) const {
  if (dims_.mode == EncoderMode::kVector) {
    const auto g = goal.as_array();
    if (obs) {
      const auto o = obs->as_array();
      for (int k = 0; k < 4; ++k) dst[k] = o[k];
    } else {
      for (int k = 0; k < 4; ++k) dst[k] = 0.0;
    }
    for (int k = 0; k < 4; ++k) dst[4 + k] = g[k];
    return;
  }
  CameraModel c = cam;
  c.resolution = dims_.raster_res;
  const int n = dims_.raster_res * dims_.raster_res;
  if (obs) {
    const MaskImage m = render_mask(*obs, c);
    for (int i = 0; i < n; ++i) dst[2 * i] = m.pixels[i];
  } else {
    for (int i = 0; i < n; ++i) dst[2 * i] = 0.0;
  }
  const MaskImage gm = render_mask(goal, c);
  for (int i = 0; i < n; ++i) dst[2 * i + 1] = gm.pixels[i];
}

Matrix PolicyNetwork::encoder_input(const std::vector<std::optional<BBox>>& obs,
                                    const std::vector<BBox>& goals,
                                    const CameraModel& cam) const {
  if (obs.size() != goals.size()) throw std::invalid_argument("obs/goal count mismatch");
  Matrix x(static_cast<Eigen::Index>(obs.size()), dims_.input_size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    encoder_row(obs[i], goals[i], cam, x.row(static_cast<Eigen::Index>(i)).data());
  }
  return x;
}

Var PolicyNetwork::encode(Tape& t, const Var& input, bool grad) const {
  if (input.cols() != dims_.input_size()) throw std::invalid_argument("encoder input width");
  if (dims_.mode == EncoderMode::kVector) {
    Var h = ad::relu(linear(t, enc1, input, grad));
    return ad::relu(linear(t, enc2, h, grad));
  }
  Var c1 = ad::relu(ad::conv2d(input, bind(t, conv1_w, grad), bind(t, conv1_b, grad),
                               dims_.conv1()));
  Var c2 = ad::relu(ad::conv2d(c1, bind(t, conv2_w, grad), bind(t, conv2_b, grad),
                               dims_.conv2()));
  return ad::relu(linear(t, enc_fc, c2, grad));
}

Var PolicyNetwork::reward_head(Tape& t, const Var& latent, bool grad) const {
  return linear(t, reward, latent, grad);
}

Var PolicyNetwork::gru_step(Tape& t, const Var& x, const Var& h, bool grad) const {
  const int H = dims_.hidden;
  Var gx = ad::add_bias(ad::matmul(x, bind(t, gru_wx, grad)), bind(t, gru_bx, grad));
  Var gh = ad::add_bias(ad::matmul(h, bind(t, gru_wh, grad)), bind(t, gru_bh, grad));
  Var r = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, H), ad::slice_cols(gh, 0, H)));
  Var z = ad::sigmoid(ad::add(ad::slice_cols(gx, H, H), ad::slice_cols(gh, H, H)));
  Var n = ad::tanh(ad::add(ad::slice_cols(gx, 2 * H, H), ad::mul(r, ad::slice_cols(gh, 2 * H, H))));
  // (1 - z) * n + z * h
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

std::pair<Var, Var> PolicyNetwork::actor(Tape& t, const Var& h, bool grad) const {
  Var a = ad::relu(linear(t, act1, h, grad));
  Var out = linear(t, act2, a, grad);
  Var mean = ad::slice_cols(out, 0, 2);
  Var log_std = ad::clamp(ad::slice_cols(out, 2, 2), kLogStdMin, kLogStdMax);
  return {mean, log_std};
}

Var PolicyNetwork::critic(Tape& t, const CriticNet& c, const Var& h, const Var& a,
                          bool grad, int tiles) const {
  if (a.rows() != h.rows() * tiles) throw std::invalid_argument("critic: action rows");
  const Eigen::Index H = dims_.hidden;
  Var w = bind(t, c.l1.w, grad);
  Var hf = ad::matmul(h, ad::slice_rows(w, 0, H));
  Var hid = ad::tiled_affine_relu(hf, a, ad::slice_rows(w, H, 2), bind(t, c.l1.b, grad), tiles);
  return linear(t, c.l2, hid, grad);
}

ParamList PolicyNetwork::encoder_params() {
  ParamList out;
  if (dims_.mode == EncoderMode::kVector) {
    enc1.append(out);
    enc2.append(out);
  } else {
    out.insert(out.end(), {&conv1_w, &conv1_b, &conv2_w, &conv2_b});
    enc_fc.append(out);
  }
  return out;
}

ParamList PolicyNetwork::reward_params() {
  ParamList out;
  reward.append(out);
  return out;
}

ParamList PolicyNetwork::gru_params() { return {&gru_wx, &gru_bx, &gru_wh, &gru_bh}; }

ParamList PolicyNetwork::actor_params() {
  ParamList out;
  act1.append(out);
  act2.append(out);
  return out;
}

ParamList PolicyNetwork::critic_params() {
  ParamList out = critics[0].params();
  for (Parameter* p : critics[1].params()) out.push_back(p);
  return out;
}

ParamList PolicyNetwork::all_params() {
  ParamList out;
  for (ParamList part : {encoder_params(), reward_params(), gru_params(), actor_params(),
                         critic_params()}) {
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

ParamList PolicyNetwork::checkpoint_tensors() {
  ParamList out = all_params();
  for (auto& c : target_critics) {
    for (Parameter* p : c.params()) out.push_back(p);
  }
  return out;
}

SquashedSample squashed_sample(const Var& mean, const Var& log_std, const Matrix& noise) {
  Tape& t = *mean.tape();
  if (noise.rows() != mean.rows() || noise.cols() != mean.cols()) {
    throw std::invalid_argument("noise shape mismatch");
  }
  Var u = ad::add(mean, ad::mul_const(ad::exp(log_std), noise));
  Var a = ad::tanh(u);
  // log N(u) - log(1 - tanh(u)^2), with the correction written stably as
  // 2 (log 2 - u - softplus(-2u)).
  Matrix c = (-0.5 * noise.array().square() - kHalfLog2Pi - 2.0 * kLog2).matrix();
  Var per_dim = ad::add(ad::sub(t.constant(std::move(c)), log_std),
                        ad::add(ad::scale(u, 2.0), ad::scale(ad::softplus(ad::scale(u, -2.0)), 2.0)));
  return {a, ad::row_sum(per_dim)};
}

double squashed_log_prob(double a, double mean, double log_std) {
  const double u = std::atanh(a);
  const double z = (u - mean) * std::exp(-log_std);
  return -0.5 * z * z - log_std - kHalfLog2Pi - std::log1p(-a * a);
}

Matrix zero_hidden(const PolicyNetwork& net, int rows) {
  return Matrix::Zero(rows, net.dims().hidden);
}

PolicyStep act(const PolicyNetwork& net, const std::optional<BBox>& obs, const BBox& goal,
               const Matrix& hidden, bool deterministic, std::mt19937_64* rng,
               const CameraModel& cam) {
  if (!deterministic && !rng) throw std::invalid_argument("stochastic act needs an rng");
  Tape t;
  Matrix in(1, net.dims().input_size());
  net.encoder_row(obs, goal, cam, in.data());
  Var latent = net.encode(t, t.constant(std::move(in)), false);
  Var h = net.gru_step(t, latent, t.constant(hidden), false);
  auto [mean, log_std] = net.actor(t, h, false);

  PolicyStep res;
  res.hidden = h.value();
  for (int k = 0; k < 2; ++k) {
    res.out.mean[k] = mean.value()(0, k);
    res.out.log_std[k] = log_std.value()(0, k);
  }
  if (deterministic) {
    res.out.log_prob = 0.0;
    for (int k = 0; k < 2; ++k) {
      res.out.squashed[k] = std::tanh(res.out.mean[k]);
      const double u = res.out.mean[k];
      const double sp = u < 0 ? -2.0 * u + std::log1p(std::exp(2.0 * u))
                              : std::log1p(std::exp(-2.0 * u));
      res.out.log_prob += -res.out.log_std[k] - kHalfLog2Pi - 2.0 * (kLog2 - u - sp);
    }
  } else {
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix noise(1, 2);
    noise(0, 0) = nd(*rng);
    noise(0, 1) = nd(*rng);
    SquashedSample s = squashed_sample(mean, log_std, noise);
    for (int k = 0; k < 2; ++k) res.out.squashed[k] = s.action.value()(0, k);
    res.out.log_prob = s.log_prob.scalar();
  }
  res.action = Action::from_normalized(res.out.squashed[0], res.out.squashed[1]);
  return res;
}

// ---- checkpoints ----

namespace {
constexpr int kCheckpointVersion = 1;
}

nlohmann::json checkpoint_to_json(const PolicyNetwork& net) {
  nlohmann::json j;
  j["format"] = "itrack-policy";
  j["version"] = kCheckpointVersion;
  j["mode"] = to_string(net.dims().mode);
  j["dims"] = net.dims();
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter* p : const_cast<PolicyNetwork&>(net).checkpoint_tensors()) {
    std::vector<double> data(p->value.data(), p->value.data() + p->value.size());
    tensors.push_back({{"name", p->name},
                       {"shape", {p->value.rows(), p->value.cols()}},
                       {"data", std::move(data)}});
  }
  j["tensors"] = std::move(tensors);
  return j;
}

PolicyNetwork checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "itrack-policy") {
    throw std::runtime_error("not a policy checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  NetworkDims dims = j.at("dims").get<NetworkDims>();
  if (to_string(dims.mode) != j.at("mode").get<std::string>()) {
    throw std::runtime_error("checkpoint mode does not match dims");
  }
  PolicyNetwork net(dims, 0);
  ParamList params = net.checkpoint_tensors();
  const auto& tensors = j.at("tensors");
  if (tensors.size() != params.size()) throw std::runtime_error("checkpoint tensor count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    Parameter& p = *params[i];
    if (t.at("name").get<std::string>() != p.name) {
      throw std::runtime_error("checkpoint tensor order: expected " + p.name);
    }
    const auto shape = t.at("shape").get<std::array<Eigen::Index, 2>>();
    if (shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    }
    const auto data = t.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != p.value.size()) {
      throw std::runtime_error("checkpoint data size for " + p.name);
    }
    std::copy(data.begin(), data.end(), p.value.data());
  }
  return net;
}

void save_checkpoint(const PolicyNetwork& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << checkpoint_to_json(net).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

PolicyNetwork load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace itrack
