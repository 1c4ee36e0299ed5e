#include "itrack/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <fmt/format.h>

namespace itrack {

using ad::Matrix;
using ad::Tape;
using ad::Var;

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("lr must be non-negative");
  if (batch < 1 || seq_len < 1) throw std::invalid_argument("batch and seq_len must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be non-negative");
  if (n_uniform < 0 || n_policy < 0 || n_uniform + n_policy < 1) {
    throw std::invalid_argument("need at least one conservative action sample");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  }
  dims.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch", c.batch},
       {"seq_len", c.seq_len},
       {"gamma", c.gamma},
       {"alpha", c.alpha},
       {"n_uniform", c.n_uniform},
       {"n_policy", c.n_policy},
       {"tau", c.tau},
       {"cql_weight", c.cql_weight},
       {"reg_weight", c.reg_weight},
       {"steps", c.steps},
       {"seed", c.seed},
       {"val_fraction", c.val_fraction},
       {"val_windows", c.val_windows},
       {"log_every", c.log_every},
       {"eval_every", c.eval_every},
       {"checkpoint_every", c.checkpoint_every},
       {"metrics_path", c.metrics_path},
       {"checkpoint_path", c.checkpoint_path},
       {"dims", c.dims}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.gamma = j.value("gamma", c.gamma);
  c.alpha = j.value("alpha", c.alpha);
  c.n_uniform = j.value("n_uniform", c.n_uniform);
  c.n_policy = j.value("n_policy", c.n_policy);
  c.tau = j.value("tau", c.tau);
  c.cql_weight = j.value("cql_weight", c.cql_weight);
  c.reg_weight = j.value("reg_weight", c.reg_weight);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.val_windows = j.value("val_windows", c.val_windows);
  c.log_every = j.value("log_every", c.log_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.metrics_path = j.value("metrics_path", c.metrics_path);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  if (j.contains("dims")) c.dims = j.at("dims").get<NetworkDims>();
  c.validate();
}

// ---- batching ----

WindowSampler::WindowSampler(const Dataset& d, const std::vector<std::size_t>& episode_ids,
                             int seq_len) {
  const auto eps = d.episodes();
  for (std::size_t id : episode_ids) {
    const auto [begin, end] = eps.at(id);
    // Episodes shorter than one window contribute nothing.
    const std::size_t len = end - begin;
    if (len < static_cast<std::size_t>(seq_len)) continue;
    for (std::size_t s = begin; s + seq_len <= end; ++s) starts_.push_back(s);
  }
}

std::size_t WindowSampler::sample(std::mt19937_64& rng) const {
  if (starts_.empty()) throw std::runtime_error("no training windows available");
  std::uniform_int_distribution<std::size_t> pick(0, starts_.size() - 1);
  return starts_[pick(rng)];
}

Matrix goal_weights(const std::vector<BBox>& goals, int T) {
  std::map<std::array<double, 4>, int> counts;
  for (const auto& g : goals) ++counts[g.as_array()];
  const double n_goals = static_cast<double>(counts.size());
  const int B = static_cast<int>(goals.size());
  Matrix w(static_cast<Eigen::Index>(T) * B, 1);
  for (int b = 0; b < B; ++b) {
    const double wb = 1.0 / (n_goals * counts[goals[b].as_array()] * T);
    for (int t = 0; t < T; ++t) w(t * B + b, 0) = wb;
  }
  return w;
}

SequenceBatch make_batch(const Dataset& d, const std::vector<std::size_t>& window_starts,
                         int seq_len, const PolicyNetwork& net) {
  SequenceBatch sb;
  sb.B = static_cast<int>(window_starts.size());
  sb.T = seq_len;
  const int B = sb.B, T = sb.T;
  sb.inputs.resize(static_cast<Eigen::Index>(T + 1) * B, net.dims().input_size());
  sb.actions.resize(static_cast<Eigen::Index>(T) * B, 2);
  sb.rewards.resize(static_cast<Eigen::Index>(T) * B, 1);
  sb.not_done.resize(static_cast<Eigen::Index>(T) * B, 1);
  for (int b = 0; b < B; ++b) {
    const std::size_t s0 = window_starts[b];
    const BBox& goal = d.transitions[s0].goal;
    sb.goals.push_back(goal);
    for (int t = 0; t < T; ++t) {
      const Transition& tr = d.transitions[s0 + t];
      if (tr.episode != d.transitions[s0].episode) {
        throw std::logic_error("window crosses an episode boundary");
      }
      const Eigen::Index row = static_cast<Eigen::Index>(t) * B + b;
      net.encoder_row(tr.o, goal, d.header.camera, sb.inputs.row(row).data());
      sb.actions(row, 0) = tr.a[0];
      sb.actions(row, 1) = tr.a[1];
      sb.rewards(row, 0) = tr.r;
      sb.not_done(row, 0) = tr.terminal ? 0.0 : 1.0;
    }
    const Transition& last = d.transitions[s0 + T - 1];
    net.encoder_row(last.o2, goal, d.header.camera,
                    sb.inputs.row(static_cast<Eigen::Index>(T) * B + b).data());
  }
  sb.weights = goal_weights(sb.goals, T);
  return sb;
}

// ---- losses ----

Var conservative_gap(const Var& q_samples, const Matrix& log_density, const Var& q_data) {
  Tape& t = *q_samples.tape();
  const double k = static_cast<double>(q_samples.cols());
  Var lse = ad::logsumexp_rows(ad::sub(q_samples, t.constant(log_density)));
  return ad::sub(ad::add_scalar(lse, -std::log(k)), q_data);
}

LossNoise LossNoise::draw(std::mt19937_64& rng, int rows, int n_uniform, int n_policy) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  LossNoise n;
  auto fill = [&](Matrix& m, Eigen::Index r, auto& dist) {
    m.resize(r, 2);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  fill(n.uniform_actions, static_cast<Eigen::Index>(n_uniform) * rows, u);
  fill(n.policy_noise, static_cast<Eigen::Index>(n_policy) * rows, nd);
  fill(n.next_noise, rows, nd);
  fill(n.actor_noise, rows, nd);
  return n;
}

namespace {

struct Features {
  Var latent;  // (T + 1) * B x latent
  Var F;       // T * B x hidden, features of S_t
  Matrix next; // T * B x hidden values, features of S_{t+1}
};

Features unroll(Tape& t, const PolicyNetwork& net, const SequenceBatch& batch, bool grad) {
  const int B = batch.B, T = batch.T;
  Features f;
  f.latent = net.encode(t, t.constant(batch.inputs), grad);
  Var h = t.constant(zero_hidden(net, B));
  std::vector<Var> hs;
  for (int k = 0; k <= T; ++k) {
    h = net.gru_step(t, ad::slice_rows(f.latent, static_cast<Eigen::Index>(k) * B, B), h, grad);
    hs.push_back(h);
  }
  f.F = ad::concat_rows(std::vector<Var>(hs.begin(), hs.end() - 1));
  f.next.resize(static_cast<Eigen::Index>(T) * B, net.dims().hidden);
  for (int k = 1; k <= T; ++k) {
    f.next.middleRows(static_cast<Eigen::Index>(k - 1) * B, B) = hs[k].value();
  }
  return f;
}

constexpr double kLogUniformDensity = -1.3862943611198906;  // log(1/4) on [-1, 1]^2

}  // namespace

LossTerms compute_losses(Tape& t, PolicyNetwork& net, const SequenceBatch& batch,
                         const TrainConfig& cfg, const LossNoise& noise) {
  const int N = batch.T * batch.B;
  const int Ku = cfg.n_uniform, Kp = cfg.n_policy;
  LossTerms out;
  Features f = unroll(t, net, batch, true);
  Var F_det = t.constant(f.F.value());

  // Bellman target from target critics and the entropy-corrected next value.
  Matrix y;
  {
    Var Fn = t.constant(f.next);
    auto [mn, ls] = net.actor(t, Fn, false);
    SquashedSample ns = squashed_sample(mn, ls, noise.next_noise);
    Var a_next = t.constant(ns.action.value());
    const Matrix q1 = net.critic(t, net.target_critics[0], Fn, a_next, false).value();
    const Matrix q2 = net.critic(t, net.target_critics[1], Fn, a_next, false).value();
    const Matrix v = q1.cwiseMin(q2) - cfg.alpha * ns.log_prob.value();
    y = batch.rewards + cfg.gamma * batch.not_done.cwiseProduct(v);
    out.target_mean = y.mean();
    out.log_prob_mean = ns.log_prob.value().mean();
  }
  Var Y = t.constant(y);
  Var A = t.constant(batch.actions);

  // Policy samples for the conservative term, treated as fixed actions.
  Matrix policy_actions(static_cast<Eigen::Index>(Kp) * N, 2);
  Matrix policy_logp(N, std::max(Kp, 0));
  if (Kp > 0) {
    auto [mn, ls] = net.actor(t, F_det, false);
    Var mt = t.constant(mn.value().replicate(Kp, 1));
    Var lt = t.constant(ls.value().replicate(Kp, 1));
    SquashedSample ps = squashed_sample(mt, lt, noise.policy_noise);
    policy_actions = ps.action.value();
    for (int k = 0; k < Kp; ++k) {
      policy_logp.col(k) = ps.log_prob.value().middleRows(static_cast<Eigen::Index>(k) * N, N).col(0);
    }
  }
  Matrix log_density(N, Ku + Kp);
  log_density.leftCols(Ku).setConstant(kLogUniformDensity);
  log_density.rightCols(Kp) = policy_logp;

  std::vector<Var> critic_terms, cql_terms;
  Var Au = Ku > 0 ? t.constant(noise.uniform_actions) : Var{};
  Var Ap = Kp > 0 ? t.constant(policy_actions) : Var{};
  double q_data_sum = 0.0, q_uniform_sum = 0.0;
  for (int i = 0; i < 2; ++i) {
    const CriticNet& c = net.critics[i];
    Var q = net.critic(t, c, f.F, A, true);
    critic_terms.push_back(ad::weighted_sum(ad::square(ad::sub(q, Y)), batch.weights));
    std::vector<Var> cols;
    if (Ku > 0) cols.push_back(ad::blocks_to_cols(net.critic(t, c, f.F, Au, true, Ku), Ku));
    if (Kp > 0) cols.push_back(ad::blocks_to_cols(net.critic(t, c, f.F, Ap, true, Kp), Kp));
    Var samples = ad::concat_cols(cols);
    cql_terms.push_back(ad::weighted_sum(conservative_gap(samples, log_density, q), batch.weights));
    q_data_sum += q.value().mean();
    if (Ku > 0) q_uniform_sum += cols[0].value().mean();
  }
  out.q_data_mean = 0.5 * q_data_sum;
  out.q_uniform_mean = 0.5 * q_uniform_sum;
  out.critic = ad::add(critic_terms[0], critic_terms[1]);
  out.conservative = ad::add(cql_terms[0], cql_terms[1]);

  // Actor on detached features against frozen critics.
  {
    auto [mn, ls] = net.actor(t, F_det, true);
    SquashedSample s = squashed_sample(mn, ls, noise.actor_noise);
    Var q1 = net.critic(t, net.critics[0], F_det, s.action, false);
    Var q2 = net.critic(t, net.critics[1], F_det, s.action, false);
    Var per = ad::sub(ad::scale(s.log_prob, cfg.alpha), ad::minimum(q1, q2));
    out.actor = ad::weighted_sum(per, batch.weights);
  }

  Var rhat = net.reward_head(t, ad::slice_rows(f.latent, 0, N), true);
  out.reward_reg = ad::mean(ad::square(ad::sub(rhat, t.constant(batch.rewards))));

  out.total = ad::add(ad::add(out.critic, ad::scale(out.conservative, cfg.cql_weight)),
                      ad::add(out.actor, ad::scale(out.reward_reg, cfg.reg_weight)));
  return out;
}

Var reward_regression_loss(Tape& t, PolicyNetwork& net, const SequenceBatch& batch) {
  const int N = batch.T * batch.B;
  Var latent = net.encode(t, t.constant(batch.inputs.topRows(N)), true);
  Var rhat = net.reward_head(t, latent, true);
  return ad::mean(ad::square(ad::sub(rhat, t.constant(batch.rewards))));
}

void soft_update(PolicyNetwork& net, double tau) {
  for (int i = 0; i < 2; ++i) {
    ad::ParamList online = net.critics[i].params();
    ad::ParamList target = net.target_critics[i].params();
    for (std::size_t k = 0; k < online.size(); ++k) {
      target[k]->value += tau * (online[k]->value - target[k]->value);
    }
  }
}

ValidationStats validate_network(const PolicyNetwork& net, const SequenceBatch& batch,
                                 std::mt19937_64& rng) {
  Tape t;
  const int N = batch.T * batch.B;
  Features f = unroll(t, net, batch, false);
  ValidationStats v;
  const Matrix rhat = net.reward_head(t, ad::slice_rows(f.latent, 0, N), false).value();
  v.reward_mse = (rhat - batch.rewards).array().square().mean();

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix au(N, 2);
  for (Eigen::Index i = 0; i < au.size(); ++i) au.data()[i] = u(rng);
  auto qmin = [&](const Matrix& a) {
    Var av = t.constant(a);
    const Matrix q1 = net.critic(t, net.critics[0], f.F, av, false).value();
    const Matrix q2 = net.critic(t, net.critics[1], f.F, av, false).value();
    return q1.cwiseMin(q2).mean();
  };
  v.q_data = qmin(batch.actions);
  v.q_uniform = qmin(au);
  return v;
}

// ---- loop ----

TrainResult train(const Dataset& d, const TrainConfig& cfg, const EvalHook& eval,
                  const LogHook& on_log) {
  cfg.validate();
  const auto eps = d.episodes();
  if (eps.size() < 10) throw std::invalid_argument("training needs at least 10 episodes");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(eps.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(eps.size()));
  if (cfg.val_fraction > 0.0) n_val = std::max<std::size_t>(n_val, 1);
  std::vector<std::size_t> val_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_ids(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val_ids.begin(), val_ids.end());
  std::sort(train_ids.begin(), train_ids.end());
  const WindowSampler train_windows(d, train_ids, cfg.seq_len);
  const WindowSampler val_windows(d, val_ids, cfg.seq_len);

  TrainResult res{PolicyNetwork(cfg.dims, cfg.seed), {}, {}};
  PolicyNetwork& net = res.net;

  SequenceBatch val_batch;
  std::mt19937_64 val_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  if (val_windows.count() > 0) {
    std::vector<std::size_t> starts;
    const std::size_t n = std::min<std::size_t>(val_windows.count(), cfg.val_windows);
    for (std::size_t i = 0; i < n; ++i) starts.push_back(val_windows.sample(val_rng));
    val_batch = make_batch(d, starts, cfg.seq_len, net);
  }

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw std::runtime_error("cannot write " + cfg.metrics_path);
  }
  auto emit = [&](nlohmann::json j) {
    if (metrics.is_open()) metrics << j.dump() << '\n' << std::flush;
    if (on_log) on_log(j);
    res.log.push_back(std::move(j));
  };

  ad::Adam opt(net.all_params(), ad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<std::size_t> starts(static_cast<std::size_t>(cfg.batch));
  for (long step = 1; step <= cfg.steps; ++step) {
    for (auto& s : starts) s = train_windows.sample(rng);
    const SequenceBatch batch = make_batch(d, starts, cfg.seq_len, net);
    const LossNoise noise =
        LossNoise::draw(rng, batch.T * batch.B, cfg.n_uniform, cfg.n_policy);
    Tape tape;
    LossTerms L = compute_losses(tape, net, batch, cfg, noise);
    opt.zero_grad();
    try {
      tape.backward(L.total);
    } catch (const ad::GradientError& e) {
      throw std::runtime_error(fmt::format(
          "training diverged at step {}: {} (critic {}, conservative {}, actor {}, reg {})", step,
          e.what(), L.critic.scalar(), L.conservative.scalar(), L.actor.scalar(),
          L.reward_reg.scalar()));
    }
    opt.step();
    soft_update(net, cfg.tau);

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps)) {
      emit({{"step", step},
            {"critic", L.critic.scalar()},
            {"conservative", L.conservative.scalar()},
            {"actor", L.actor.scalar()},
            {"reward_reg", L.reward_reg.scalar()},
            {"q_data", L.q_data_mean},
            {"q_uniform", L.q_uniform_mean},
            {"target", L.target_mean},
            {"log_prob", L.log_prob_mean}});
    }
    if (eval && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      emit({{"step", step}, {"eval", eval(net, step)}});
    }
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        step % cfg.checkpoint_every == 0) {
      save_checkpoint(net, cfg.checkpoint_path);
    }
  }
  if (val_batch.B > 0) {
    std::mt19937_64 vr(cfg.seed + 17);
    res.validation = validate_network(net, val_batch, vr);
    emit({{"step", cfg.steps},
          {"validation",
           {{"reward_mse", res.validation.reward_mse},
            {"q_data", res.validation.q_data},
            {"q_uniform", res.validation.q_uniform}}}});
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(net, cfg.checkpoint_path);
  return res;
}

}  // namespace itrack
