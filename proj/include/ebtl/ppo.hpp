#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "ebtl/adam.hpp"
#include "ebtl/policy.hpp"
#include "ebtl/rng.hpp"
#include "ebtl/tensor.hpp"

namespace ebtl::ppo {

using nn::Tape;
using nn::Tensor;

// Defaults follow the gridworld hyperparameter table; overcooked presets
// are provided by the config layer.
struct PPOConfig {
  double lr = 5e-4;
  double gamma = 0.9;
  double gae_lambda = 0.8;
  double clip_eps = 0.2;
  double vf_clip = 10.0;
  double vf_coeff = 0.5;
  double entropy_coeff = 0.01;
  int train_batch = 256;
  int minibatch = 128;
  int sgd_iters = 4;
  int n_envs = 8;
  bool normalize_advantage = false;

  void validate() const {
    EBTL_REQUIRE(lr > 0, "PPOConfig: lr must be positive");
    EBTL_REQUIRE(gamma >= 0 && gamma < 1, "PPOConfig: gamma must be in [0,1)");
    EBTL_REQUIRE(gae_lambda >= 0 && gae_lambda <= 1, "PPOConfig: gae_lambda must be in [0,1]");
    EBTL_REQUIRE(clip_eps > 0, "PPOConfig: clip_eps must be positive");
    EBTL_REQUIRE(train_batch > 0 && minibatch > 0 && sgd_iters > 0 && n_envs > 0,
                 "PPOConfig: batch sizes and iteration counts must be positive");
    EBTL_REQUIRE(train_batch % minibatch == 0, "PPOConfig: minibatch (", minibatch,
                 ") must divide train_batch (", train_batch, ")");
    EBTL_REQUIRE(train_batch % n_envs == 0, "PPOConfig: n_envs (", n_envs,
                 ") must divide train_batch (", train_batch, ")");
  }
};

// One environment step as recorded during collection. `behavior_log_prob`
// is the log-probability the behavior policy (student snapshot, or teacher
// when teacher_flag is set) assigned to `action`.
struct Transition {
  std::vector<double> obs;
  int action = 0;
  double reward = 0.0;
  std::vector<double> next_obs;
  bool done = false;
  double behavior_log_prob = 0.0;
  bool teacher_flag = false;                    // alpha_t
  std::optional<double> teacher_log_prob;       // present iff teacher_flag
  bool ground_truth_id = true;
  std::vector<std::uint8_t> mask;
  double value = 0.0;                           // V(s_t) at collection time
  std::vector<double> teacher_probs;            // distillation targets (KSRL only)
};

struct RolloutBatch {
  struct Segment {
    std::size_t begin = 0;
    std::size_t length = 0;
    double bootstrap_value = 0.0;  // V(s_T) of the state after the last step
  };

  std::vector<Transition> transitions;  // per-env segments, concatenated in env order
  std::vector<Segment> segments;
  std::vector<double> advantages;
  std::vector<double> value_targets;
};

// delta_t = r_t + gamma*V(s_{t+1})*(1-done_t) - V(s_t)
// A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1}, targets = A_t + V(s_t).
inline std::pair<std::vector<double>, std::vector<double>> compute_gae(
    const std::vector<double>& rewards, const std::vector<double>& values,
    const std::vector<std::uint8_t>& dones, double bootstrap_value, double gamma,
    double gae_lambda) {
  EBTL_REQUIRE(rewards.size() == values.size() && rewards.size() == dones.size(),
               "compute_gae: rewards/values/dones lengths differ");
  const std::size_t n = rewards.size();
  std::vector<double> adv(n, 0.0), targets(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double not_done = dones[i] ? 0.0 : 1.0;
    const double next_value = (i + 1 < n) ? values[i + 1] : bootstrap_value;
    const double delta = rewards[i] + gamma * next_value * not_done - values[i];
    next_adv = delta + gamma * gae_lambda * not_done * next_adv;
    adv[i] = next_adv;
    targets[i] = adv[i] + values[i];
  }
  return {std::move(adv), std::move(targets)};
}

inline void finalize_gae(RolloutBatch& batch, double gamma, double gae_lambda) {
  batch.advantages.assign(batch.transitions.size(), 0.0);
  batch.value_targets.assign(batch.transitions.size(), 0.0);
  for (const auto& seg : batch.segments) {
    std::vector<double> rewards(seg.length), values(seg.length);
    std::vector<std::uint8_t> dones(seg.length);
    for (std::size_t i = 0; i < seg.length; ++i) {
      const auto& t = batch.transitions[seg.begin + i];
      rewards[i] = t.reward;
      values[i] = t.value;
      dones[i] = t.done ? 1 : 0;
    }
    auto [adv, targets] = compute_gae(rewards, values, dones, seg.bootstrap_value, gamma,
                                      gae_lambda);
    for (std::size_t i = 0; i < seg.length; ++i) {
      batch.advantages[seg.begin + i] = adv[i];
      batch.value_targets[seg.begin + i] = targets[i];
    }
    for (double a : adv)
      EBTL_REQUIRE(std::isfinite(a), "finalize_gae: non-finite advantage");
  }
}

// Mixed-policy ratio r_t under the current student log-prob. The teacher
// branch divides by the teacher's (frozen) probability.
inline double importance_ratio(const Transition& t, double current_log_prob) {
  if (t.teacher_flag) {
    EBTL_REQUIRE(t.teacher_log_prob.has_value(),
                 "importance_ratio: teacher-sampled transition lacks teacher_log_prob");
    return std::exp(current_log_prob - *t.teacher_log_prob);
  }
  return std::exp(current_log_prob - t.behavior_log_prob);
}

// min(r*A, clip(r, 1-eps, 1+eps)*A) for one sample.
inline double clipped_surrogate(double ratio, double advantage, double clip_eps) {
  const double clipped = std::min(std::max(ratio, 1.0 - clip_eps), 1.0 + clip_eps);
  return std::min(ratio * advantage, clipped * advantage);
}

struct LossParts {
  double actor = 0.0;    // -mean clipped surrogate (excludes entropy bonus)
  double value = 0.0;    // ratio-weighted clipped squared error
  double entropy = 0.0;  // mean policy entropy
  double aux = 0.0;      // energy regularization or distillation, already weighted
  double total = 0.0;
};

// Extra loss term built inside the minibatch graph (energy regularization
// during teacher training, distillation for kickstarting). Receives the
// minibatch's policy output and the transition indices it was built from;
// returns an already-weighted scalar on the tape.
using AuxLossFn = std::function<Tensor(Tape&, const policy::BoundParams&,
                                       const policy::PolicyOutput&,
                                       const std::vector<std::size_t>&)>;

inline constexpr double kRatioCap = 1e4;

// One PPO update: sgd_iters epochs of shuffled minibatches over the batch.
// Behavior log-probs stay frozen at their collection-time values.
inline LossParts ppo_update(policy::ActorCriticParams& params, nn::AdamState& adam,
                            const RolloutBatch& batch, const PPOConfig& cfg, Rng& shuffle_rng,
                            const AuxLossFn& aux = nullptr,
                            const std::set<std::string>& frozen = {}) {
  cfg.validate();
  const std::size_t n = batch.transitions.size();
  EBTL_REQUIRE(n == static_cast<std::size_t>(cfg.train_batch), "ppo_update: batch holds ", n,
               " transitions, config expects ", cfg.train_batch);
  EBTL_REQUIRE(batch.advantages.size() == n && batch.value_targets.size() == n,
               "ppo_update: advantages not computed; call finalize_gae first");
  const std::size_t obs_dim = batch.transitions.front().obs.size();
  const std::size_t k = batch.transitions.front().mask.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  LossParts acc;
  std::size_t n_minibatches = 0;
  Tape tape;
  for (int iter = 0; iter < cfg.sgd_iters; ++iter) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.minibatch) {
      const std::size_t b = cfg.minibatch;
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + start + b);

      std::vector<double> obs_flat(b * obs_dim);
      std::vector<std::uint8_t> masks(b * k);
      std::vector<std::size_t> actions(b);
      std::vector<double> behavior(b), adv(b), targets(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& t = batch.transitions[idx[i]];
        std::copy(t.obs.begin(), t.obs.end(), obs_flat.begin() + i * obs_dim);
        std::copy(t.mask.begin(), t.mask.end(), masks.begin() + i * k);
        actions[i] = static_cast<std::size_t>(t.action);
        behavior[i] = t.teacher_flag ? *t.teacher_log_prob : t.behavior_log_prob;
        adv[i] = batch.advantages[idx[i]];
        targets[i] = batch.value_targets[idx[i]];
      }
      if (cfg.normalize_advantage) {
        double mean = 0.0;
        for (double a : adv) mean += a;
        mean /= static_cast<double>(b);
        double var = 0.0;
        for (double a : adv) var += (a - mean) * (a - mean);
        const double sd = std::sqrt(var / static_cast<double>(b)) + 1e-8;
        for (double& a : adv) a = (a - mean) / sd;
      }

      tape.clear();
      auto bound = policy::bind(tape, params);
      auto out = policy::forward(tape, bound, Tensor::matrix(b, obs_dim, std::move(obs_flat)),
                                 masks);
      auto cur_lp = tape.gather(out.masked_log_probs, actions);
      auto ratio = tape.clip(
          tape.exponent(tape.subtract(cur_lp, Tensor::row(std::move(behavior)))), 0.0, kRatioCap);
      auto adv_t = Tensor::row(std::move(adv));
      auto surr = tape.minimum(tape.multiply(ratio, adv_t),
                               tape.multiply(tape.clip(ratio, 1.0 - cfg.clip_eps,
                                                       1.0 + cfg.clip_eps),
                                             adv_t));
      auto neg_surrogate = tape.negate(tape.mean(surr));
      auto ent = policy::entropy_mean(tape, out.masked_log_probs);
      auto actor = tape.subtract(neg_surrogate, tape.scale(ent, cfg.entropy_coeff));

      // The ratio weights the value regression but is not differentiated
      // through it; reuse the forward values as constants.
      auto ratio_const = Tensor::row(std::vector<double>(ratio.data()));
      auto verr2 = tape.clip(tape.square(tape.subtract(out.value, Tensor::row(std::move(targets)))),
                             0.0, cfg.vf_clip);
      auto vloss = tape.mean(tape.multiply(ratio_const, verr2));

      auto total = tape.add(actor, tape.scale(vloss, cfg.vf_coeff));
      double aux_value = 0.0;
      if (aux) {
        auto aux_t = aux(tape, bound, out, idx);
        aux_value = aux_t.value();
        total = tape.add(total, aux_t);
      }
      EBTL_REQUIRE(std::isfinite(total.value()),
                   "ppo_update: non-finite loss (surrogate=", neg_surrogate.value(),
                   ", value=", vloss.value(), ", entropy=", ent.value(), ", aux=", aux_value,
                   ")");

      auto grads = tape.backward(total);
      nn::GradByName by_name;
      for (const auto& [name, leaf] : bound.leaves) by_name.emplace(name, grads.at(leaf.node()));
      adam_step(params.tensors, by_name, adam, cfg.lr, frozen);

      acc.actor += neg_surrogate.value();
      acc.value += vloss.value();
      acc.entropy += ent.value();
      acc.aux += aux_value;
      acc.total += total.value();
      ++n_minibatches;
    }
  }
  const double inv = 1.0 / static_cast<double>(n_minibatches);
  acc.actor *= inv;
  acc.value *= inv;
  acc.entropy *= inv;
  acc.aux *= inv;
  acc.total *= inv;
  return acc;
}

}  // namespace ebtl::ppo
