#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>

#include "ebtl/energy.hpp"
#include "ebtl/policy.hpp"
#include "ebtl/rng.hpp"

namespace ebtl::transfer {

using nn::Tape;
using nn::Tensor;

enum class Strategy { NoTransfer, EBTL, AA, FineTune, KSRL, JSRL };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::NoTransfer: return "NoTransfer";
    case Strategy::EBTL: return "EBTL";
    case Strategy::AA: return "AA";
    case Strategy::FineTune: return "FineTune";
    case Strategy::KSRL: return "KSRL";
    case Strategy::JSRL: return "JSRL";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "NoTransfer") return Strategy::NoTransfer;
  if (s == "EBTL") return Strategy::EBTL;
  if (s == "AA") return Strategy::AA;
  if (s == "FineTune") return Strategy::FineTune;
  if (s == "KSRL") return Strategy::KSRL;
  if (s == "JSRL") return Strategy::JSRL;
  throw ConfigError("unknown strategy '" + s + "'");
}

struct TransferConfig {
  Strategy strategy = Strategy::NoTransfer;
  double delta0 = 1.0;              // initial guidance probability
  double decay_end_fraction = 0.5;  // delta reaches 0 at this fraction of the run
  double q = 0.5;                   // EBTL threshold quantile
  double h0 = -1;                   // JSRL initial prefix; -1 means env max_steps
  double distill_weight = 1.0;      // KSRL initial cross-entropy weight
  bool freeze_encoder = true;       // FineTune

  void validate() const {
    EBTL_REQUIRE(delta0 >= 0.0 && delta0 <= 1.0, "TransferConfig: delta0 outside [0,1]");
    EBTL_REQUIRE(decay_end_fraction > 0.0 && decay_end_fraction <= 1.0,
                 "TransferConfig: decay_end_fraction outside (0,1]");
    EBTL_REQUIRE(q >= 0.0 && q <= 1.0, "TransferConfig: q outside [0,1]");
    EBTL_REQUIRE(distill_weight >= 0.0, "TransferConfig: distill_weight must be non-negative");
  }

  double kappa(long total_steps) const {
    return delta0 / (decay_end_fraction * static_cast<double>(total_steps));
  }
};

// delta(t) = max(0, delta0 - kappa * t)
inline double decay(long t, double delta0, double kappa) {
  EBTL_REQUIRE(t >= 0, "decay: t must be non-negative");
  const double v = delta0 - kappa * static_cast<double>(t);
  return v > 0.0 ? v : 0.0;
}

// Linear decay to zero at `horizon` of an arbitrary initial value.
inline double linear_to_zero(long t, double initial, long horizon) {
  EBTL_REQUIRE(horizon > 0, "linear_to_zero: horizon must be positive");
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(horizon);
  return frac > 0.0 ? initial * frac : 0.0;
}

struct SelectionResult {
  int action = 0;
  bool teacher = false;  // alpha_t
  double behavior_log_prob = 0.0;
  std::optional<double> teacher_log_prob;  // present iff teacher
  std::optional<double> phi;               // energy score, when computed
};

// Energy-gated selection: the teacher acts iff phi(s) >= tau and the decay
// coin permits; every other state falls to the student.
inline SelectionResult ebtl_select(const policy::PolicyOutput& teacher_out,
                                   const policy::PolicyOutput& student_out, std::size_t row,
                                   double tau, double delta_t, double temperature, Rng& rng) {
  const std::size_t k = teacher_out.logits.dim(1);
  const auto& logits = teacher_out.logits.data();
  const double phi = energy::energy_score(
      std::span<const double>(logits.data() + row * k, k), temperature);
  const double p = rng.uniform();
  SelectionResult res;
  res.phi = phi;
  if (phi >= tau && p < delta_t) {
    auto [action, lp] = policy::sample_action(teacher_out, row, rng);
    res.action = action;
    res.teacher = true;
    res.behavior_log_prob = lp;
    res.teacher_log_prob = lp;
  } else {
    auto [action, lp] = policy::sample_action(student_out, row, rng);
    res.action = action;
    res.behavior_log_prob = lp;
  }
  return res;
}

// Action advising: teacher acts whenever the decay coin permits,
// regardless of familiarity.
inline SelectionResult aa_select(const policy::PolicyOutput& teacher_out,
                                 const policy::PolicyOutput& student_out, std::size_t row,
                                 double delta_t, Rng& rng) {
  const double p = rng.uniform();
  SelectionResult res;
  if (p < delta_t) {
    auto [action, lp] = policy::sample_action(teacher_out, row, rng);
    res.action = action;
    res.teacher = true;
    res.behavior_log_prob = lp;
    res.teacher_log_prob = lp;
  } else {
    auto [action, lp] = policy::sample_action(student_out, row, rng);
    res.action = action;
    res.behavior_log_prob = lp;
  }
  return res;
}

// Jump-start: teacher acts during the episode prefix only.
inline SelectionResult jsrl_select(const policy::PolicyOutput& teacher_out,
                                   const policy::PolicyOutput& student_out, std::size_t row,
                                   int episode_step, double h_t, Rng& rng) {
  SelectionResult res;
  if (static_cast<double>(episode_step) < h_t) {
    auto [action, lp] = policy::sample_action(teacher_out, row, rng);
    res.action = action;
    res.teacher = true;
    res.behavior_log_prob = lp;
    res.teacher_log_prob = lp;
  } else {
    auto [action, lp] = policy::sample_action(student_out, row, rng);
    res.action = action;
    res.behavior_log_prob = lp;
  }
  return res;
}

// Kickstarting distillation: weight * mean_t[ -sum_a pi_T(a|s) log pi_S(a|s) ].
// All actions still come from the student.
inline Tensor ksrl_aux_loss(Tape& tape, const Tensor& student_log_probs,
                            const Tensor& teacher_probs, double weight) {
  EBTL_REQUIRE_SHAPE(student_log_probs.shape() == teacher_probs.shape(),
                     "ksrl_aux_loss: distribution shapes differ: ",
                     fmt_shape(student_log_probs.shape()), " vs ",
                     fmt_shape(teacher_probs.shape()));
  auto ce = tape.negate(tape.mean(tape.sum_rows(tape.multiply(teacher_probs, student_log_probs))));
  return tape.scale(ce, weight);
}

// Fine-tuning: student starts from the teacher weights; encoder layers are
// optionally frozen (their gradients never reach the optimizer).
inline std::pair<policy::ActorCriticParams, std::set<std::string>> finetune_init(
    const policy::Checkpoint& teacher, bool freeze_encoder) {
  policy::ActorCriticParams student = teacher.params;
  std::set<std::string> frozen;
  if (freeze_encoder) frozen = policy::encoder_param_names(student.arch);
  return {std::move(student), std::move(frozen)};
}

// Per-step guidance record; one row per advising-eligible step.
struct GuidanceEvent {
  long global_step = 0;
  int episode_step = 0;
  double phi = std::numeric_limits<double>::quiet_NaN();
  double tau = std::numeric_limits<double>::quiet_NaN();
  bool issued = false;
  bool ground_truth_id = true;
};

}  // namespace ebtl::transfer
