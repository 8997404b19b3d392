#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebtl/tensor.hpp"

namespace ebtl::energy {

using nn::Tape;
using nn::Tensor;

struct EnergyGateConfig {
  double temperature = 1.0;
  double quantile = 0.5;
  double m_in = 10.0;
  double m_out = 15.0;
  double lambda = 0.1;

  void validate() const {
    EBTL_REQUIRE(temperature > 0.0, "EnergyGateConfig: temperature must be positive");
    EBTL_REQUIRE(quantile >= 0.0 && quantile <= 1.0, "EnergyGateConfig: quantile outside [0,1]");
    EBTL_REQUIRE(lambda >= 0.0, "EnergyGateConfig: lambda must be non-negative");
  }
};

enum class Origin { TeacherTrain, TargetRollout, OODTrainSet };

inline const char* to_string(Origin o) {
  switch (o) {
    case Origin::TeacherTrain: return "TeacherTrain";
    case Origin::TargetRollout: return "TargetRollout";
    case Origin::OODTrainSet: return "OODTrainSet";
  }
  return "?";
}

struct ScoreSample {
  long step = 0;
  Origin origin = Origin::TargetRollout;
  double phi = 0.0;
  std::optional<bool> ground_truth_id;
};

// Free energy E(x; f) = -T log sum_i exp(f_i / T), via stabilized
// log-sum-exp.
inline double free_energy(std::span<const double> logits, double temperature) {
  EBTL_REQUIRE(!logits.empty(), "free_energy: need at least one logit");
  EBTL_REQUIRE(temperature > 0.0, "free_energy: temperature must be positive, got ", temperature);
  double mx = logits[0] / temperature;
  for (double f : logits) {
    EBTL_REQUIRE(std::isfinite(f), "free_energy: non-finite logit ", f);
    mx = std::max(mx, f / temperature);
  }
  double s = 0.0;
  for (double f : logits) s += std::exp(f / temperature - mx);
  return -temperature * (mx + std::log(s));
}

// Energy score phi = -E; higher means more in-distribution.
inline double energy_score(std::span<const double> logits, double temperature) {
  return -free_energy(logits, temperature);
}

// phi for each row of a logits matrix, on the tape (used by the
// regularization loss).
inline Tensor energy_scores(Tape& tape, const Tensor& logits, double temperature) {
  EBTL_REQUIRE(temperature > 0.0, "energy_scores: temperature must be positive");
  return tape.scale(tape.log_sum_exp(tape.scale(logits, 1.0 / temperature)), temperature);
}

// Empirical q-quantile with linear interpolation at index q*(n-1).
inline double calibrate_threshold(std::vector<double> scores, double q) {
  EBTL_REQUIRE(!scores.empty(), "calibrate_threshold: empty score set");
  EBTL_REQUIRE(q >= 0.0 && q <= 1.0, "calibrate_threshold: q outside [0,1], got ", q);
  std::sort(scores.begin(), scores.end());
  const double pos = q * static_cast<double>(scores.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= scores.size()) return scores.back();
  const double frac = pos - static_cast<double>(lo);
  return scores[lo] + frac * (scores[lo + 1] - scores[lo]);
}

// Squared hinge margins: pulls ID scores above m_in and OOD scores below
// m_out. Both inputs are phi batches on the tape.
inline Tensor energy_reg_loss(Tape& tape, const Tensor& phi_in, const Tensor& phi_out,
                              double m_in, double m_out) {
  EBTL_REQUIRE(phi_in.numel() > 0 && phi_out.numel() > 0,
               "energy_reg_loss: both batches must be non-empty");
  auto in_term = tape.mean(tape.square(tape.relu(tape.negate(tape.shift(phi_in, -m_in)))));
  auto out_term = tape.mean(tape.square(tape.relu(tape.shift(phi_out, -m_out))));
  return tape.add(in_term, out_term);
}

// ---- distribution diagnostics ----

enum class DivergenceKind { KL, JS, TV, Hellinger };

inline const char* to_string(DivergenceKind k) {
  switch (k) {
    case DivergenceKind::KL: return "KL";
    case DivergenceKind::JS: return "JS";
    case DivergenceKind::TV: return "TV";
    case DivergenceKind::Hellinger: return "Hellinger";
  }
  return "?";
}

// Normalized histogram over a fixed uniform binning.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> mass;

  bool same_binning(const Histogram& other) const {
    return lo == other.lo && hi == other.hi && mass.size() == other.mass.size();
  }
};

inline Histogram make_histogram(std::span<const double> values, double lo, double hi,
                                std::size_t bins) {
  EBTL_REQUIRE(bins > 0, "make_histogram: need at least one bin");
  EBTL_REQUIRE(hi > lo, "make_histogram: hi must exceed lo");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.mass.assign(bins, 0.0);
  if (values.empty()) return h;
  const double w = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    auto idx = static_cast<long>((v - lo) / w);
    idx = std::clamp<long>(idx, 0, static_cast<long>(bins) - 1);
    h.mass[static_cast<std::size_t>(idx)] += 1.0;
  }
  for (auto& m : h.mass) m /= static_cast<double>(values.size());
  return h;
}

namespace detail {

inline double kl_smoothed(const std::vector<double>& p, const std::vector<double>& q) {
  // Additive smoothing keeps the ratio finite on empty bins.
  constexpr double eps = 1e-10;
  double zp = 0.0, zq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    zp += p[i] + eps;
    zq += q[i] + eps;
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = (p[i] + eps) / zp;
    const double qi = (q[i] + eps) / zq;
    kl += pi * std::log(pi / qi);
  }
  return kl;
}

inline double kl_strict(const std::vector<double>& p, const std::vector<double>& q) {
  // 0 log 0 = 0; q may be zero only where p is zero (used inside JS).
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

}  // namespace detail

// Standard definitions in nats. JS is symmetric in [0, log 2]; TV and
// Hellinger live in [0, 1].
inline double divergence(const Histogram& p, const Histogram& q, DivergenceKind kind) {
  EBTL_REQUIRE(p.same_binning(q), "divergence: histograms use different binnings");
  double check_p = 0.0, check_q = 0.0;
  for (double m : p.mass) check_p += m;
  for (double m : q.mass) check_q += m;
  EBTL_REQUIRE(std::abs(check_p - 1.0) < 1e-6 && std::abs(check_q - 1.0) < 1e-6,
               "divergence: histograms must be normalized to sum 1");
  switch (kind) {
    case DivergenceKind::KL:
      return detail::kl_smoothed(p.mass, q.mass);
    case DivergenceKind::JS: {
      std::vector<double> m(p.mass.size());
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (p.mass[i] + q.mass[i]);
      return 0.5 * detail::kl_strict(p.mass, m) + 0.5 * detail::kl_strict(q.mass, m);
    }
    case DivergenceKind::TV: {
      double tv = 0.0;
      for (std::size_t i = 0; i < p.mass.size(); ++i) tv += std::abs(p.mass[i] - q.mass[i]);
      return 0.5 * tv;
    }
    case DivergenceKind::Hellinger: {
      double acc = 0.0;
      for (std::size_t i = 0; i < p.mass.size(); ++i) {
        const double d = std::sqrt(p.mass[i]) - std::sqrt(q.mass[i]);
        acc += d * d;
      }
      return std::sqrt(0.5 * acc);
    }
  }
  return 0.0;
}

}  // namespace ebtl::energy
