#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ebtl/tensor.hpp"

namespace ebtl::nn {

using ParamMap = std::map<std::string, Tensor>;
using GradByName = std::map<std::string, Tensor>;

struct AdamState {
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a named parameter map. Parameters listed in
// `frozen` are left bitwise untouched (no moment update either).
inline void adam_step(ParamMap& params, const GradByName& grads, AdamState& state, double lr,
                      const std::set<std::string>& frozen = {}) {
  EBTL_REQUIRE(lr > 0.0, "adam_step: lr must be positive, got ", lr);
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, param] : params) {
    if (frozen.count(name)) continue;
    auto git = grads.find(name);
    EBTL_REQUIRE(git != grads.end(), "adam_step: missing gradient for parameter '", name, "'");
    const Tensor& g = git->second;
    EBTL_REQUIRE_SHAPE(g.numel() == param.numel(), "adam_step: gradient shape ",
                       fmt_shape(g.shape()), " does not match parameter '", name, "' shape ",
                       fmt_shape(param.shape()));
    EBTL_REQUIRE(all_finite(g.data()), "adam_step: non-finite gradient for parameter '", name,
                 "'");
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) m.assign(param.numel(), 0.0);
    if (v.empty()) v.assign(param.numel(), 0.0);
    EBTL_REQUIRE_SHAPE(m.size() == param.numel() && v.size() == param.numel(),
                       "adam_step: moment size does not match parameter '", name, "'");
    std::vector<double> next(param.data());
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double gi = g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      next[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    param = Tensor(param.shape(), std::move(next));
  }
}

}  // namespace ebtl::nn
