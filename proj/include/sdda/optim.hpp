// SPDX-License-Identifier: Apache-2.0
//
// Bias-corrected Adam and the linear-decay learning-rate schedule
// (full rate through the decay-start epoch, then linear to zero).
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sdda/models.hpp"

namespace sdda::optim {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 1e-4;
  long step_count = 0;
  // First/second moment buffers, aligned with the parameter list order.
  std::vector<std::vector<double>> m, v;
};

inline AdamState make_adam_state(const models::ModelParams& params,
                                 double base_lr = 1e-4) {
  AdamState s;
  s.base_lr = base_lr;
  s.m.reserve(params.entries.size());
  s.v.reserve(params.entries.size());
  for (const auto& [name, t] : params.entries) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

// In-place Adam update. Gradients are read, never modified; the caller resets
// them between steps.
inline void adam_step(models::ModelParams& params, AdamState& state,
                      double lr) {
  if (lr < 0.0) throw Error("adam_step: negative learning rate");
  if (state.m.size() != params.entries.size()) {
    throw Error("adam_step: state does not match parameter list");
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);
  for (size_t p = 0; p < params.entries.size(); ++p) {
    auto& [name, t] = params.entries[p];
    if (!t.has_grad()) {
      throw Error("adam_step: missing gradient for parameter '" + name + "'");
    }
    const auto g = t.grad();
    auto w = t.value_mut();
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != w.size()) {
      throw Error("adam_step: moment shape mismatch for '" + name + "'");
    }
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

struct LrSchedule {
  int total_epochs = 400;
  double decay_start_fraction = 0.375;  // 150/400
};

inline void check_schedule(const LrSchedule& s) {
  if (s.total_epochs <= 0) throw Error("lr schedule: total_epochs must be > 0");
  if (!(s.decay_start_fraction > 0.0 && s.decay_start_fraction < 1.0)) {
    throw Error("lr schedule: decay_start_fraction must be in (0, 1)");
  }
}

// base_lr through the decay-start epoch, then linear interpolation to zero at
// total_epochs.
inline double lr_at(const LrSchedule& s, int epoch, double base_lr) {
  check_schedule(s);
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                std::to_string(s.total_epochs) + ")");
  }
  const double decay_start = s.decay_start_fraction * s.total_epochs;
  if (epoch <= decay_start) return base_lr;
  return base_lr * (s.total_epochs - epoch) /
         (s.total_epochs - decay_start);
}

}  // namespace sdda::optim
