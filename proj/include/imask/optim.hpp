#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "imask/tensor.hpp"

namespace imask {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter list, in list order.
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

AdamState make_adam_state(std::span<const Tensor> params, AdamHyper hyper = {});

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// Throws AutodiffError (before touching anything) on a non-finite gradient.
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

// Plain gradient descent: p <- p - lr * grad.
void sgd_step(std::span<Tensor> params, double lr);

void zero_grads(std::span<Tensor> params);

/// Multi-step decay: the rate is multiplied by decay_factor at epoch
/// floor(total/3) and again at floor(2*total/3).
struct LrSchedule {
  double base_lr = 1e-4;
  int total_epochs = 1;
  double decay_factor = 0.3;

  std::array<int, 2> milestones() const { return {total_epochs / 3, 2 * total_epochs / 3}; }
};

double lr_at(const LrSchedule& schedule, int epoch);

}  // namespace imask
