#include "imask/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "imask/errors.hpp"

namespace imask {

AdamState make_adam_state(std::span<const Tensor> params, AdamHyper hyper) {
  AdamState s;
  s.hyper = hyper;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be positive");
  if (params.size() != state.m.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != state.m[i].size()) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " changed shape");
    }
    if (!params[i].has_grad()) continue;
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw AutodiffError("adam_step: non-finite gradient in parameter " + std::to_string(i));
      }
    }
  }

  state.t += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    const bool has = params[i].has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = has ? params[i].grad()[j] : 0.0;
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

void sgd_step(std::span<Tensor> params, double lr) {
  for (Tensor& t : params) {
    if (!t.has_grad()) continue;
    auto p = t.data();
    auto g = t.grad();
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& t : params) t.zero_grad();
}

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0 || epoch >= schedule.total_epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(schedule.total_epochs) + ")");
  }
  double lr = schedule.base_lr;
  for (int milestone : schedule.milestones()) {
    if (epoch >= milestone) lr *= schedule.decay_factor;
  }
  return lr;
}

}  // namespace imask
