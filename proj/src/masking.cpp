#include "imask/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "imask/errors.hpp"

namespace imask {

ActionSpace::ActionSpace(std::size_t image_side, std::size_t k, std::size_t patch_side)
    : side_(image_side), k_(k), patch_(patch_side) {
  if (k == 0 || patch_side == 0 || patch_side > image_side) {
    throw std::invalid_argument("action space needs k >= 1 and 0 < patch_side <= image_side");
  }
  if (k == 1 && patch_side != image_side) {
    throw std::invalid_argument("a single action must cover the whole image");
  }
  if (k > 1) {
    const std::size_t span = image_side - patch_side;
    const std::size_t max_gap = (span + k - 2) / (k - 1);  // ceil(span / (k - 1))
    if (max_gap > patch_side) {
      throw std::invalid_argument("patches of side " + std::to_string(patch_side) +
                                  " on a " + std::to_string(k) + "x" + std::to_string(k) +
                                  " grid leave gaps in a " + std::to_string(image_side) +
                                  " pixel image");
    }
  }
}

std::size_t ActionSpace::default_patch_side(std::size_t image_side, std::size_t k) {
  return (2 * image_side + k) / (k + 1);
}

ActionSpace ActionSpace::with_default_patch(std::size_t image_side, std::size_t k) {
  return ActionSpace(image_side, k, default_patch_side(image_side, k));
}

Anchor ActionSpace::anchor(std::size_t action) const {
  if (action >= size()) {
    throw std::out_of_range("action " + std::to_string(action) + " outside [0, " +
                            std::to_string(size()) + ")");
  }
  auto pos = [&](std::size_t i) { return k_ == 1 ? 0 : i * (side_ - patch_) / (k_ - 1); };
  return {pos(action / k_), pos(action % k_)};
}

bool ActionSpace::contains(std::size_t action, double row, double col) const {
  const Anchor a = anchor(action);
  const auto r0 = static_cast<double>(a.row), c0 = static_cast<double>(a.col);
  const auto p = static_cast<double>(patch_);
  return row >= r0 && row < r0 + p && col >= c0 && col < c0 + p;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

BinaryMask action_to_mask(const ActionSpace& space, std::size_t action) {
  const Anchor a = space.anchor(action);
  BinaryMask m{space.image_side(), std::vector<std::uint8_t>(space.image_side() * space.image_side(), 0)};
  for (std::size_t r = a.row; r < a.row + space.patch_side(); ++r)
    for (std::size_t c = a.col; c < a.col + space.patch_side(); ++c) m.bits[r * m.side + c] = 1;
  return m;
}

namespace {

void check_mask_shape(const Shape& shape, const BinaryMask& mask) {
  if (shape.size() < 2 || shape[shape.size() - 1] != mask.side ||
      shape[shape.size() - 2] != mask.side) {
    throw DimensionError("mask of side " + std::to_string(mask.side) +
                         " does not match tensor " + shape_to_string(shape));
  }
}

}  // namespace

Tensor apply_mask(const Tensor& x, const BinaryMask& mask, double fill) {
  check_mask_shape(x.shape(), mask);
  Tensor out = x.detach();
  const std::size_t plane = mask.side * mask.side;
  auto d = out.data();
  for (std::size_t base = 0; base < d.size(); base += plane)
    for (std::size_t p = 0; p < plane; ++p)
      if (mask.bits[p]) d[base + p] = fill;
  return out;
}

Tensor mask_tensor(const BinaryMask& mask, const Shape& shape) {
  check_mask_shape(shape, mask);
  Tensor out(shape);
  const std::size_t plane = mask.side * mask.side;
  auto d = out.data();
  for (std::size_t base = 0; base < d.size(); base += plane)
    for (std::size_t p = 0; p < plane; ++p) d[base + p] = mask.bits[p];
  return out;
}

double prediction_loss(const Tensor& reconstruction, const Tensor& original,
                       const BinaryMask& mask) {
  if (reconstruction.shape() != original.shape()) {
    throw DimensionError("prediction_loss: shape mismatch " +
                         shape_to_string(reconstruction.shape()) + " vs " +
                         shape_to_string(original.shape()));
  }
  check_mask_shape(original.shape(), mask);
  if (mask.count() == 0) {
    throw std::invalid_argument("prediction_loss: empty mask (normalization undefined)");
  }
  const std::size_t plane = mask.side * mask.side;
  double s = 0.0, n = 0.0;
  for (std::size_t base = 0; base < original.numel(); base += plane)
    for (std::size_t p = 0; p < plane; ++p)
      if (mask.bits[p]) {
        const double d = original[base + p] - reconstruction[base + p];
        s += d * d;
        n += 1.0;
      }
  return s / n;
}

std::vector<double> action_probabilities(std::span<const double> scores, double temperature) {
  if (scores.empty()) throw std::invalid_argument("no action scores");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("softmax temperature must be positive");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("NaN action score");
  }
  std::vector<double> p(scores.size());
  if (std::isinf(temperature)) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
    return p;
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((scores[i] - mx) / temperature);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::size_t select_action(std::span<const double> scores, ActionSelection how, Rng& rng) {
  if (how.kind == ActionSelection::Kind::kGreedy) {
    if (scores.empty()) throw std::invalid_argument("no action scores");
    std::size_t best = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (std::isnan(scores[i])) throw std::invalid_argument("NaN action score");
      if (scores[i] > scores[best]) best = i;
    }
    return best;
  }
  const std::vector<double> p = action_probabilities(scores, how.temperature);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

double masking_loss(double q_pred, double target) {
  if (!std::isfinite(q_pred) || !std::isfinite(target)) {
    throw std::invalid_argument("masking_loss: non-finite input");
  }
  const double d = q_pred - target;
  return d * d;
}

Tensor masking_objective(Tape& tape, const Tensor& q_scores, const EpisodeBatch& episodes,
                         double factor) {
  std::vector<int> actions;
  std::vector<double> targets;
  actions.reserve(episodes.size());
  targets.reserve(episodes.size());
  for (const Episode& e : episodes) {
    if (!std::isfinite(e.pred_loss) || e.pred_loss < 0.0) {
      throw std::invalid_argument("masking target must be finite and non-negative");
    }
    actions.push_back(static_cast<int>(e.action));
    targets.push_back(e.pred_loss);
  }
  Tensor q_taken = gather_rows(tape, q_scores, actions);
  return squared_error_mean(tape, q_taken, targets, factor);
}

}  // namespace imask
