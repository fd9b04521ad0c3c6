#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "imask/ops.hpp"
#include "imask/rng.hpp"
#include "imask/tensor.hpp"

namespace imask {

struct Anchor {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// The k x k grid of candidate square patches. Anchors along each axis are
/// floor(i * (side - patch) / (k - 1)), so the first patch touches the top-left
/// corner, the last touches the bottom-right, and adjacent patches overlap when
/// patch_side exceeds the spacing. Action a maps to anchor (a / k, a % k).
class ActionSpace {
 public:
  ActionSpace(std::size_t image_side, std::size_t k, std::size_t patch_side);

  // patch_side = ceil(2 * side / (k + 1)).
  static ActionSpace with_default_patch(std::size_t image_side, std::size_t k);
  static std::size_t default_patch_side(std::size_t image_side, std::size_t k);

  std::size_t k() const { return k_; }
  std::size_t size() const { return k_ * k_; }
  std::size_t patch_side() const { return patch_; }
  std::size_t image_side() const { return side_; }
  Anchor anchor(std::size_t action) const;
  bool contains(std::size_t action, double row, double col) const;

 private:
  std::size_t side_;
  std::size_t k_;
  std::size_t patch_;
};

/// Image-shaped {0,1} mask; 1 marks occluded pixels.
struct BinaryMask {
  std::size_t side = 0;
  std::vector<std::uint8_t> bits;

  std::size_t count() const;
  bool at(std::size_t row, std::size_t col) const { return bits[row * side + col] != 0; }
};

BinaryMask action_to_mask(const ActionSpace& space, std::size_t action);

/// x~ = (1 - M) * x + M * fill over the trailing two (H, W) axes of x; the
/// leading axes all receive the same mask. x is not modified.
Tensor apply_mask(const Tensor& x, const BinaryMask& mask, double fill);

// Mask as a tensor broadcast to `shape` (trailing axes H x W).
Tensor mask_tensor(const BinaryMask& mask, const Shape& shape);

/// Masked-region MSE of one reconstruction: mean over pixels where M = 1 of
/// (x - x^)^2. Throws on an all-zero mask.
double prediction_loss(const Tensor& reconstruction, const Tensor& original, const BinaryMask& mask);

struct ActionSelection {
  enum class Kind { kGreedy, kSoftmax };
  Kind kind = Kind::kGreedy;
  // Softmax temperature; +infinity samples uniformly.
  double temperature = 1.0;

  static ActionSelection greedy() { return {Kind::kGreedy, 1.0}; }
  static ActionSelection softmax(double temperature) { return {Kind::kSoftmax, temperature}; }
};

/// Greedy: argmax with ties to the lowest index. Softmax: a draw from
/// softmax(scores / temperature). Throws on NaN scores or temperature <= 0.
std::size_t select_action(std::span<const double> scores, ActionSelection how, Rng& rng);

// Action probabilities used by the softmax selector.
std::vector<double> action_probabilities(std::span<const double> scores, double temperature);

// One 1-step episode: the state image, the action taken and its realized loss.
struct Episode {
  std::size_t sample = 0;
  std::size_t action = 0;
  double pred_loss = 0.0;
};
using EpisodeBatch = std::vector<Episode>;

// (q_pred - target)^2 for a single episode.
double masking_loss(double q_pred, double target);

/// Differentiable Q-regression objective over a batch:
///   factor * mean_i (Q(s_i, a_i) - L_pred_i)^2
/// q_scores is N x |A|; targets are constants, so no gradient reaches the
/// prediction network through the reward. With factor = 0.5 a plain gradient
/// step of size alpha on a tabular Q gives Q + alpha * (R - Q).
Tensor masking_objective(Tape& tape, const Tensor& q_scores, const EpisodeBatch& episodes,
                         double factor = 0.5);

}  // namespace imask
