#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "imask/data.hpp"
#include "imask/masking.hpp"
#include "imask/networks.hpp"
#include "imask/optim.hpp"

namespace imask {

enum class Method { kReconstruction, kContextRestoration, kContextPrediction, kIntelligent };

inline constexpr std::array<Method, 4> kAllMethods{
    Method::kReconstruction, Method::kContextRestoration, Method::kContextPrediction,
    Method::kIntelligent};

std::string_view method_name(Method m);
// Throws ConfigError listing the valid names.
Method parse_method(std::string_view name);

struct PretrainConfig {
  Method method = Method::kIntelligent;
  EncoderSpec encoder;
  int epochs = 60;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double lr_decay = 0.3;
  std::size_t k = 3;
  std::size_t patch_side = 0;  // 0 selects ActionSpace::default_patch_side
  // Linear anneal from start to end over the epochs; infinity samples uniformly.
  double temperature_start = 1.0;
  double temperature_end = 0.1;
  // Discount factor. Episodes last one step, so it never enters an update.
  double gamma = 0.99;
  double fill = 0.0;
  std::size_t n_swap = 5;
  std::size_t swap_patch = 8;
  QHead q_head = QHead::kGlobalAverage;
  std::uint64_t seed = 0;

  void validate() const;
  ActionSpace action_space() const;
  LrSchedule schedule() const;
  double temperature_at(int epoch) const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double temperature = 0.0;  // NaN when the method has no agent
  double pred_loss = 0.0;    // mean per-sample prediction loss
  double mask_loss = 0.0;    // mean per-sample (Q - L_pred)^2, NaN without agent
  std::vector<std::size_t> action_counts;  // empty without an action space
};

struct TrainLog {
  Method method = Method::kIntelligent;
  std::vector<EpochLog> epochs;

  // Header: epoch,lr,temperature,pred_loss,mask_loss,action_counts
  // Values use %.17g; missing values are empty; counts are ';'-joined.
  std::string to_csv() const;
};

// What one training step saw; handed to the optional step hook.
struct StepReport {
  int epoch = 0;
  std::size_t batch = 0;
  const std::vector<std::size_t>* samples = nullptr;  // dataset indices
  const EpisodeBatch* episodes = nullptr;             // empty for whole-image methods
  const Tensor* clean = nullptr;
  const Tensor* input = nullptr;           // transformed network input
  const Tensor* reconstruction = nullptr;  // before the parameter update
  const Tensor* q_scores = nullptr;        // before the parameter update, or null
};
using StepHook = std::function<void(const StepReport&)>;

struct PretrainResult {
  PredictionNetwork prediction;
  std::optional<QNetwork> qnet;
  TrainLog log;
};

// Each pipeline trains on `pool` (dataset indices). An empty pool is an error.
PretrainResult train_intelligent_masking(const Dataset& data, const std::vector<std::size_t>& pool,
                                         const PretrainConfig& cfg, const StepHook& hook = {});
PretrainResult train_context_prediction(const Dataset& data, const std::vector<std::size_t>& pool,
                                        const PretrainConfig& cfg, const StepHook& hook = {});
PretrainResult train_context_restoration(const Dataset& data, const std::vector<std::size_t>& pool,
                                         const PretrainConfig& cfg, const StepHook& hook = {});
PretrainResult train_autoencoder(const Dataset& data, const std::vector<std::size_t>& pool,
                                 const PretrainConfig& cfg, const StepHook& hook = {});

// Dispatches on cfg.method; trains on the whole train split.
PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg, const StepHook& hook = {});

/// Swaps the contents of n_swap disjoint pairs of grid-aligned patch x patch
/// cells in every image of x (N x 1 x S x S). Returns a new tensor.
Tensor swap_patches(const Tensor& x, std::size_t n_swap, std::size_t patch, Rng& rng);

// Shuffled mini-batches; a trailing batch of one is merged into its neighbour
// because batch normalization needs two samples.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& pool,
                                                   std::size_t batch_size, Rng& rng);

}  // namespace imask
