#include "imask/pretraining.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "imask/errors.hpp"

namespace imask {
namespace {

enum Stream : std::uint64_t {
  kInitPrediction = 10,
  kInitQ = 11,
  kShuffle = 12,
  kAction = 13,
  kSwap = 14,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kReconstruction: return "reconstruction";
    case Method::kContextRestoration: return "context_restoration";
    case Method::kContextPrediction: return "context_prediction";
    case Method::kIntelligent: return "intelligent";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods)
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method '" + std::string(name) +
                    "' (valid: intelligent, context_prediction, context_restoration, "
                    "reconstruction)");
}

void PretrainConfig::validate() const {
  encoder.validate();
  if (epochs <= 0) throw ConfigError("pretrain: epochs must be positive");
  if (batch_size < 2) throw ConfigError("pretrain: batch_size must be at least 2");
  if (!(base_lr > 0.0)) throw ConfigError("pretrain: base_lr must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("pretrain: lr_decay must be positive");
  if (k == 0) throw ConfigError("pretrain: k must be positive");
  if (!(temperature_start > 0.0) || !(temperature_end > 0.0)) {
    throw ConfigError("pretrain: temperatures must be positive");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("pretrain: gamma must be in [0, 1]");
  if (!std::isfinite(fill)) throw ConfigError("pretrain: fill must be finite");
  if (method == Method::kContextRestoration &&
      (swap_patch == 0 || swap_patch > encoder.image_side)) {
    throw ConfigError("pretrain: swap_patch must be in [1, image_side]");
  }
  if (method == Method::kContextRestoration) {
    const std::size_t per_axis = encoder.image_side / swap_patch;
    if (2 * n_swap > per_axis * per_axis) {
      throw ConfigError("pretrain: " + std::to_string(n_swap) + " disjoint swap pairs of " +
                        std::to_string(swap_patch) + "-pixel patches do not fit the image");
    }
  }
  if (method == Method::kIntelligent || method == Method::kContextPrediction) {
    try {
      (void)action_space();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("pretrain: ") + e.what());
    }
  }
}

ActionSpace PretrainConfig::action_space() const {
  return patch_side == 0 ? ActionSpace::with_default_patch(encoder.image_side, k)
                         : ActionSpace(encoder.image_side, k, patch_side);
}

LrSchedule PretrainConfig::schedule() const { return LrSchedule{base_lr, epochs, lr_decay}; }

double PretrainConfig::temperature_at(int epoch) const {
  if (std::isinf(temperature_start) || std::isinf(temperature_end)) {
    return std::numeric_limits<double>::infinity();
  }
  if (epochs <= 1) return temperature_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return temperature_start + (temperature_end - temperature_start) * t;
}

std::string TrainLog::to_csv() const {
  std::string out = "epoch,lr,temperature,pred_loss,mask_loss,action_counts\n";
  for (const EpochLog& e : epochs) {
    out += std::to_string(e.epoch) + "," + fmt(e.lr) + "," + fmt(e.temperature) + "," +
           fmt(e.pred_loss) + "," + fmt(e.mask_loss) + ",";
    for (std::size_t i = 0; i < e.action_counts.size(); ++i) {
      if (i) out += ';';
      out += std::to_string(e.action_counts[i]);
    }
    out += '\n';
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& pool,
                                                   std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order = pool;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

Tensor swap_patches(const Tensor& x, std::size_t n_swap, std::size_t patch, Rng& rng) {
  if (x.rank() != 4 || x.dim(2) != x.dim(3)) {
    throw DimensionError("swap_patches: expected N x C x S x S, got " + shape_to_string(x.shape()));
  }
  if (patch == 0 || patch > x.dim(2)) throw std::invalid_argument("swap_patches: bad patch side");
  const std::size_t side = x.dim(2), per_axis = side / patch, cells = per_axis * per_axis;
  if (2 * n_swap > cells) {
    throw std::invalid_argument("swap_patches: " + std::to_string(n_swap) +
                                " disjoint pairs need " + std::to_string(2 * n_swap) +
                                " cells, the grid has " + std::to_string(cells));
  }
  Tensor out = x.detach();
  if (n_swap == 0) return out;
  auto d = out.data();
  const std::size_t plane = side * side;
  std::vector<std::size_t> ids(cells);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      double* img = d.data() + (n * x.dim(1) + c) * plane;
      for (std::size_t s = 0; s < n_swap; ++s) {
        const std::size_t a = ids[2 * s], b = ids[2 * s + 1];
        const std::size_t ar = (a / per_axis) * patch, ac = (a % per_axis) * patch;
        const std::size_t br = (b / per_axis) * patch, bc = (b % per_axis) * patch;
        for (std::size_t r = 0; r < patch; ++r)
          for (std::size_t q = 0; q < patch; ++q)
            std::swap(img[(ar + r) * side + ac + q], img[(br + r) * side + bc + q]);
      }
    }
  }
  return out;
}

namespace {

PretrainResult run(const Dataset& data, const std::vector<std::size_t>& pool,
                   const PretrainConfig& cfg, const StepHook& hook) {
  cfg.validate();
  if (pool.empty()) throw DataError("pretraining: empty dataset");
  if (pool.size() < 2) throw DataError("pretraining: need at least two images for batch norm");
  for (std::size_t i : pool) {
    if (i >= data.size()) throw DataError("pretraining: sample index out of range");
    const Image& img = data.images[i];
    if (img.height != cfg.encoder.image_side || img.width != cfg.encoder.image_side) {
      throw DataError("pretraining: image " + data.manifest.records[i].id + " is not " +
                      std::to_string(cfg.encoder.image_side) + " pixels square");
    }
  }

  const Method method = cfg.method;
  const bool masked = method == Method::kIntelligent || method == Method::kContextPrediction;
  const bool agent = method == Method::kIntelligent;

  Rng init_rng(derive_seed(cfg.seed, kInitPrediction));
  PretrainResult res{PredictionNetwork(cfg.encoder, init_rng), std::nullopt, TrainLog{method, {}}};
  if (agent) {
    Rng q_rng(derive_seed(cfg.seed, kInitQ));
    res.qnet.emplace(cfg.encoder, cfg.k, cfg.q_head, q_rng);
  }
  std::optional<ActionSpace> space;
  if (masked) space = cfg.action_space();

  std::vector<Tensor> p_params = res.prediction.parameters();
  AdamState p_state = make_adam_state(p_params);
  std::vector<Tensor> q_params;
  AdamState q_state;
  if (agent) {
    q_params = res.qnet->parameters();
    q_state = make_adam_state(q_params);
  }

  // Masks are rebuilt per batch from cached per-action planes.
  const std::size_t side = cfg.encoder.image_side, plane = side * side;
  std::vector<BinaryMask> action_masks;
  if (masked)
    for (std::size_t a = 0; a < space->size(); ++a) action_masks.push_back(action_to_mask(*space, a));

  Rng shuffle_rng(derive_seed(cfg.seed, kShuffle));
  Rng action_rng(derive_seed(cfg.seed, kAction));
  Rng swap_rng(derive_seed(cfg.seed, kSwap));
  const LrSchedule schedule = cfg.schedule();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    const double temperature = masked ? cfg.temperature_at(epoch) : kNaN;
    EpochLog log{epoch, lr, agent ? temperature : kNaN, 0.0, agent ? 0.0 : kNaN, {}};
    if (masked) log.action_counts.assign(space->size(), 0);
    std::size_t seen = 0;

    const auto batches = make_batches(pool, cfg.batch_size, shuffle_rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const std::size_t n = batch.size();
      Tensor clean = stack_images(data.images, batch);

      // (1)-(2) score clean images and pick one action per image
      Tape q_tape(agent);
      Tensor q;
      EpisodeBatch episodes;
      if (masked) {
        std::vector<double> zeros(space->size(), 0.0);
        if (agent) q = res.qnet->forward(q_tape, clean, Mode::kTrain);
        const ActionSelection how =
            agent ? ActionSelection::softmax(temperature)
                  : ActionSelection::softmax(std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
          std::span<const double> scores =
              agent ? std::span<const double>(q.data().subspan(i * space->size(), space->size()))
                    : std::span<const double>(zeros);
          const std::size_t a = select_action(scores, how, action_rng);
          episodes.push_back({batch[i], a, 0.0});
          ++log.action_counts[a];
        }
      }

      // (3) build the network input
      Tensor input, mask;
      if (masked) {
        mask = Tensor(clean.shape());
        input = clean.detach();
        auto md = mask.data();
        auto in = input.data();
        for (std::size_t i = 0; i < n; ++i) {
          const auto& bits = action_masks[episodes[i].action].bits;
          for (std::size_t p = 0; p < plane; ++p)
            if (bits[p]) {
              md[i * plane + p] = 1.0;
              in[i * plane + p] = cfg.fill;
            }
        }
      } else if (method == Method::kContextRestoration) {
        input = swap_patches(clean, cfg.n_swap, cfg.swap_patch, swap_rng);
      } else {
        input = clean.detach();
      }

      // (4)-(6) inpaint and update theta, phi
      Tape p_tape;
      Tensor recon = res.prediction.forward(p_tape, input, Mode::kTrain);
      Tensor per = masked ? masked_mse_per_sample(p_tape, recon, clean, mask)
                          : mse_per_sample(p_tape, recon, clean);
      Tensor loss = mean(p_tape, per);
      zero_grads(p_params);
      p_tape.backward(loss);
      adam_step(p_params, p_state, lr);
      for (std::size_t i = 0; i < n; ++i) {
        log.pred_loss += per[i];
        if (masked) episodes[i].pred_loss = per[i];
      }

      // (7) regress Q at the taken action toward the realized loss
      if (agent) {
        for (const Episode& e : episodes) {
          const std::size_t i = static_cast<std::size_t>(&e - episodes.data());
          log.mask_loss += masking_loss(q[i * space->size() + e.action], e.pred_loss);
        }
        Tensor obj = masking_objective(q_tape, q, episodes, 0.5);
        zero_grads(q_params);
        q_tape.backward(obj);
        adam_step(q_params, q_state, lr);
      }
      seen += n;

      if (hook) {
        StepReport rep;
        rep.epoch = epoch;
        rep.batch = b;
        rep.samples = &batch;
        rep.episodes = &episodes;
        rep.clean = &clean;
        rep.input = &input;
        rep.reconstruction = &recon;
        rep.q_scores = agent ? &q : nullptr;
        hook(rep);
      }
    }
    log.pred_loss /= static_cast<double>(seen);
    if (agent) log.mask_loss /= static_cast<double>(seen);
    res.log.epochs.push_back(std::move(log));
  }
  return res;
}

void require(const PretrainConfig& cfg, Method m) {
  if (cfg.method != m) {
    throw ConfigError("pipeline '" + std::string(method_name(m)) + "' called with method '" +
                      std::string(method_name(cfg.method)) + "'");
  }
}

}  // namespace

PretrainResult train_intelligent_masking(const Dataset& data, const std::vector<std::size_t>& pool,
                                         const PretrainConfig& cfg, const StepHook& hook) {
  require(cfg, Method::kIntelligent);
  return run(data, pool, cfg, hook);
}

PretrainResult train_context_prediction(const Dataset& data, const std::vector<std::size_t>& pool,
                                        const PretrainConfig& cfg, const StepHook& hook) {
  require(cfg, Method::kContextPrediction);
  return run(data, pool, cfg, hook);
}

PretrainResult train_context_restoration(const Dataset& data, const std::vector<std::size_t>& pool,
                                         const PretrainConfig& cfg, const StepHook& hook) {
  require(cfg, Method::kContextRestoration);
  return run(data, pool, cfg, hook);
}

PretrainResult train_autoencoder(const Dataset& data, const std::vector<std::size_t>& pool,
                                 const PretrainConfig& cfg, const StepHook& hook) {
  require(cfg, Method::kReconstruction);
  return run(data, pool, cfg, hook);
}

PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg, const StepHook& hook) {
  const auto pool = data.indices(Split::kTrain);
  switch (cfg.method) {
    case Method::kIntelligent: return train_intelligent_masking(data, pool, cfg, hook);
    case Method::kContextPrediction: return train_context_prediction(data, pool, cfg, hook);
    case Method::kContextRestoration: return train_context_restoration(data, pool, cfg, hook);
    case Method::kReconstruction: return train_autoencoder(data, pool, cfg, hook);
  }
  throw ConfigError("unknown method");
}

}  // namespace imask
