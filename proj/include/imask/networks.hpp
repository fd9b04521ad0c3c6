#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "imask/checkpoint.hpp"
#include "imask/ops.hpp"
#include "imask/rng.hpp"
#include "imask/tensor.hpp"

namespace imask {

/// Stage widths and geometry shared by the prediction encoder, the Q-network
/// trunk and the classifier backbone.
struct EncoderSpec {
  std::vector<std::size_t> channels{8, 16, 32, 32};
  std::size_t image_side = 32;
  std::size_t kernel = 3;
  std::size_t pool = 2;

  // Throws DimensionError when the side is not divisible by pool^stages.
  void validate() const;
  std::size_t latent_side() const;
  std::size_t latent_channels() const { return channels.back(); }
  std::size_t latent_size() const { return latent_channels() * latent_side() * latent_side(); }

  bool operator==(const EncoderSpec&) const = default;
};

// Full-scale stage list for 64 px inputs; the desk default is EncoderSpec{}.
EncoderSpec full_scale_encoder_spec();

struct ConvLayer {
  Tensor weight;
  Tensor bias;
  Conv2dOptions opts;
};

struct TransposedConvLayer {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
};

struct LinearLayer {
  Tensor weight;
  Tensor bias;
};

// Weight init: kRelu draws from +-sqrt(6/fan_in) for layers feeding a ReLU,
// kLinear from +-1/sqrt(fan_in). Biases start at zero.
enum class Init { kRelu, kLinear };

ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opts,
                    Init init, Rng& rng);
TransposedConvLayer make_transposed_conv(std::size_t in, std::size_t out, std::size_t kernel,
                                         std::size_t stride, Init init, Rng& rng);
BatchNormLayer make_batch_norm(std::size_t channels);
LinearLayer make_linear(std::size_t in, std::size_t out, Init init, Rng& rng);

/// Per stage: conv -> relu -> maxpool -> batch-norm.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderSpec& spec, Rng& rng);

  Tensor forward(Tape& tape, const Tensor& x, Mode mode);

  const EncoderSpec& spec() const { return spec_; }
  void append_parameters(std::vector<Tensor>& out) const;
  void append_state(std::vector<NamedTensor>& out, const std::string& prefix) const;

 private:
  struct Stage {
    ConvLayer conv;
    BatchNormLayer bn;
  };
  EncoderSpec spec_;
  std::vector<Stage> stages_;
};

/// Encoder, channel-wise latent convolution, transposed-convolution decoder.
class PredictionNetwork {
 public:
  PredictionNetwork(const EncoderSpec& spec, Rng& rng);

  // x~ -> x^, same shape as the input.
  Tensor forward(Tape& tape, const Tensor& x, Mode mode);
  // The channel-wise latent mixing layer alone (N x C x L x L -> same shape).
  Tensor bottleneck(Tape& tape, const Tensor& latent);

  const EncoderSpec& spec() const { return encoder_.spec(); }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  const ConvLayer& bottleneck_layer() const { return bottleneck_; }

  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> state() const;
  std::size_t parameter_count() const;

 private:
  Encoder encoder_;
  ConvLayer bottleneck_;
  std::vector<TransposedConvLayer> decoder_;
  ConvLayer output_;
};

enum class QHead { kGlobalAverage, kFlatten };

std::string q_head_name(QHead head);
QHead parse_q_head(const std::string& name);

/// Q(s, ., psi): convolutional trunk with the encoder's stage widths and a
/// linear head producing one raw score per action.
class QNetwork {
 public:
  QNetwork(const EncoderSpec& spec, std::size_t k, QHead head, Rng& rng);

  // N x 1 x S x S -> N x k^2
  Tensor forward(Tape& tape, const Tensor& x, Mode mode);
  // Replaces only the head; trunk parameters are kept.
  void rebuild_head(std::size_t k, Rng& rng);

  std::size_t k() const { return k_; }
  std::size_t num_actions() const { return k_ * k_; }
  QHead head_kind() const { return head_kind_; }
  const EncoderSpec& spec() const { return trunk_.spec(); }
  const Encoder& trunk() const { return trunk_; }

  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> state() const;

 private:
  std::size_t head_inputs() const;
  Encoder trunk_;
  std::size_t k_;
  QHead head_kind_;
  LinearLayer head_;
};

/// Encoder backbone + [flatten -> linear -> relu -> dropout -> linear].
class Classifier {
 public:
  Classifier(Encoder encoder, std::size_t num_classes, double dropout_p, std::size_t hidden,
             Rng& rng);

  Tensor forward(Tape& tape, const Tensor& x, Mode mode, Rng& dropout_rng);

  std::size_t num_classes() const { return num_classes_; }
  double dropout_p() const { return dropout_p_; }
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> state() const;

 private:
  Encoder encoder_;
  std::size_t num_classes_;
  double dropout_p_;
  LinearLayer fc1_;
  LinearLayer fc2_;
};

inline constexpr double kDefaultDropout = 0.3;
inline constexpr std::size_t kDefaultClassifierHidden = 64;

/// Builds a classifier whose backbone is loaded from the "encoder.*" records of
/// a checkpoint (encoder-only or full prediction network). Throws
/// ArchitectureError when the records do not fit `spec`.
Classifier build_classifier(std::span<const NamedTensor> encoder_records, const EncoderSpec& spec,
                            std::size_t num_classes, double dropout_p, std::size_t hidden,
                            Rng& rng);

// Deep copy of a state list (for best-epoch snapshots).
std::vector<NamedTensor> snapshot(std::span<const NamedTensor> state);

/// JSON descriptor written beside every checkpoint as <stem>.arch.json.
struct ArchDescriptor {
  std::string kind;    // "encoder", "qnetwork", "prediction_network"
  std::string method;  // pretraining method that produced it, may be empty
  EncoderSpec spec;
  std::size_t k = 0;
  QHead q_head = QHead::kGlobalAverage;
  std::size_t patch_side = 0;  // 0: the default for (image_side, k)
};

std::filesystem::path descriptor_path(const std::filesystem::path& checkpoint);
void write_descriptor(const std::filesystem::path& checkpoint, const ArchDescriptor& desc);
ArchDescriptor read_descriptor(const std::filesystem::path& checkpoint);

}  // namespace imask
