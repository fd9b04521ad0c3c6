#include "imask/networks.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "imask/errors.hpp"

namespace imask {
namespace {

void fan_in_uniform(Tensor& w, double fan_in, Init init, Rng& rng) {
  // He-uniform keeps activation scale through ReLU stacks; the plain bound
  // suits layers whose output is used as is.
  const double bound = init == Init::kRelu ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : w.data()) v = dist(rng);
}

Tensor param(Shape shape) {
  Tensor t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

void push_named(std::vector<NamedTensor>& out, const std::string& name, const Tensor& t) {
  out.push_back({name, t});
}

}  // namespace

void EncoderSpec::validate() const {
  if (channels.empty()) throw DimensionError("encoder spec needs at least one stage");
  for (std::size_t c : channels) {
    if (c == 0) throw DimensionError("encoder stage widths must be positive");
  }
  if (image_side == 0 || kernel == 0 || kernel % 2 == 0 || pool < 1) {
    throw DimensionError("encoder spec needs a positive image side, odd kernel and pool >= 1");
  }
  std::size_t side = image_side;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (side % pool != 0) {
      throw DimensionError("image side " + std::to_string(image_side) +
                           " is not divisible by pool^stages = " + std::to_string(pool) + "^" +
                           std::to_string(channels.size()));
    }
    side /= pool;
  }
}

std::size_t EncoderSpec::latent_side() const {
  std::size_t side = image_side;
  for (std::size_t i = 0; i < channels.size(); ++i) side /= pool;
  return side;
}

EncoderSpec full_scale_encoder_spec() {
  EncoderSpec s;
  s.channels = {16, 32, 64, 64, 128, 128};
  s.image_side = 64;
  return s;
}

ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opts,
                    Init init, Rng& rng) {
  const std::size_t in_per_group = in / opts.groups;
  ConvLayer l{param({out, in_per_group, kernel, kernel}), param({out}), opts};
  fan_in_uniform(l.weight, static_cast<double>(in_per_group * kernel * kernel), init, rng);
  return l;
}

TransposedConvLayer make_transposed_conv(std::size_t in, std::size_t out, std::size_t kernel,
                                         std::size_t stride, Init init, Rng& rng) {
  TransposedConvLayer l{param({in, out, kernel, kernel}), param({out}), stride, 0};
  // Each output pixel receives in * (kernel / stride)^2 contributions.
  const double per_axis = std::max(1.0, static_cast<double>(kernel) / static_cast<double>(stride));
  fan_in_uniform(l.weight, static_cast<double>(in) * per_axis * per_axis, init, rng);
  return l;
}

BatchNormLayer make_batch_norm(std::size_t channels) {
  BatchNormLayer bn{param({channels}), param({channels}), Tensor(Shape{channels}, 0.0),
                    Tensor(Shape{channels}, 1.0)};
  for (double& g : bn.gamma.data()) g = 1.0;
  return bn;
}

LinearLayer make_linear(std::size_t in, std::size_t out, Init init, Rng& rng) {
  LinearLayer l{param({out, in}), param({out})};
  fan_in_uniform(l.weight, static_cast<double>(in), init, rng);
  return l;
}

// ---------------------------------------------------------------------------

Encoder::Encoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  std::size_t in = 1;
  for (std::size_t width : spec_.channels) {
    Conv2dOptions opts{1, spec_.kernel / 2, 1};
    stages_.push_back({make_conv(in, width, spec_.kernel, opts, Init::kRelu, rng), make_batch_norm(width)});
    in = width;
  }
}

Tensor Encoder::forward(Tape& tape, const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != spec_.image_side ||
      x.dim(3) != spec_.image_side) {
    throw DimensionError("encoder expects N x 1 x " + std::to_string(spec_.image_side) + " x " +
                         std::to_string(spec_.image_side) + " input, got " +
                         shape_to_string(x.shape()));
  }
  Tensor h = x;
  for (Stage& s : stages_) {
    h = conv2d(tape, h, s.conv.weight, s.conv.bias, s.conv.opts);
    h = relu(tape, h);
    h = maxpool2d(tape, h, spec_.pool);
    h = batch_norm2d(tape, h, s.bn.gamma, s.bn.beta, s.bn.running_mean, s.bn.running_var, mode);
  }
  return h;
}

void Encoder::append_parameters(std::vector<Tensor>& out) const {
  for (const Stage& s : stages_) {
    out.insert(out.end(), {s.conv.weight, s.conv.bias, s.bn.gamma, s.bn.beta});
  }
}

void Encoder::append_state(std::vector<NamedTensor>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = prefix + std::to_string(i) + ".";
    const Stage& s = stages_[i];
    push_named(out, p + "conv.weight", s.conv.weight);
    push_named(out, p + "conv.bias", s.conv.bias);
    push_named(out, p + "bn.weight", s.bn.gamma);
    push_named(out, p + "bn.bias", s.bn.beta);
    push_named(out, p + "bn.running_mean", s.bn.running_mean);
    push_named(out, p + "bn.running_var", s.bn.running_var);
  }
}

// ---------------------------------------------------------------------------

PredictionNetwork::PredictionNetwork(const EncoderSpec& spec, Rng& rng) : encoder_(spec, rng) {
  const std::size_t latent = spec.latent_side();
  const std::size_t c = spec.latent_channels();
  // Kernel 2L-1 with padding L-1: every output location sees the whole L x L map.
  Conv2dOptions mix{1, latent - 1, c};
  bottleneck_ = make_conv(c, c, 2 * latent - 1, mix, Init::kLinear, rng);

  std::size_t in = c;
  for (auto it = spec.channels.rbegin(); it != spec.channels.rend(); ++it) {
    decoder_.push_back(make_transposed_conv(in, *it, spec.pool, spec.pool, Init::kRelu, rng));
    in = *it;
  }
  output_ = make_conv(in, 1, spec.kernel, Conv2dOptions{1, spec.kernel / 2, 1}, Init::kLinear, rng);
}

Tensor PredictionNetwork::bottleneck(Tape& tape, const Tensor& latent) {
  return conv2d(tape, latent, bottleneck_.weight, bottleneck_.bias, bottleneck_.opts);
}

Tensor PredictionNetwork::forward(Tape& tape, const Tensor& x, Mode mode) {
  Tensor h = encoder_.forward(tape, x, mode);
  h = bottleneck(tape, h);
  for (TransposedConvLayer& d : decoder_) {
    h = conv_transpose2d(tape, h, d.weight, d.bias, d.stride, d.padding);
    h = relu(tape, h);
  }
  return conv2d(tape, h, output_.weight, output_.bias, output_.opts);
}

std::vector<Tensor> PredictionNetwork::parameters() const {
  std::vector<Tensor> out;
  encoder_.append_parameters(out);
  out.insert(out.end(), {bottleneck_.weight, bottleneck_.bias});
  for (const auto& d : decoder_) out.insert(out.end(), {d.weight, d.bias});
  out.insert(out.end(), {output_.weight, output_.bias});
  return out;
}

std::vector<NamedTensor> PredictionNetwork::state() const {
  std::vector<NamedTensor> out;
  encoder_.append_state(out, "encoder.");
  push_named(out, "bottleneck.weight", bottleneck_.weight);
  push_named(out, "bottleneck.bias", bottleneck_.bias);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    push_named(out, "decoder." + std::to_string(i) + ".weight", decoder_[i].weight);
    push_named(out, "decoder." + std::to_string(i) + ".bias", decoder_[i].bias);
  }
  push_named(out, "output.weight", output_.weight);
  push_named(out, "output.bias", output_.bias);
  return out;
}

std::size_t PredictionNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : parameters()) n += p.numel();
  return n;
}

// ---------------------------------------------------------------------------

std::string q_head_name(QHead head) {
  return head == QHead::kGlobalAverage ? "gap" : "flatten";
}

QHead parse_q_head(const std::string& name) {
  if (name == "gap") return QHead::kGlobalAverage;
  if (name == "flatten") return QHead::kFlatten;
  throw ConfigError("unknown q_head '" + name + "' (expected gap or flatten)");
}

QNetwork::QNetwork(const EncoderSpec& spec, std::size_t k, QHead head, Rng& rng)
    : trunk_(spec, rng), k_(k), head_kind_(head) {
  rebuild_head(k, rng);
}

namespace {
constexpr double kQHeadInitScale = 0.01;
}  // namespace

std::size_t QNetwork::head_inputs() const {
  const EncoderSpec& s = trunk_.spec();
  return head_kind_ == QHead::kGlobalAverage ? s.latent_channels() : s.latent_size();
}

void QNetwork::rebuild_head(std::size_t k, Rng& rng) {
  if (k == 0) throw std::invalid_argument("QNetwork: k must be positive");
  k_ = k;
  head_ = make_linear(head_inputs(), k * k, Init::kLinear, rng);
  // Rewards are masked MSEs of order 1e-2; start the scores on that scale.
  for (double& w : head_.weight.data()) w *= kQHeadInitScale;
}

Tensor QNetwork::forward(Tape& tape, const Tensor& x, Mode mode) {
  Tensor h = trunk_.forward(tape, x, mode);
  h = head_kind_ == QHead::kGlobalAverage ? global_avg_pool(tape, h) : flatten(tape, h);
  return linear(tape, h, head_.weight, head_.bias);
}

std::vector<Tensor> QNetwork::parameters() const {
  std::vector<Tensor> out;
  trunk_.append_parameters(out);
  out.insert(out.end(), {head_.weight, head_.bias});
  return out;
}

std::vector<NamedTensor> QNetwork::state() const {
  std::vector<NamedTensor> out;
  trunk_.append_state(out, "trunk.");
  push_named(out, "head.weight", head_.weight);
  push_named(out, "head.bias", head_.bias);
  return out;
}

// ---------------------------------------------------------------------------

Classifier::Classifier(Encoder encoder, std::size_t num_classes, double dropout_p,
                       std::size_t hidden, Rng& rng)
    : encoder_(std::move(encoder)), num_classes_(num_classes), dropout_p_(dropout_p) {
  if (num_classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw std::invalid_argument("classifier dropout must be in [0, 1)");
  }
  fc1_ = make_linear(encoder_.spec().latent_size(), hidden, Init::kRelu, rng);
  fc2_ = make_linear(hidden, num_classes, Init::kLinear, rng);
}

Tensor Classifier::forward(Tape& tape, const Tensor& x, Mode mode, Rng& dropout_rng) {
  Tensor h = encoder_.forward(tape, x, mode);
  h = flatten(tape, h);
  h = relu(tape, linear(tape, h, fc1_.weight, fc1_.bias));
  h = dropout(tape, h, dropout_p_, mode, dropout_rng);
  return linear(tape, h, fc2_.weight, fc2_.bias);
}

std::vector<Tensor> Classifier::parameters() const {
  std::vector<Tensor> out;
  encoder_.append_parameters(out);
  out.insert(out.end(), {fc1_.weight, fc1_.bias, fc2_.weight, fc2_.bias});
  return out;
}

std::vector<NamedTensor> Classifier::state() const {
  std::vector<NamedTensor> out;
  encoder_.append_state(out, "encoder.");
  push_named(out, "fc1.weight", fc1_.weight);
  push_named(out, "fc1.bias", fc1_.bias);
  push_named(out, "fc2.weight", fc2_.weight);
  push_named(out, "fc2.bias", fc2_.bias);
  return out;
}

Classifier build_classifier(std::span<const NamedTensor> encoder_records, const EncoderSpec& spec,
                            std::size_t num_classes, double dropout_p, std::size_t hidden,
                            Rng& rng) {
  Encoder encoder(spec, rng);
  std::vector<NamedTensor> target;
  encoder.append_state(target, "encoder.");
  std::vector<NamedTensor> source;
  for (const auto& r : encoder_records) {
    if (r.name.rfind("encoder.", 0) == 0) source.push_back(r);
  }
  assign_state(target, source);
  return Classifier(std::move(encoder), num_classes, dropout_p, hidden, rng);
}

std::vector<NamedTensor> snapshot(std::span<const NamedTensor> state) {
  std::vector<NamedTensor> out;
  out.reserve(state.size());
  for (const auto& r : state) out.push_back({r.name, r.tensor.clone()});
  return out;
}

// ---------------------------------------------------------------------------

std::filesystem::path descriptor_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".arch.json");
  return p;
}

void write_descriptor(const std::filesystem::path& checkpoint, const ArchDescriptor& desc) {
  nlohmann::ordered_json j;
  j["format"] = "imask-arch/1";
  j["kind"] = desc.kind;
  j["method"] = desc.method;
  j["channels"] = desc.spec.channels;
  j["image_side"] = desc.spec.image_side;
  j["kernel"] = desc.spec.kernel;
  j["pool"] = desc.spec.pool;
  if (desc.kind == "qnetwork") {
    j["k"] = desc.k;
    j["q_head"] = q_head_name(desc.q_head);
    j["patch_side"] = desc.patch_side;
  }
  std::ofstream f(descriptor_path(checkpoint));
  if (!f) throw std::runtime_error("cannot write " + descriptor_path(checkpoint).string());
  f << j.dump(2) << '\n';
}

ArchDescriptor read_descriptor(const std::filesystem::path& checkpoint) {
  const auto path = descriptor_path(checkpoint);
  std::ifstream f(path);
  if (!f) throw DataError("missing architecture descriptor " + path.string());
  try {
    const auto j = nlohmann::json::parse(f);
    if (j.at("format") != "imask-arch/1") throw ParseError("unknown descriptor format");
    ArchDescriptor d;
    d.kind = j.at("kind").get<std::string>();
    d.method = j.value("method", std::string{});
    d.spec.channels = j.at("channels").get<std::vector<std::size_t>>();
    d.spec.image_side = j.at("image_side").get<std::size_t>();
    d.spec.kernel = j.at("kernel").get<std::size_t>();
    d.spec.pool = j.at("pool").get<std::size_t>();
    if (d.kind == "qnetwork") {
      d.k = j.at("k").get<std::size_t>();
      d.q_head = parse_q_head(j.at("q_head").get<std::string>());
      d.patch_side = j.value("patch_side", std::size_t{0});
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad architecture descriptor " + path.string() + ": " + e.what());
  }
}

}  // namespace imask
