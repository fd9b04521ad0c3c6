#pragma once

#include <cstddef>
#include <span>

#include "imask/rng.hpp"
#include "imask/tensor.hpp"

namespace imask {

enum class Mode { kTrain, kEval };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// x: N x C x H x W, weight: O x (C/groups) x K x K, bias: O (or undefined).
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dOptions opts = {});

// x: N x Cin x H x W, weight: Cin x Cout x K x K, bias: Cout (or undefined).
// Output side is (H - 1) * stride - 2 * padding + K. The forward map is the
// adjoint of conv2d's input map for the same weight.
Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t padding);

// Non-overlapping window x window max pooling; window must divide H and W.
Tensor maxpool2d(Tape& tape, const Tensor& x, std::size_t window);

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over (N, H, W).
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running buffers; it needs N >= 2. Eval mode uses
/// the running buffers and is an affine map of x.
Tensor batch_norm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, Mode mode,
                    BatchNormOptions opts = {});

// x: N x F, weight: O x F, bias: O.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(Tape& tape, const Tensor& x);

// Inverted dropout; eval mode returns x unchanged.
Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng);

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
// N x ... -> N x (product of the rest)
Tensor flatten(Tape& tape, const Tensor& x);
// N x C x H x W -> N x C
Tensor global_avg_pool(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// Per-sample mean squared error over pixels where mask == 1. pred, target and
// mask share the shape N x ...; target and mask are treated as constants.
// Returns a length-N tensor. A sample with an all-zero mask is an error.
Tensor masked_mse_per_sample(Tape& tape, const Tensor& pred, const Tensor& target,
                             const Tensor& mask);

// Per-sample mean squared error over every element; target is constant.
Tensor mse_per_sample(Tape& tape, const Tensor& pred, const Tensor& target);

// q: N x A; returns q[i, index[i]] as a length-N tensor.
Tensor gather_rows(Tape& tape, const Tensor& q, std::span<const int> index);

// factor * mean_i (pred[i] - target[i])^2 with constant targets.
Tensor squared_error_mean(Tape& tape, const Tensor& pred, std::span<const double> target,
                          double factor = 1.0);

// Mean negative log-likelihood of softmax(logits) at the given labels.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

}  // namespace imask
