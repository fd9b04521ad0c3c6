#include "imask/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "imask/errors.hpp"

namespace imask {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  require(t.defined() && t.rank() == rank, std::string(op) + ": " + name + " must have rank " +
                                               std::to_string(rank) + ", got " +
                                               shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

struct ConvGeometry {
  std::size_t n, channels, height, width, kernel, stride, pad, out_h, out_w;
};

// Rows of `col` are (c, kh, kw) for the channel slice [c0, c0 + cg); columns
// are (n, oh, ow).
void im2col(const double* x, const ConvGeometry& g, std::size_t c0, std::size_t cg,
            double* col) {
  const std::size_t cols = g.n * g.out_h * g.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < cg; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        double* dst = col + ((c * g.kernel + kh) * g.kernel + kw) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* src = x + (n * g.channels + c0 + c) * g.height * g.width;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill_n(dst, g.out_w, 0.0);
              dst += g.out_w;
              continue;
            }
            const double* row = src + ih * static_cast<std::ptrdiff_t>(g.width);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
              *dst++ = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : row[iw];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image buffer.
void col2im(const double* col, const ConvGeometry& g, std::size_t c0, std::size_t cg,
            double* x) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < cg; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const double* src =
            col + ((c * g.kernel + kh) * g.kernel + kw) * (g.n * g.out_h * g.out_w);
        for (std::size_t n = 0; n < g.n; ++n) {
          double* dst = x + (n * g.channels + c0 + c) * g.height * g.width;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
              src += g.out_w;
              continue;
            }
            double* row = dst + ih * static_cast<std::ptrdiff_t>(g.width);
            for (std::size_t ow = 0; ow < g.out_w; ++ow, ++src) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) row[iw] += *src;
            }
          }
        }
      }
    }
  }
}

// NCHW channel slice -> (C x N*HW) matrix, and back.
void nchw_to_cm(const double* x, std::size_t n, std::size_t channels, std::size_t c0,
                std::size_t cg, std::size_t hw, double* out) {
  const std::size_t cols = n * hw;
  for (std::size_t c = 0; c < cg; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(x + (i * channels + c0 + c) * hw, hw, out + c * cols + i * hw);
    }
  }
}

void cm_add_to_nchw(const double* m, std::size_t n, std::size_t channels, std::size_t c0,
                    std::size_t cg, std::size_t hw, double* x) {
  const std::size_t cols = n * hw;
  for (std::size_t c = 0; c < cg; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = m + c * cols + i * hw;
      double* dst = x + (i * channels + c0 + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) dst[k] += src[k];
    }
  }
}

void add_channel_bias(Tensor& y, const Tensor& bias) {
  if (!bias.defined()) return;
  const std::size_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
  auto yd = y.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < c; ++o) {
      double* p = yd.data() + (i * c + o) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] += bd[o];
    }
}

void accumulate_channel_bias_grad(const Tensor& y, Tensor& bias) {
  if (!bias.defined() || !bias.requires_grad()) return;
  const std::size_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
  auto g = y.grad();
  auto bg = bias.ensure_grad();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < c; ++o) {
      const double* p = g.data() + (i * c + o) * hw;
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      bg[o] += s;
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dOptions opts) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const std::size_t groups = opts.groups;
  require(groups >= 1 && opts.stride >= 1, "conv2d: stride and groups must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), cg = weight.dim(1), k = weight.dim(2);
  require(weight.dim(3) == k, "conv2d: kernel must be square, got " +
                                  shape_to_string(weight.shape()));
  require(c == cg * groups, "conv2d: input has " + std::to_string(c) +
                                " channels but weight expects " + std::to_string(cg * groups) +
                                " (weight " + shape_to_string(weight.shape()) + ", groups " +
                                std::to_string(groups) + ")");
  require(o % groups == 0, "conv2d: output channels not divisible by groups");
  require(!bias.defined() || bias.numel() == o,
          "conv2d: bias must have " + std::to_string(o) + " entries");
  require(h + 2 * opts.padding >= k && w + 2 * opts.padding >= k,
          "conv2d: kernel larger than padded input");

  ConvGeometry g{n, c, h, w, k, opts.stride, opts.padding,
                 (h + 2 * opts.padding - k) / opts.stride + 1,
                 (w + 2 * opts.padding - k) / opts.stride + 1};
  const std::size_t og = o / groups;
  const std::size_t rows = cg * k * k;
  const std::size_t cols = n * g.out_h * g.out_w;
  const std::size_t hw_out = g.out_h * g.out_w;

  Tensor y(Shape{n, o, g.out_h, g.out_w});
  auto cols_saved = std::make_shared<std::vector<std::vector<double>>>(groups);
  std::vector<double> out(og * cols);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    auto& col = (*cols_saved)[gi];
    col.resize(rows * cols);
    im2col(x.data().data(), g, gi * cg, cg, col.data());
    ConstMatMap wm(weight.data().data() + gi * og * rows, og, rows);
    ConstMatMap cm(col.data(), rows, cols);
    MatMap om(out.data(), og, cols);
    om.noalias() = wm * cm;
    cm_add_to_nchw(out.data(), n, o, gi * og, og, hw_out, y.data().data());
  }
  add_channel_bias(y, bias);

  if (tape.should_record({&x, &weight, &bias})) {
    tape.record("conv2d", y,
                [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), g, groups, og, rows, cols, hw_out, cols_saved](Tensor& out) mutable {
                  std::vector<double> dy(og * cols);
                  std::vector<double> dcol;
                  for (std::size_t gi = 0; gi < groups; ++gi) {
                    nchw_to_cm(out.grad().data(), g.n, og * groups, gi * og, og, hw_out, dy.data());
                    ConstMatMap dym(dy.data(), og, cols);
                    if (weight.requires_grad()) {
                      MatMap dw(weight.ensure_grad().data() + gi * og * rows, og, rows);
                      ConstMatMap cm((*cols_saved)[gi].data(), rows, cols);
                      dw.noalias() += dym * cm.transpose();
                    }
                    if (x.requires_grad()) {
                      dcol.assign(rows * cols, 0.0);
                      ConstMatMap wm(weight.data().data() + gi * og * rows, og, rows);
                      MatMap dc(dcol.data(), rows, cols);
                      dc.noalias() = wm.transpose() * dym;
                      col2im(dcol.data(), g, gi * (rows / (g.kernel * g.kernel)),
                             rows / (g.kernel * g.kernel), x.ensure_grad().data());
                    }
                  }
                  accumulate_channel_bias_grad(out, bias);
                });
  }
  return y;
}

Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv_transpose2d", "input");
  require_rank(weight, 4, "conv_transpose2d", "weight");
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(weight.dim(0) == cin, "conv_transpose2d: input has " + std::to_string(cin) +
                                    " channels but weight " + shape_to_string(weight.shape()) +
                                    " expects " + std::to_string(weight.dim(0)));
  const std::size_t cout = weight.dim(1), k = weight.dim(2);
  require(weight.dim(3) == k, "conv_transpose2d: kernel must be square");
  require(!bias.defined() || bias.numel() == cout,
          "conv_transpose2d: bias must have " + std::to_string(cout) + " entries");
  require((h - 1) * stride + k > 2 * padding && (w - 1) * stride + k > 2 * padding,
          "conv_transpose2d: padding too large");
  const std::size_t ho = (h - 1) * stride + k - 2 * padding;
  const std::size_t wo = (w - 1) * stride + k - 2 * padding;

  // Geometry of the conv2d whose input-adjoint this op computes.
  ConvGeometry g{n, cout, ho, wo, k, stride, padding, h, w};
  const std::size_t rows = cout * k * k;
  const std::size_t cols = n * h * w;

  auto xm = std::make_shared<std::vector<double>>(cin * cols);
  nchw_to_cm(x.data().data(), n, cin, 0, cin, h * w, xm->data());
  std::vector<double> col(rows * cols);
  {
    ConstMatMap wmat(weight.data().data(), cin, rows);
    ConstMatMap xmat(xm->data(), cin, cols);
    MatMap cm(col.data(), rows, cols);
    cm.noalias() = wmat.transpose() * xmat;
  }
  Tensor y(Shape{n, cout, ho, wo});
  col2im(col.data(), g, 0, cout, y.data().data());
  add_channel_bias(y, bias);

  if (tape.should_record({&x, &weight, &bias})) {
    tape.record("conv_transpose2d", y, [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), g, cin, rows, cols, xm](Tensor& out) mutable {
      std::vector<double> dcol(rows * cols);
      im2col(out.grad().data(), g, 0, g.channels, dcol.data());
      ConstMatMap dc(dcol.data(), rows, cols);
      if (weight.requires_grad()) {
        MatMap dw(weight.ensure_grad().data(), cin, rows);
        ConstMatMap xmat(xm->data(), cin, cols);
        dw.noalias() += xmat * dc.transpose();
      }
      if (x.requires_grad()) {
        std::vector<double> dx(cin * cols);
        ConstMatMap wmat(weight.data().data(), cin, rows);
        MatMap dxm(dx.data(), cin, cols);
        dxm.noalias() = wmat * dc;
        cm_add_to_nchw(dx.data(), g.n, cin, 0, cin, g.out_h * g.out_w, x.ensure_grad().data());
      }
      accumulate_channel_bias_grad(out, bias);
    });
  }
  return y;
}

Tensor maxpool2d(Tape& tape, const Tensor& x, std::size_t window) {
  require_rank(x, 4, "maxpool2d", "input");
  require(window >= 1, "maxpool2d: window must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % window == 0 && w % window == 0,
          "maxpool2d: window " + std::to_string(window) + " does not divide " +
              shape_to_string(x.shape()));
  const std::size_t ho = h / window, wo = w / window;
  Tensor y(Shape{n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
  auto xd = x.data();
  auto yd = y.data();
  std::size_t idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow, ++idx) {
        std::size_t best = base + oh * window * w + ow * window;
        for (std::size_t dh = 0; dh < window; ++dh)
          for (std::size_t dw = 0; dw < window; ++dw) {
            const std::size_t p = base + (oh * window + dh) * w + ow * window + dw;
            if (xd[p] > xd[best]) best = p;
          }
        yd[idx] = xd[best];
        (*argmax)[idx] = best;
      }
  }
  if (tape.should_record({&x})) {
    tape.record("maxpool2d", y, [x = Tensor(x), argmax](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
  }
  return y;
}

Tensor batch_norm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, Mode mode, BatchNormOptions opts) {
  require_rank(x, 4, "batch_norm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
              running_var.numel() == c,
          "batch_norm2d: parameter size does not match " + std::to_string(c) + " channels");
  const std::size_t m = n * hw;
  auto xd = x.data();
  Tensor y(x.shape());
  auto yd = y.data();
  auto gd = gamma.data();
  auto bd = beta.data();

  if (mode == Mode::kEval) {
    auto inv = std::make_shared<std::vector<double>>(c);
    for (std::size_t ch = 0; ch < c; ++ch)
      (*inv)[ch] = 1.0 / std::sqrt(running_var[ch] + opts.eps);
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const double xh = (xd[off + k] - running_mean[ch]) * (*inv)[ch];
          (*xhat)[off + k] = xh;
          yd[off + k] = gd[ch] * xh + bd[ch];
        }
      }
    if (tape.should_record({&x, &gamma, &beta})) {
      tape.record("batch_norm2d_eval", y, [x = Tensor(x), gamma = Tensor(gamma), beta = Tensor(beta), inv, xhat, n, c, hw](Tensor& out) mutable {
        auto gy = out.grad();
        const bool gx_on = x.requires_grad();
        std::span<double> gx = gx_on ? x.ensure_grad() : std::span<double>{};
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              dgamma[ch] += gy[off + k] * (*xhat)[off + k];
              dbeta[ch] += gy[off + k];
              if (gx_on) gx[off + k] += gy[off + k] * gamma[ch] * (*inv)[ch];
            }
          }
        if (gamma.requires_grad()) {
          auto g = gamma.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += dgamma[ch];
        }
        if (beta.requires_grad()) {
          auto g = beta.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += dbeta[ch];
        }
      });
    }
    return y;
  }

  if (n < 2) {
    throw DimensionError("batch_norm2d: training mode needs a batch of at least 2, got " +
                         std::to_string(n));
  }
  auto inv = std::make_shared<std::vector<double>>(c);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = xd.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) mu += p[k];
    }
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = xd.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) var += (p[k] - mu) * (p[k] - mu);
    }
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + opts.eps);
    (*inv)[ch] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const double xh = (xd[off + k] - mu) * is;
        (*xhat)[off + k] = xh;
        yd[off + k] = gd[ch] * xh + bd[ch];
      }
    }
    running_mean[ch] = (1.0 - opts.momentum) * running_mean[ch] + opts.momentum * mu;
    const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
    running_var[ch] = (1.0 - opts.momentum) * running_var[ch] + opts.momentum * unbiased;
  }
  if (tape.should_record({&x, &gamma, &beta})) {
    tape.record("batch_norm2d", y, [x = Tensor(x), gamma = Tensor(gamma), beta = Tensor(beta), inv, xhat, n, c, hw, m](Tensor& out) mutable {
      auto gy = out.grad();
      const bool gx_on = x.requires_grad();
      std::span<double> gx = gx_on ? x.ensure_grad() : std::span<double>{};
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            sum_dy += gy[off + k];
            sum_dy_xh += gy[off + k] * (*xhat)[off + k];
          }
        }
        if (gamma.requires_grad()) gamma.ensure_grad()[ch] += sum_dy_xh;
        if (beta.requires_grad()) beta.ensure_grad()[ch] += sum_dy;
        if (!gx_on) continue;
        const double md = static_cast<double>(m);
        const double k_scale = gamma[ch] * (*inv)[ch] / md;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            gx[off + k] +=
                k_scale * (md * gy[off + k] - sum_dy - (*xhat)[off + k] * sum_dy_xh);
          }
        }
      }
    });
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  require(weight.dim(1) == f, "linear: input has " + std::to_string(f) + " features but weight " +
                                  shape_to_string(weight.shape()) + " expects " +
                                  std::to_string(weight.dim(1)));
  require(!bias.defined() || bias.numel() == o, "linear: bias size mismatch");
  Tensor y(Shape{n, o});
  {
    ConstMatMap xm(x.data().data(), n, f);
    ConstMatMap wm(weight.data().data(), o, f);
    MatMap ym(y.data().data(), n, o);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < o; ++j) ym(i, j) += bias[j];
    }
  }
  if (tape.should_record({&x, &weight, &bias})) {
    tape.record("linear", y, [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), n, f, o](Tensor& out) mutable {
      ConstMatMap gy(out.grad().data(), n, o);
      if (x.requires_grad()) {
        MatMap gx(x.ensure_grad().data(), n, f);
        ConstMatMap wm(weight.data().data(), o, f);
        gx.noalias() += gy * wm;
      }
      if (weight.requires_grad()) {
        MatMap gw(weight.ensure_grad().data(), o, f);
        ConstMatMap xm(x.data().data(), n, f);
        gw.noalias() += gy.transpose() * xm;
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < o; ++j) gb[j] += gy(i, j);
      }
    });
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  if (tape.should_record({&x})) {
    tape.record("relu", y, [x = Tensor(x)](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      auto xd = x.data();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xd[i] > 0.0) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  const double s = 1.0 / (1.0 - p);
  for (double& k : *keep) k = uniform01(rng) >= p ? s : 0.0;
  Tensor y(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] * (*keep)[i];
  if (tape.should_record({&x})) {
    tape.record("dropout", y, [x = Tensor(x), keep](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*keep)[i];
    });
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis out of range for " + shape_to_string(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor y(s);
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        yd[base + j * inner] = std::exp(xd[base + j * inner] - mx);
        z += yd[base + j * inner];
      }
      for (std::size_t j = 0; j < len; ++j) yd[base + j * inner] /= z;
    }
  if (tape.should_record({&x})) {
    tape.record("softmax", y, [x = Tensor(x), outer, inner, len](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      auto yd = out.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += gy[base + j * inner] * yd[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t p = base + j * inner;
            gx[p] += yd[p] * (gy[p] - dot);
          }
        }
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: cannot view " + shape_to_string(x.shape()) +
                                               " as " + shape_to_string(shape));
  Tensor y(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tape.should_record({&x})) {
    tape.record("reshape", y, [x = Tensor(x)](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor flatten(Tape& tape, const Tensor& x) {
  require(x.rank() >= 1, "flatten: empty shape");
  const std::size_t n = x.dim(0);
  return reshape(tape, x, Shape{n, n == 0 ? 0 : x.numel() / n});
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(Shape{n, c});
  auto xd = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += xd[p * hw + k];
    y[p] = s / static_cast<double>(hw);
  }
  if (tape.should_record({&x})) {
    tape.record("global_avg_pool", y, [x = Tensor(x), hw](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t p = 0; p < gy.size(); ++p)
        for (std::size_t k = 0; k < hw; ++k) gx[p * hw + k] += gy[p] * inv;
    });
  }
  return y;
}

namespace {

template <typename Fwd, typename Da, typename Db>
Tensor binary_elementwise(Tape& tape, const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Da da, Db db) {
  require_same_shape(a, b, name);
  Tensor y(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = fwd(ad[i], bd[i]);
  if (tape.should_record({&a, &b})) {
    tape.record(name, y, [a = Tensor(a), b = Tensor(b), da, db](Tensor& out) mutable {
      auto gy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * da(a[i], b[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * db(a[i], b[i]);
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, "add", a, b, [](double u, double v) { return u + v; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, "sub", a, b, [](double u, double v) { return u - v; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, "mul", a, b, [](double u, double v) { return u * v; },
      [](double, double v) { return v; }, [](double u, double) { return u; });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = x[i] * factor;
  if (tape.should_record({&x})) {
    tape.record("scale", y, [x = Tensor(x), factor](Tensor& out) mutable {
      auto gx = x.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
    });
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
  const auto xd = x.data();
  Tensor y = Tensor::scalar(std::accumulate(xd.begin(), xd.end(), 0.0));
  if (tape.should_record({&x})) {
    tape.record("sum", y, [x = Tensor(x)](Tensor& out) mutable {
      const double g = out.grad()[0];
      for (double& v : x.ensure_grad()) v += g;
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor masked_mse_per_sample(Tape& tape, const Tensor& pred, const Tensor& target,
                             const Tensor& mask) {
  require_same_shape(pred, target, "masked_mse_per_sample");
  require_same_shape(pred, mask, "masked_mse_per_sample");
  require(pred.rank() >= 1, "masked_mse_per_sample: empty shape");
  const std::size_t n = pred.dim(0);
  const std::size_t per = n == 0 ? 0 : pred.numel() / n;
  auto counts = std::make_shared<std::vector<double>>(n, 0.0);
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0, cnt = 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t p = i * per + k;
      if (mask[p] != 0.0) {
        const double d = pred[p] - target[p];
        s += mask[p] * d * d;
        cnt += mask[p];
      }
    }
    if (cnt == 0.0) {
      throw std::invalid_argument("masked mse: sample " + std::to_string(i) +
                                  " has an empty mask (normalization undefined)");
    }
    (*counts)[i] = cnt;
    y[i] = s / cnt;
  }
  if (tape.should_record({&pred})) {
    tape.record("masked_mse", y, [pred = Tensor(pred), target = Tensor(target), mask = Tensor(mask), counts, n, per](Tensor& out) mutable {
      auto gp = pred.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double f = 2.0 * gy[i] / (*counts)[i];
        for (std::size_t k = 0; k < per; ++k) {
          const std::size_t p = i * per + k;
          if (mask[p] != 0.0) gp[p] += f * mask[p] * (pred[p] - target[p]);
        }
      }
    });
  }
  return y;
}

Tensor mse_per_sample(Tape& tape, const Tensor& pred, const Tensor& target) {
  return masked_mse_per_sample(tape, pred, target, Tensor(pred.shape(), 1.0));
}

Tensor gather_rows(Tape& tape, const Tensor& q, std::span<const int> index) {
  require_rank(q, 2, "gather_rows", "scores");
  const std::size_t n = q.dim(0), a = q.dim(1);
  require(index.size() == n, "gather_rows: need one index per row");
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const int j = index[i];
    if (j < 0 || static_cast<std::size_t>(j) >= a) {
      throw std::out_of_range("gather_rows: index " + std::to_string(j) + " outside [0, " +
                              std::to_string(a) + ")");
    }
    y[i] = q[i * a + static_cast<std::size_t>(j)];
  }
  if (tape.should_record({&q})) {
    tape.record("gather_rows", y, [q = Tensor(q), idx, a](Tensor& out) mutable {
      auto gq = q.ensure_grad();
      auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        gq[i * a + static_cast<std::size_t>((*idx)[i])] += gy[i];
    });
  }
  return y;
}

Tensor squared_error_mean(Tape& tape, const Tensor& pred, std::span<const double> target,
                          double factor) {
  require(pred.numel() == target.size() && !target.empty(),
          "squared_error_mean: need one target per prediction");
  auto tgt = std::make_shared<std::vector<double>>(target.begin(), target.end());
  const double n = static_cast<double>(target.size());
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  Tensor y = Tensor::scalar(factor * s / n);
  if (tape.should_record({&pred})) {
    tape.record("squared_error_mean", y, [pred = Tensor(pred), tgt, factor, n](Tensor& out) mutable {
      auto gp = pred.ensure_grad();
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < tgt->size(); ++i)
        gp[i] += g * factor * 2.0 * (pred[i] - (*tgt)[i]) / n;
    });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(labels.size() == n && n > 0, "cross_entropy: need one label per row");
  auto prob = std::make_shared<std::vector<double>>(n * c);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = labels[i];
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " out of range");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) (*prob)[i * c + j] = std::exp(logits[i * c + j] - log_z);
    total += log_z - logits[i * c + static_cast<std::size_t>(l)];
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(n));
  if (tape.should_record({&logits})) {
    tape.record("cross_entropy", y, [logits = Tensor(logits), prob, lab, n, c](Tensor& out) mutable {
      auto gl = logits.ensure_grad();
      const double g = out.grad()[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = static_cast<int>(j) == (*lab)[i] ? 1.0 : 0.0;
          gl[i * c + j] += g * ((*prob)[i * c + j] - onehot);
        }
    });
  }
  return y;
}

}  // namespace imask
