#pragma once

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cellsearch/tensor.hpp"

namespace cellsearch {

// ---------------------------------------------------------------------------
// Convolution (grouped cross-correlation via im2col + matrix multiply)
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  int dh = 1, dw = 1;
  int groups = 1;
  Tensor weight;  // [out, in/groups, kh, kw]
  Tensor bias;    // optional [out]; default-constructed means none
};

// He-normal initialized spec. Group count must divide both channel counts, so
// the weight tensor shrinks by exactly `groups` versus the dense layout.
inline Conv2dSpec make_conv2d(int in_channels, int out_channels, int k, int stride, int pad,
                              int dilation, int groups, bool with_bias, RngStream& rng) {
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0)
    tensor_error("conv2d: channels (" + std::to_string(in_channels) + "," +
                 std::to_string(out_channels) + ") not divisible by groups " +
                 std::to_string(groups));
  Conv2dSpec spec;
  spec.in_channels = in_channels;
  spec.out_channels = out_channels;
  spec.kh = spec.kw = k;
  spec.sh = spec.sw = stride;
  spec.ph = spec.pw = pad;
  spec.dh = spec.dw = dilation;
  spec.groups = groups;
  const int fan_in = (in_channels / groups) * k * k;
  spec.weight = Tensor::randn({out_channels, in_channels / groups, k, k}, rng,
                              std::sqrt(2.0 / fan_in), true);
  if (with_bias) spec.bias = Tensor::zeros({out_channels}, true);
  return spec;
}

inline std::size_t conv2d_param_count(const Conv2dSpec& s) {
  std::size_t n = static_cast<std::size_t>(s.out_channels) * (s.in_channels / s.groups) * s.kh * s.kw;
  if (s.bias.defined()) n += static_cast<std::size_t>(s.out_channels);
  return n;
}

namespace detail {

inline void im2col_group(const double* x, int B, int C, int H, int W, int c0, int cin_g, int kh,
                         int kw, int sh, int sw, int ph, int pw, int dh, int dw, int Ho, int Wo,
                         double* col) {
  const std::size_t ncols = static_cast<std::size_t>(B) * Ho * Wo;
  std::size_t row = 0;
  for (int c = 0; c < cin_g; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        double* dst = col + row * ncols;
        for (int b = 0; b < B; ++b) {
          const double* xc = x + ((static_cast<std::size_t>(b) * C + c0 + c) * H) * W;
          for (int oh = 0; oh < Ho; ++oh) {
            const int ih = oh * sh - ph + ki * dh;
            double* drow = dst + (static_cast<std::size_t>(b) * Ho + oh) * Wo;
            if (ih < 0 || ih >= H) {
              for (int ow = 0; ow < Wo; ++ow) drow[ow] = 0.0;
              continue;
            }
            for (int ow = 0; ow < Wo; ++ow) {
              const int iw = ow * sw - pw + kj * dw;
              drow[ow] = (iw >= 0 && iw < W) ? xc[static_cast<std::size_t>(ih) * W + iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

inline void col2im_group(const double* col, int B, int C, int H, int W, int c0, int cin_g, int kh,
                         int kw, int sh, int sw, int ph, int pw, int dh, int dw, int Ho, int Wo,
                         double* dx) {
  const std::size_t ncols = static_cast<std::size_t>(B) * Ho * Wo;
  std::size_t row = 0;
  for (int c = 0; c < cin_g; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const double* src = col + row * ncols;
        for (int b = 0; b < B; ++b) {
          double* xc = dx + ((static_cast<std::size_t>(b) * C + c0 + c) * H) * W;
          for (int oh = 0; oh < Ho; ++oh) {
            const int ih = oh * sh - ph + ki * dh;
            if (ih < 0 || ih >= H) continue;
            const double* srow = src + (static_cast<std::size_t>(b) * Ho + oh) * Wo;
            for (int ow = 0; ow < Wo; ++ow) {
              const int iw = ow * sw - pw + kj * dw;
              if (iw >= 0 && iw < W) xc[static_cast<std::size_t>(ih) * W + iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Conv2dSpec& spec) {
  if (x.rank() != 4) tensor_error("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != spec.in_channels)
    tensor_error("conv2d: input has " + std::to_string(C) + " channels, spec expects " +
                 std::to_string(spec.in_channels));
  if (spec.in_channels % spec.groups != 0 || spec.out_channels % spec.groups != 0)
    tensor_error("conv2d: channels (" + std::to_string(spec.in_channels) + "," +
                 std::to_string(spec.out_channels) + ") not divisible by groups " +
                 std::to_string(spec.groups));
  const int Ho = (H + 2 * spec.ph - spec.dh * (spec.kh - 1) - 1) / spec.sh + 1;
  const int Wo = (W + 2 * spec.pw - spec.dw * (spec.kw - 1) - 1) / spec.sw + 1;
  if (Ho <= 0 || Wo <= 0) tensor_error("conv2d: empty output for input " + shape_str(x.shape()));

  const int G = spec.groups;
  const int cin_g = spec.in_channels / G;
  const int cout_g = spec.out_channels / G;
  const int krows = cin_g * spec.kh * spec.kw;
  const std::size_t ncols = static_cast<std::size_t>(B) * Ho * Wo;
  const std::size_t spatial = static_cast<std::size_t>(Ho) * Wo;

  std::vector<double> out(static_cast<std::size_t>(B) * spec.out_channels * spatial, 0.0);
  std::vector<double> col(static_cast<std::size_t>(krows) * ncols);
  std::vector<double> tmp(static_cast<std::size_t>(cout_g) * ncols);
  const double* wdat = spec.weight.data();
  for (int g = 0; g < G; ++g) {
    detail::im2col_group(x.data(), B, C, H, W, g * cin_g, cin_g, spec.kh, spec.kw, spec.sh,
                         spec.sw, spec.ph, spec.pw, spec.dh, spec.dw, Ho, Wo, col.data());
    std::fill(tmp.begin(), tmp.end(), 0.0);
    detail::gemm_nn(wdat + static_cast<std::size_t>(g) * cout_g * krows, col.data(), tmp.data(),
                    cout_g, krows, static_cast<int>(ncols));
    for (int oc = 0; oc < cout_g; ++oc)
      for (int b = 0; b < B; ++b)
        std::copy(tmp.data() + (static_cast<std::size_t>(oc) * B + b) * spatial,
                  tmp.data() + (static_cast<std::size_t>(oc) * B + b + 1) * spatial,
                  out.data() + ((static_cast<std::size_t>(b) * spec.out_channels) + g * cout_g + oc) * spatial);
  }
  if (spec.bias.defined()) {
    const double* bd = spec.bias.data();
    for (int b = 0; b < B; ++b)
      for (int oc = 0; oc < spec.out_channels; ++oc) {
        double* dst = out.data() + (static_cast<std::size_t>(b) * spec.out_channels + oc) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) dst[i] += bd[oc];
      }
  }

  auto ix = x.handle();
  auto iw = spec.weight.handle();
  auto ib = spec.bias.defined() ? spec.bias.handle() : nullptr;
  Conv2dSpec geom = spec;  // copies tensor handles plus geometry for the closure
  std::vector<Tensor> inputs{x, spec.weight};
  if (spec.bias.defined()) inputs.push_back(spec.bias);
  return make_node(
      {B, spec.out_channels, Ho, Wo}, std::move(out), inputs,
      [ix, iw, ib, geom, B, C, H, W, Ho, Wo, G, cin_g, cout_g, krows, ncols,
       spatial](const TensorImpl& self) {
        std::vector<double> col(static_cast<std::size_t>(krows) * ncols);
        std::vector<double> dout_g(static_cast<std::size_t>(cout_g) * ncols);
        std::vector<double> dcol(static_cast<std::size_t>(krows) * ncols);
        if (ix->requires_grad) ix->ensure_grad();
        if (iw->requires_grad) iw->ensure_grad();
        if (ib && ib->requires_grad) ib->ensure_grad();
        for (int g = 0; g < G; ++g) {
          for (int oc = 0; oc < cout_g; ++oc)
            for (int b = 0; b < B; ++b)
              std::copy(self.grad.data() +
                            ((static_cast<std::size_t>(b) * geom.out_channels) + g * cout_g + oc) * spatial,
                        self.grad.data() +
                            ((static_cast<std::size_t>(b) * geom.out_channels) + g * cout_g + oc + 1) * spatial,
                        dout_g.data() + (static_cast<std::size_t>(oc) * B + b) * spatial);
          const bool need_col = iw->requires_grad;
          if (need_col || ix->requires_grad)
            detail::im2col_group(ix->data.data(), B, C, H, W, g * cin_g, cin_g, geom.kh, geom.kw,
                                 geom.sh, geom.sw, geom.ph, geom.pw, geom.dh, geom.dw, Ho, Wo,
                                 col.data());
          if (iw->requires_grad)
            detail::gemm_nt(dout_g.data(), col.data(),
                            iw->grad.data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g,
                            static_cast<int>(ncols), krows);
          if (ix->requires_grad) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            detail::gemm_tn(iw->data.data() + static_cast<std::size_t>(g) * cout_g * krows,
                            dout_g.data(), dcol.data(), krows, cout_g, static_cast<int>(ncols));
            detail::col2im_group(dcol.data(), B, C, H, W, g * cin_g, cin_g, geom.kh, geom.kw,
                                 geom.sh, geom.sw, geom.ph, geom.pw, geom.dh, geom.dw, Ho, Wo,
                                 ix->grad.data());
          }
          if (ib && ib->requires_grad)
            for (int oc = 0; oc < cout_g; ++oc) {
              double acc = 0.0;
              const double* src = dout_g.data() + static_cast<std::size_t>(oc) * ncols;
              for (std::size_t i = 0; i < ncols; ++i) acc += src[i];
              ib->grad[static_cast<std::size_t>(g) * cout_g + oc] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNorm2d {
  int channels = 0;
  Tensor weight;  // per-channel affine scale
  Tensor bias;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(int C, bool affine_trainable)
      : channels(C),
        weight(Tensor::full({C}, 1.0, affine_trainable)),
        bias(Tensor::zeros({C}, affine_trainable)),
        running_mean(C, 0.0),
        running_var(C, 1.0) {}
};

inline Tensor batchnorm2d(const Tensor& x, BatchNorm2d& bn, bool train) {
  if (x.rank() != 4) tensor_error("batchnorm: input must be NCHW, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != bn.channels)
    tensor_error("batchnorm: input has " + std::to_string(C) + " channels, state has " +
                 std::to_string(bn.channels));
  const std::size_t spatial = static_cast<std::size_t>(H) * W;
  const std::size_t n_per_c = static_cast<std::size_t>(B) * spatial;
  const double* px = x.data();
  const double* pw = bn.weight.data();
  const double* pb = bn.bias.data();

  std::vector<double> mean_c(C), inv_std(C);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  if (train) {
    for (int c = 0; c < C; ++c) {
      double mu = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* src = px + (static_cast<std::size_t>(b) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) mu += src[i];
      }
      mu /= static_cast<double>(n_per_c);
      double var = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* src = px + (static_cast<std::size_t>(b) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = src[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(n_per_c);
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + bn.eps);
      bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mu;
      const double unbiased =
          n_per_c > 1 ? var * static_cast<double>(n_per_c) / static_cast<double>(n_per_c - 1) : var;
      bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean_c[c] = bn.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(bn.running_var[c] + bn.eps);
    }
  }

  std::vector<double> out(x.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xh = (px[base + i] - mean_c[c]) * inv_std[c];
        (*xhat)[base + i] = xh;
        out[base + i] = pw[c] * xh + pb[c];
      }
    }

  auto ix = x.handle();
  auto iw = bn.weight.handle();
  auto ib = bn.bias.handle();
  auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
  return make_node(
      x.shape(), std::move(out), {x, bn.weight, bn.bias},
      [ix, iw, ib, xhat, istd, B, C, spatial, n_per_c, train](const TensorImpl& self) {
        for (int c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int b = 0; b < B; ++b) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_dy += self.grad[base + i];
              sum_dy_xhat += self.grad[base + i] * (*xhat)[base + i];
            }
          }
          if (iw->requires_grad) {
            iw->ensure_grad();
            iw->grad[c] += sum_dy_xhat;
          }
          if (ib->requires_grad) {
            ib->ensure_grad();
            ib->grad[c] += sum_dy;
          }
          if (ix->requires_grad) {
            ix->ensure_grad();
            const double w = iw->data[c];
            const double s = (*istd)[c];
            if (train) {
              const double m_dy = sum_dy / static_cast<double>(n_per_c);
              const double m_dy_xhat = sum_dy_xhat / static_cast<double>(n_per_c);
              for (int b = 0; b < B; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * C + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i)
                  ix->grad[base + i] +=
                      w * s * (self.grad[base + i] - m_dy - (*xhat)[base + i] * m_dy_xhat);
              }
            } else {
              for (int b = 0; b < B; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * C + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) ix->grad[base + i] += w * s * self.grad[base + i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Average pooling; padding cells are excluded from the divisor.
inline Tensor avg_pool2d(const Tensor& x, int k, int stride, int pad) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) tensor_error("avg_pool2d: empty output for input " + shape_str(x.shape()));
  std::vector<double> out(static_cast<std::size_t>(B) * C * Ho * Wo);
  auto counts = std::make_shared<std::vector<int>>(static_cast<std::size_t>(Ho) * Wo);
  const double* px = x.data();
  for (int oh = 0; oh < Ho; ++oh)
    for (int ow = 0; ow < Wo; ++ow) {
      int cnt = 0;
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          const int ih = oh * stride - pad + ki, iw = ow * stride - pad + kj;
          if (ih >= 0 && ih < H && iw >= 0 && iw < W) ++cnt;
        }
      (*counts)[static_cast<std::size_t>(oh) * Wo + ow] = cnt;
    }
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* src = px + (static_cast<std::size_t>(b) * C + c) * H * W;
      double* dst = out.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (int ki = 0; ki < k; ++ki) {
            const int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int iw = ow * stride - pad + kj;
              if (iw >= 0 && iw < W) acc += src[static_cast<std::size_t>(ih) * W + iw];
            }
          }
          dst[static_cast<std::size_t>(oh) * Wo + ow] =
              acc / (*counts)[static_cast<std::size_t>(oh) * Wo + ow];
        }
    }
  auto ixh = x.handle();
  return make_node({B, C, Ho, Wo}, std::move(out), {x},
                   [ixh, counts, B, C, H, W, Ho, Wo, k, stride, pad](const TensorImpl& self) {
                     if (!ixh->requires_grad) return;
                     ixh->ensure_grad();
                     for (int b = 0; b < B; ++b)
                       for (int c = 0; c < C; ++c) {
                         double* dx = ixh->grad.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
                         const double* gy = self.grad.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
                         for (int oh = 0; oh < Ho; ++oh)
                           for (int ow = 0; ow < Wo; ++ow) {
                             const double g = gy[static_cast<std::size_t>(oh) * Wo + ow] /
                                              (*counts)[static_cast<std::size_t>(oh) * Wo + ow];
                             for (int ki = 0; ki < k; ++ki) {
                               const int ih = oh * stride - pad + ki;
                               if (ih < 0 || ih >= H) continue;
                               for (int kj = 0; kj < k; ++kj) {
                                 const int iw = ow * stride - pad + kj;
                                 if (iw >= 0 && iw < W) dx[static_cast<std::size_t>(ih) * W + iw] += g;
                               }
                             }
                           }
                       }
                   });
}

// Max pooling; the subgradient goes to the first maximal element in window
// scan order.
inline Tensor max_pool2d(const Tensor& x, int k, int stride, int pad) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) tensor_error("max_pool2d: empty output for input " + shape_str(x.shape()));
  std::vector<double> out(static_cast<std::size_t>(B) * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const double* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t plane = (static_cast<std::size_t>(b) * C + c) * H * W;
      double* dst = out.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      std::size_t* amx = argmax->data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int ki = 0; ki < k; ++ki) {
            const int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int iw = ow * stride - pad + kj;
              if (iw < 0 || iw >= W) continue;
              const double v = px[plane + static_cast<std::size_t>(ih) * W + iw];
              if (v > best) {
                best = v;
                best_idx = plane + static_cast<std::size_t>(ih) * W + iw;
              }
            }
          }
          dst[static_cast<std::size_t>(oh) * Wo + ow] = best;
          amx[static_cast<std::size_t>(oh) * Wo + ow] = best_idx;
        }
    }
  auto ixh = x.handle();
  return make_node({B, C, Ho, Wo}, std::move(out), {x}, [ixh, argmax](const TensorImpl& self) {
    if (!ixh->requires_grad) return;
    ixh->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ixh->grad[(*argmax)[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Head layers and channel shuffle
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(const Tensor& x) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t spatial = static_cast<std::size_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(B) * C);
  const double* px = x.data();
  for (std::size_t bc = 0; bc < out.size(); ++bc) {
    double acc = 0.0;
    const double* src = px + bc * spatial;
    for (std::size_t i = 0; i < spatial; ++i) acc += src[i];
    out[bc] = acc / static_cast<double>(spatial);
  }
  auto ixh = x.handle();
  return make_node({B, C}, std::move(out), {x}, [ixh, spatial](const TensorImpl& self) {
    if (!ixh->requires_grad) return;
    ixh->ensure_grad();
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t bc = 0; bc < self.grad.size(); ++bc) {
      double* dst = ixh->grad.data() + bc * spatial;
      const double g = self.grad[bc] * inv;
      for (std::size_t i = 0; i < spatial; ++i) dst[i] += g;
    }
  });
}

// y = x * W^T + b with x [B,F], W [K,F], b [K].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    tensor_error("linear: shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int B = x.dim(0), F = x.dim(1), K = w.dim(0);
  std::vector<double> out(static_cast<std::size_t>(B) * K, 0.0);
  detail::gemm_nt(x.data(), w.data(), out.data(), B, F, K);
  if (b.defined()) {
    const double* pb = b.data();
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < K; ++j) out[static_cast<std::size_t>(i) * K + j] += pb[j];
  }
  auto ixh = x.handle();
  auto iwh = w.handle();
  auto ibh = b.defined() ? b.handle() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_node({B, K}, std::move(out), inputs, [ixh, iwh, ibh, B, F, K](const TensorImpl& self) {
    if (ixh->requires_grad) {
      ixh->ensure_grad();
      detail::gemm_nn(self.grad.data(), iwh->data.data(), ixh->grad.data(), B, K, F);
    }
    if (iwh->requires_grad) {
      iwh->ensure_grad();
      detail::gemm_tn(self.grad.data(), ixh->data.data(), iwh->grad.data(), K, B, F);
    }
    if (ibh && ibh->requires_grad) {
      ibh->ensure_grad();
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < K; ++j) ibh->grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * K + j];
    }
  });
}

// Global average pool followed by an affine map to class logits.
inline Tensor classifier_head(const Tensor& features, const Tensor& w, const Tensor& b) {
  return linear(global_avg_pool(features), w, b);
}

// Gathers the given channel indices into a new tensor; gradient scatters
// back into the selected channels.
inline Tensor select_channels(const Tensor& x, const std::vector<int>& indices) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (int c : indices)
    if (c < 0 || c >= C) tensor_error("select_channels: index " + std::to_string(c) + " out of range");
  const std::size_t spatial = static_cast<std::size_t>(H) * W;
  const int K = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(B) * K * spatial);
  const double* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k)
      std::copy(px + (static_cast<std::size_t>(b) * C + indices[static_cast<std::size_t>(k)]) * spatial,
                px + (static_cast<std::size_t>(b) * C + indices[static_cast<std::size_t>(k)] + 1) * spatial,
                out.data() + (static_cast<std::size_t>(b) * K + k) * spatial);
  auto ixh = x.handle();
  auto idx = std::make_shared<std::vector<int>>(indices);
  return make_node({B, K, H, W}, std::move(out), {x}, [ixh, idx, B, C, K, spatial](const TensorImpl& self) {
    if (!ixh->requires_grad) return;
    ixh->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) {
        const double* gsrc = self.grad.data() + (static_cast<std::size_t>(b) * K + k) * spatial;
        double* gdst = ixh->grad.data() +
                       (static_cast<std::size_t>(b) * C + (*idx)[static_cast<std::size_t>(k)]) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) gdst[i] += gsrc[i];
      }
  });
}

// Interleaves channels across `groups` blocks: view [G, C/G], transpose,
// flatten. Applying the shuffle with C/G groups afterwards restores order.
inline Tensor channel_shuffle(const Tensor& x, int groups) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (groups < 1 || C % groups != 0)
    tensor_error("channel_shuffle: " + std::to_string(C) + " channels not divisible by " +
                 std::to_string(groups) + " groups");
  const int cpg = C / groups;
  const std::size_t spatial = static_cast<std::size_t>(H) * W;
  std::vector<double> out(x.size());
  auto src_of = std::make_shared<std::vector<int>>(C);
  for (int g = 0; g < groups; ++g)
    for (int j = 0; j < cpg; ++j) (*src_of)[static_cast<std::size_t>(j) * groups + g] = g * cpg + j;
  const double* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      std::copy(px + (static_cast<std::size_t>(b) * C + (*src_of)[c]) * spatial,
                px + (static_cast<std::size_t>(b) * C + (*src_of)[c] + 1) * spatial,
                out.data() + (static_cast<std::size_t>(b) * C + c) * spatial);
  auto ixh = x.handle();
  return make_node(x.shape(), std::move(out), {x}, [ixh, src_of, B, C, spatial](const TensorImpl& self) {
    if (!ixh->requires_grad) return;
    ixh->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* gsrc = self.grad.data() + (static_cast<std::size_t>(b) * C + c) * spatial;
        double* gdst = ixh->grad.data() + (static_cast<std::size_t>(b) * C + (*src_of)[c]) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) gdst[i] += gsrc[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Candidate operations of the search space
// ---------------------------------------------------------------------------

enum class OpKind {
  zero,
  skip_connect,
  avg_pool_3x3,
  max_pool_3x3,
  sep_conv_3x3,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
};

constexpr int kNumOps = 8;

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::zero: return "zero";
    case OpKind::skip_connect: return "skip_connect";
    case OpKind::avg_pool_3x3: return "avg_pool_3x3";
    case OpKind::max_pool_3x3: return "max_pool_3x3";
    case OpKind::sep_conv_3x3: return "sep_conv_3x3";
    case OpKind::sep_conv_5x5: return "sep_conv_5x5";
    case OpKind::dil_conv_3x3: return "dil_conv_3x3";
    case OpKind::dil_conv_5x5: return "dil_conv_5x5";
  }
  return "?";
}

inline OpKind op_kind_from_name(const std::string& name) {
  for (int i = 0; i < kNumOps; ++i)
    if (name == op_kind_name(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
  tensor_error("unknown operation kind: " + name);
}

// Largest group count <= requested that divides both channel counts.
inline int clamp_groups(int requested, int cin, int cout) {
  const int g = std::gcd(cin, cout);
  for (int d = std::min(requested, g); d >= 1; --d)
    if (g % d == 0) return d;
  return 1;
}

struct Module {
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual void collect_params(std::vector<Tensor>& out) { (void)out; }
};

using ModulePtr = std::shared_ptr<Module>;

struct Identity final : Module {
  Tensor forward(const Tensor& x, bool) override { return x; }
};

struct ZeroOp final : Module {
  int stride;
  explicit ZeroOp(int s) : stride(s) {}
  Tensor forward(const Tensor& x, bool) override {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (stride == 1) return Tensor::zeros({B, C, H, W});
    return Tensor::zeros({B, C, (H - 1) / stride + 1, (W - 1) / stride + 1});
  }
};

struct ConvParams {
  static void collect(const Conv2dSpec& s, std::vector<Tensor>& out) {
    out.push_back(s.weight);
    if (s.bias.defined()) out.push_back(s.bias);
  }
  static void collect(const BatchNorm2d& bn, std::vector<Tensor>& out) {
    if (bn.weight.requires_grad()) {
      out.push_back(bn.weight);
      out.push_back(bn.bias);
    }
  }
};

struct ReluConvBn final : Module {
  Conv2dSpec conv;
  BatchNorm2d bn;
  ReluConvBn(int cin, int cout, int k, int stride, int pad, int groups, bool affine, RngStream& rng)
      : conv(make_conv2d(cin, cout, k, stride, pad, 1, groups, false, rng)), bn(cout, affine) {}
  Tensor forward(const Tensor& x, bool train) override {
    return batchnorm2d(conv2d(relu(x), conv), bn, train);
  }
  void collect_params(std::vector<Tensor>& out) override {
    ConvParams::collect(conv, out);
    ConvParams::collect(bn, out);
  }
};

// Two stacked relu -> depthwise -> pointwise -> batchnorm blocks.
struct SepConv final : Module {
  Conv2dSpec dw1, pw1, dw2, pw2;
  BatchNorm2d bn1, bn2;
  SepConv(int c, int k, int stride, int pw_groups, bool affine, RngStream& rng)
      : dw1(make_conv2d(c, c, k, stride, k / 2, 1, c, false, rng)),
        pw1(make_conv2d(c, c, 1, 1, 0, 1, clamp_groups(pw_groups, c, c), false, rng)),
        dw2(make_conv2d(c, c, k, 1, k / 2, 1, c, false, rng)),
        pw2(make_conv2d(c, c, 1, 1, 0, 1, clamp_groups(pw_groups, c, c), false, rng)),
        bn1(c, affine),
        bn2(c, affine) {}
  Tensor forward(const Tensor& x, bool train) override {
    Tensor h = batchnorm2d(conv2d(conv2d(relu(x), dw1), pw1), bn1, train);
    return batchnorm2d(conv2d(conv2d(relu(h), dw2), pw2), bn2, train);
  }
  void collect_params(std::vector<Tensor>& out) override {
    ConvParams::collect(dw1, out);
    ConvParams::collect(pw1, out);
    ConvParams::collect(bn1, out);
    ConvParams::collect(dw2, out);
    ConvParams::collect(pw2, out);
    ConvParams::collect(bn2, out);
  }
};

// relu -> depthwise (dilation 2) -> pointwise -> batchnorm.
struct DilConv final : Module {
  Conv2dSpec dw, pw;
  BatchNorm2d bn;
  DilConv(int c, int k, int stride, int pw_groups, bool affine, RngStream& rng)
      : dw(make_conv2d(c, c, k, stride, k - 1, 2, c, false, rng)),
        pw(make_conv2d(c, c, 1, 1, 0, 1, clamp_groups(pw_groups, c, c), false, rng)),
        bn(c, affine) {}
  Tensor forward(const Tensor& x, bool train) override {
    return batchnorm2d(conv2d(conv2d(relu(x), dw), pw), bn, train);
  }
  void collect_params(std::vector<Tensor>& out) override {
    ConvParams::collect(dw, out);
    ConvParams::collect(pw, out);
    ConvParams::collect(bn, out);
  }
};

struct PoolBn final : Module {
  bool is_max;
  int stride;
  BatchNorm2d bn;
  PoolBn(bool max_pool, int c, int stride_, bool affine) : is_max(max_pool), stride(stride_), bn(c, affine) {}
  Tensor forward(const Tensor& x, bool train) override {
    Tensor p = is_max ? max_pool2d(x, 3, stride, 1) : avg_pool2d(x, 3, stride, 1);
    return batchnorm2d(p, bn, train);
  }
  void collect_params(std::vector<Tensor>& out) override { ConvParams::collect(bn, out); }
};

// Stride-2 identity: two offset 1x1 stride-2 convolutions concatenated along
// channels, then batchnorm. Requires even spatial extent.
struct FactorizedReduce final : Module {
  Conv2dSpec conv_a, conv_b;
  bool has_b;
  BatchNorm2d bn;
  FactorizedReduce(int cin, int cout, int conv_groups, bool affine, RngStream& rng)
      : conv_a(make_conv2d(cin, cout - cout / 2, 1, 2, 0, 1,
                           clamp_groups(conv_groups, cin, cout - cout / 2), false, rng)),
        has_b(cout / 2 > 0),
        bn(cout, affine) {
    if (has_b)
      conv_b = make_conv2d(cin, cout / 2, 1, 2, 0, 1, clamp_groups(conv_groups, cin, cout / 2),
                           false, rng);
  }
  Tensor forward(const Tensor& x, bool train) override {
    Tensor r = relu(x);
    Tensor a = conv2d(r, conv_a);
    if (!has_b) return batchnorm2d(a, bn, train);
    const int h = r.dim(2), w = r.dim(3);
    Tensor shifted = narrow(narrow(r, 2, 1, h - 1), 3, 1, w - 1);
    Tensor b = conv2d(shifted, conv_b);
    return batchnorm2d(concat({a, b}, 1), bn, train);
  }
  void collect_params(std::vector<Tensor>& out) override {
    ConvParams::collect(conv_a, out);
    if (has_b) ConvParams::collect(conv_b, out);
    ConvParams::collect(bn, out);
  }
};

// Builds one of the 8 search-space candidates for a given channel count and
// stride. conv_groups > 1 swaps the pointwise/reduce convolutions for grouped
// ones (clamped to a divisor of the channel count).
inline ModulePtr make_candidate(OpKind kind, int channels, int stride, int conv_groups, bool affine,
                                RngStream& rng) {
  switch (kind) {
    case OpKind::zero: return std::make_shared<ZeroOp>(stride);
    case OpKind::skip_connect:
      if (stride == 1) return std::make_shared<Identity>();
      return std::make_shared<FactorizedReduce>(channels, channels, conv_groups, affine, rng);
    case OpKind::avg_pool_3x3: return std::make_shared<PoolBn>(false, channels, stride, affine);
    case OpKind::max_pool_3x3: return std::make_shared<PoolBn>(true, channels, stride, affine);
    case OpKind::sep_conv_3x3: return std::make_shared<SepConv>(channels, 3, stride, conv_groups, affine, rng);
    case OpKind::sep_conv_5x5: return std::make_shared<SepConv>(channels, 5, stride, conv_groups, affine, rng);
    case OpKind::dil_conv_3x3: return std::make_shared<DilConv>(channels, 3, stride, conv_groups, affine, rng);
    case OpKind::dil_conv_5x5: return std::make_shared<DilConv>(channels, 5, stride, conv_groups, affine, rng);
  }
  tensor_error("unknown operation kind");
}

}  // namespace cellsearch
