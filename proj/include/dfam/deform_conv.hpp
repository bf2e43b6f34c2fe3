#pragma once

#include <cmath>
#include <vector>

#include "dfam/ops.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

// --------------------------------------------------------------------------
// Bilinear interpolation with a zero border: grid values outside
// [0,H-1]x[0,W-1] contribute 0, so the sampled value is continuous and
// piecewise linear in (y,x) and fades to 0 past the image edge.

inline double bilinear_at(const double* plane, int H, int W, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double dy = y - y0, dx = x - x0;
  double v = 0.0;
  for (int i = 0; i < 2; ++i) {
    const int yy = y0 + i;
    if (yy < 0 || yy >= H) continue;
    const double wy = i ? dy : 1.0 - dy;
    for (int j = 0; j < 2; ++j) {
      const int xx = x0 + j;
      if (xx < 0 || xx >= W) continue;
      const double wx = j ? dx : 1.0 - dx;
      v += wy * wx * plane[static_cast<int64_t>(yy) * W + xx];
    }
  }
  return v;
}

inline double bilinear_sample(const Tensor& plane, double y, double x) {
  require_rank(plane, 2, "bilinear_sample plane");
  return bilinear_at(plane.data(), plane.dim(0), plane.dim(1), y, x);
}

// Scatter d(loss)/d(sample) into the plane gradient and return the coordinate
// gradients (d/dy, d/dx).
inline void bilinear_backward(const double* plane, double* grad_plane, int H, int W, double y,
                              double x, double g, double& gy, double& gx) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double dy = y - y0, dx = x - x0;
  for (int i = 0; i < 2; ++i) {
    const int yy = y0 + i;
    if (yy < 0 || yy >= H) continue;
    const double wy = i ? dy : 1.0 - dy;
    const double dwy = i ? 1.0 : -1.0;
    for (int j = 0; j < 2; ++j) {
      const int xx = x0 + j;
      if (xx < 0 || xx >= W) continue;
      const double wx = j ? dx : 1.0 - dx;
      const double dwx = j ? 1.0 : -1.0;
      const double val = plane[static_cast<int64_t>(yy) * W + xx];
      if (grad_plane) grad_plane[static_cast<int64_t>(yy) * W + xx] += g * wy * wx;
      gy += g * dwy * wx * val;
      gx += g * wy * dwx * val;
    }
  }
}

// --------------------------------------------------------------------------
// Deformable convolution: the main branch plus a parallel standard convolution
// predicting per-tap 2-D offsets. Offset channel layout is tap-major pairs,
// dy before dx: channel 2n is dy and 2n+1 is dx for tap n = ky*kW + kx.

struct DeformConvParams {
  ConvParams main;
  ConvParams offset_pred;  // out-channels must be 2*kH*kW of main

  void validate() const {
    const int taps = main.kh() * main.kw();
    if (offset_pred.out_channels() != 2 * taps)
      throw ShapeError("deform_conv: offset predictor out-channels " +
                       std::to_string(offset_pred.out_channels()) + " != 2*kH*kW = " +
                       std::to_string(2 * taps));
  }
};

// Zero-initialized predictor so a fresh deformable layer starts as an exact
// standard convolution.
inline DeformConvParams make_deform_conv(int out_ch, int in_ch, int k, int stride, int pad,
                                         Rng& rng, double weight_std) {
  DeformConvParams p;
  p.main.weight = Tensor::randn({out_ch, in_ch, k, k}, rng, weight_std);
  p.main.bias = Tensor::zeros({out_ch});
  p.main.stride = stride;
  p.main.padding = pad;
  p.offset_pred.weight = Tensor::zeros({2 * k * k, in_ch, k, k});
  p.offset_pred.bias = Tensor::zeros({2 * k * k});
  p.offset_pred.stride = stride;
  p.offset_pred.padding = pad;
  return p;
}

inline Tensor predict_offsets(const Tensor& input, const DeformConvParams& params) {
  params.validate();
  return conv2d(input, params.offset_pred);
}

// Offset-augmented convolution given an explicit offset field.
inline Tensor deform_conv2d_with_offsets(const Tensor& input, const ConvParams& main,
                                         const Tensor& offsets) {
  require_rank(input, 4, "deform_conv2d input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (C != main.in_channels())
    throw ShapeError("deform_conv2d: input channels " + std::to_string(C) +
                     " != weight in-channels " + std::to_string(main.in_channels()));
  const int O = main.out_channels(), kH = main.kh(), kW = main.kw();
  const int Ho = conv_out_dim(H, kH, main.stride, main.padding, main.dilation);
  const int Wo = conv_out_dim(W, kW, main.stride, main.padding, main.dilation);
  if (offsets.dim(1) != 2 * kH * kW || offsets.dim(2) != Ho || offsets.dim(3) != Wo)
    throw ShapeError("deform_conv2d: offset field shape " + Tensor::shape_str(offsets.shape()) +
                     " does not match [B," + std::to_string(2 * kH * kW) + "," +
                     std::to_string(Ho) + "," + std::to_string(Wo) + "]");

  Tensor out({B, O, Ho, Wo});
  std::vector<double> sampled(static_cast<size_t>(C));
  for (int b = 0; b < B; ++b) {
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        for (int o = 0; o < O; ++o) out.at4(b, o, y, x) = main.bias[o];
        for (int ky = 0; ky < kH; ++ky) {
          for (int kx = 0; kx < kW; ++kx) {
            const int n = ky * kW + kx;
            const double py =
                y * main.stride - main.padding + ky * main.dilation + offsets.at4(b, 2 * n, y, x);
            const double px = x * main.stride - main.padding + kx * main.dilation +
                              offsets.at4(b, 2 * n + 1, y, x);
            for (int c = 0; c < C; ++c)
              sampled[static_cast<size_t>(c)] =
                  bilinear_at(input.data() + input.index4(b, c, 0, 0), H, W, py, px);
            for (int o = 0; o < O; ++o) {
              const double* w = main.weight.data() + main.weight.index4(o, 0, ky, kx);
              double acc = 0.0;
              const int wstride = kH * kW;
              for (int c = 0; c < C; ++c) acc += w[static_cast<int64_t>(c) * wstride] * sampled[static_cast<size_t>(c)];
              out.at4(b, o, y, x) += acc;
            }
          }
        }
      }
    }
  }
  if (precision_mode() == Precision::F32)
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = quantize(out[i]);
  return out;
}

// Full forward: offsets are produced internally from the same input.
inline Tensor deform_conv2d(const Tensor& input, const DeformConvParams& params) {
  return deform_conv2d_with_offsets(input, params.main, predict_offsets(input, params));
}

// Backward through the main branch only (explicit offsets). Returns grad wrt
// input; accumulates weight/bias grads and offset grads.
inline Tensor deform_conv2d_with_offsets_backward(const Tensor& input, const ConvParams& main,
                                                  const Tensor& offsets, const Tensor& grad_out,
                                                  Tensor& grad_weight, Tensor& grad_bias,
                                                  Tensor& grad_offsets) {
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int O = main.out_channels(), kH = main.kh(), kW = main.kw();
  const int Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  Tensor grad_in(input.shape());
  std::vector<double> sampled(static_cast<size_t>(C));
  std::vector<double> gsample(static_cast<size_t>(C));
  for (int b = 0; b < B; ++b) {
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        for (int o = 0; o < O; ++o) grad_bias[o] += grad_out.at4(b, o, y, x);
        for (int ky = 0; ky < kH; ++ky) {
          for (int kx = 0; kx < kW; ++kx) {
            const int n = ky * kW + kx;
            const double py =
                y * main.stride - main.padding + ky * main.dilation + offsets.at4(b, 2 * n, y, x);
            const double px = x * main.stride - main.padding + kx * main.dilation +
                              offsets.at4(b, 2 * n + 1, y, x);
            for (int c = 0; c < C; ++c) {
              sampled[static_cast<size_t>(c)] =
                  bilinear_at(input.data() + input.index4(b, c, 0, 0), H, W, py, px);
              gsample[static_cast<size_t>(c)] = 0.0;
            }
            const int wstride = kH * kW;
            for (int o = 0; o < O; ++o) {
              const double go = grad_out.at4(b, o, y, x);
              const double* w = main.weight.data() + main.weight.index4(o, 0, ky, kx);
              double* gw = grad_weight.data() + grad_weight.index4(o, 0, ky, kx);
              for (int c = 0; c < C; ++c) {
                gw[static_cast<int64_t>(c) * wstride] += go * sampled[static_cast<size_t>(c)];
                gsample[static_cast<size_t>(c)] += go * w[static_cast<int64_t>(c) * wstride];
              }
            }
            double gy = 0.0, gx = 0.0;
            for (int c = 0; c < C; ++c)
              bilinear_backward(input.data() + input.index4(b, c, 0, 0),
                                grad_in.data() + grad_in.index4(b, c, 0, 0), H, W, py, px,
                                gsample[static_cast<size_t>(c)], gy, gx);
            grad_offsets.at4(b, 2 * n, y, x) += gy;
            grad_offsets.at4(b, 2 * n + 1, y, x) += gx;
          }
        }
      }
    }
  }
  return grad_in;
}

// Full backward: main branch plus the offset-predictor branch; both paths'
// input gradients are summed.
inline Tensor deform_conv2d_backward(const Tensor& input, const DeformConvParams& params,
                                     const Tensor& offsets, const Tensor& grad_out,
                                     Tensor& grad_main_w, Tensor& grad_main_b,
                                     Tensor& grad_off_w, Tensor& grad_off_b) {
  Tensor grad_offsets(offsets.shape());
  Tensor grad_in = deform_conv2d_with_offsets_backward(input, params.main, offsets, grad_out,
                                                       grad_main_w, grad_main_b, grad_offsets);
  Tensor grad_in_pred =
      conv2d_backward(input, params.offset_pred, grad_offsets, grad_off_w, grad_off_b);
  grad_in.add_(grad_in_pred);
  return grad_in;
}

}  // namespace dfam
