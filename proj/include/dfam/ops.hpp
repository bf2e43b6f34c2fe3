#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dfam/tensor.hpp"

namespace dfam {

// --------------------------------------------------------------------------
// Standard convolution

struct ConvParams {
  Tensor weight;  // [out_ch, in_ch, kH, kW]
  Tensor bias;    // [out_ch]
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  int out_channels() const { return weight.dim(0); }
  int in_channels() const { return weight.dim(1); }
  int kh() const { return weight.dim(2); }
  int kw() const { return weight.dim(3); }
};

inline int conv_out_dim(int in, int k, int stride, int pad, int dilation) {
  return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
  require_rank(input, 4, "conv2d input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (C != p.in_channels())
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " != weight in-channels " +
                     std::to_string(p.in_channels()));
  const int O = p.out_channels(), kH = p.kh(), kW = p.kw();
  const int Ho = conv_out_dim(H, kH, p.stride, p.padding, p.dilation);
  const int Wo = conv_out_dim(W, kW, p.stride, p.padding, p.dilation);
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: output spatial dims < 1");

  Tensor out({B, O, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < O; ++o) {
      double* op = out.data() + out.index4(b, o, 0, 0);
      const double bias = p.bias[o];
      for (int i = 0; i < Ho * Wo; ++i) op[i] = bias;
      for (int c = 0; c < C; ++c) {
        const double* ip = input.data() + input.index4(b, c, 0, 0);
        for (int ky = 0; ky < kH; ++ky) {
          for (int kx = 0; kx < kW; ++kx) {
            const double w = p.weight.at4(o, c, ky, kx);
            if (w == 0.0) continue;
            for (int y = 0; y < Ho; ++y) {
              const int iy = y * p.stride - p.padding + ky * p.dilation;
              if (iy < 0 || iy >= H) continue;
              double* orow = op + static_cast<int64_t>(y) * Wo;
              const double* irow = ip + static_cast<int64_t>(iy) * W;
              for (int x = 0; x < Wo; ++x) {
                const int ix = x * p.stride - p.padding + kx * p.dilation;
                if (ix < 0 || ix >= W) continue;
                orow[x] += w * irow[ix];
              }
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

// Accumulates into grad_weight/grad_bias; returns grad wrt input.
inline Tensor conv2d_backward(const Tensor& input, const ConvParams& p, const Tensor& grad_out,
                              Tensor& grad_weight, Tensor& grad_bias) {
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int O = p.out_channels(), kH = p.kh(), kW = p.kw();
  const int Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  Tensor grad_in(input.shape());
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < O; ++o) {
      const double* gp = grad_out.data() + grad_out.index4(b, o, 0, 0);
      double gb = 0.0;
      for (int i = 0; i < Ho * Wo; ++i) gb += gp[i];
      grad_bias[o] += gb;
      for (int c = 0; c < C; ++c) {
        const double* ip = input.data() + input.index4(b, c, 0, 0);
        double* gip = grad_in.data() + grad_in.index4(b, c, 0, 0);
        for (int ky = 0; ky < kH; ++ky) {
          for (int kx = 0; kx < kW; ++kx) {
            const double w = p.weight.at4(o, c, ky, kx);
            double gw = 0.0;
            for (int y = 0; y < Ho; ++y) {
              const int iy = y * p.stride - p.padding + ky * p.dilation;
              if (iy < 0 || iy >= H) continue;
              const double* grow = gp + static_cast<int64_t>(y) * Wo;
              const double* irow = ip + static_cast<int64_t>(iy) * W;
              double* girow = gip + static_cast<int64_t>(iy) * W;
              for (int x = 0; x < Wo; ++x) {
                const int ix = x * p.stride - p.padding + kx * p.dilation;
                if (ix < 0 || ix >= W) continue;
                gw += grow[x] * irow[ix];
                girow[ix] += grow[x] * w;
              }
            }
            grad_weight.at4(o, c, ky, kx) += gw;
          }
        }
      }
    }
  }
  return grad_in;
}

// --------------------------------------------------------------------------
// Linear (rows x weight^T + bias); weight is [out, in]

inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear input");
  const int N = input.dim(0), I = input.dim(1);
  const int O = weight.dim(0);
  if (weight.dim(1) != I)
    throw ShapeError("linear: input dim " + std::to_string(I) + " != weight in-dim " +
                     std::to_string(weight.dim(1)));
  Tensor out({N, O});
  for (int n = 0; n < N; ++n) {
    const double* in = input.data() + static_cast<int64_t>(n) * I;
    double* op = out.data() + static_cast<int64_t>(n) * O;
    for (int o = 0; o < O; ++o) {
      const double* w = weight.data() + static_cast<int64_t>(o) * I;
      double acc = bias[o];
      for (int i = 0; i < I; ++i) acc += in[i] * w[i];
      op[o] = quantize(acc);
    }
  }
  return out;
}

inline Tensor linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                              Tensor& grad_weight, Tensor& grad_bias) {
  const int N = input.dim(0), I = input.dim(1), O = weight.dim(0);
  Tensor grad_in({N, I});
  for (int n = 0; n < N; ++n) {
    const double* in = input.data() + static_cast<int64_t>(n) * I;
    const double* g = grad_out.data() + static_cast<int64_t>(n) * O;
    double* gi = grad_in.data() + static_cast<int64_t>(n) * I;
    for (int o = 0; o < O; ++o) {
      const double go = g[o];
      grad_bias[o] += go;
      const double* w = weight.data() + static_cast<int64_t>(o) * I;
      double* gw = grad_weight.data() + static_cast<int64_t>(o) * I;
      for (int i = 0; i < I; ++i) {
        gw[i] += go * in[i];
        gi[i] += go * w[i];
      }
    }
  }
  return grad_in;
}

// --------------------------------------------------------------------------
// Elementwise

inline double sigmoid_scalar(double v) {
  if (v >= 0) {
    const double e = std::exp(-v);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& input) {
  Tensor out(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) out[i] = quantize(sigmoid_scalar(input[i]));
  return out;
}

// grad wrt pre-activation, given the sigmoid output
inline Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  Tensor grad_in(output.shape());
  for (int64_t i = 0; i < output.numel(); ++i)
    grad_in[i] = grad_out[i] * output[i] * (1.0 - output[i]);
  return grad_in;
}

inline Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) out[i] = input[i] > 0 ? input[i] : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  Tensor grad_in(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) grad_in[i] = input[i] > 0 ? grad_out[i] : 0.0;
  return grad_in;
}

// --------------------------------------------------------------------------
// Softmax over an arbitrary axis, max-subtracted

inline Tensor softmax(const Tensor& input, int axis) {
  if (axis < 0) axis += input.rank();
  const auto& shape = input.shape();
  int64_t outer = 1, inner = 1;
  const int n = shape[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < input.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
  Tensor out(input.shape());
  for (int64_t ou = 0; ou < outer; ++ou) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = ou * n * inner + in;
      double mx = input[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, input[base + k * inner]);
      double sum = 0.0;
      for (int k = 0; k < n; ++k) {
        const double e = std::exp(input[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (int k = 0; k < n; ++k) out[base + k * inner] = quantize(out[base + k * inner] / sum);
    }
  }
  return out;
}

inline Tensor softmax_backward(const Tensor& output, const Tensor& grad_out, int axis) {
  if (axis < 0) axis += output.rank();
  const auto& shape = output.shape();
  int64_t outer = 1, inner = 1;
  const int n = shape[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < output.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
  Tensor grad_in(output.shape());
  for (int64_t ou = 0; ou < outer; ++ou) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = ou * n * inner + in;
      double dot = 0.0;
      for (int k = 0; k < n; ++k) dot += output[base + k * inner] * grad_out[base + k * inner];
      for (int k = 0; k < n; ++k)
        grad_in[base + k * inner] = output[base + k * inner] * (grad_out[base + k * inner] - dot);
    }
  }
  return grad_in;
}

// --------------------------------------------------------------------------
// Pooling reductions for the attention branches

enum class PoolMode { Avg, Max };

// [B,C,H,W] -> [B,1,H,W]; for Max, argmax stores the winning channel per pixel
// (ties broken by lowest channel index).
inline Tensor pool_channel(const Tensor& input, PoolMode mode, std::vector<int>* argmax = nullptr) {
  require_rank(input, 4, "pool_channel input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out({B, 1, H, W});
  if (argmax) argmax->assign(static_cast<size_t>(B) * H * W, 0);
  for (int b = 0; b < B; ++b) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (mode == PoolMode::Avg) {
          double s = 0.0;
          for (int c = 0; c < C; ++c) s += input.at4(b, c, y, x);
          out.at4(b, 0, y, x) = quantize(s / C);
        } else {
          double best = input.at4(b, 0, y, x);
          int bc = 0;
          for (int c = 1; c < C; ++c) {
            const double v = input.at4(b, c, y, x);
            if (v > best) {
              best = v;
              bc = c;
            }
          }
          out.at4(b, 0, y, x) = best;
          if (argmax) (*argmax)[(static_cast<size_t>(b) * H + y) * W + x] = bc;
        }
      }
    }
  }
  return out;
}

inline Tensor pool_channel_backward(const Tensor& input, PoolMode mode, const Tensor& grad_out,
                                    const std::vector<int>& argmax) {
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor grad_in(input.shape());
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double g = grad_out.at4(b, 0, y, x);
        if (mode == PoolMode::Avg) {
          for (int c = 0; c < C; ++c) grad_in.at4(b, c, y, x) += g / C;
        } else {
          grad_in.at4(b, argmax[(static_cast<size_t>(b) * H + y) * W + x], y, x) += g;
        }
      }
  return grad_in;
}

// [B,C,H,W] -> [B,C,1,1]; Max argmax stores the winning linear pixel index.
inline Tensor pool_spatial(const Tensor& input, PoolMode mode, std::vector<int>* argmax = nullptr) {
  require_rank(input, 4, "pool_spatial input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out({B, C, 1, 1});
  if (argmax) argmax->assign(static_cast<size_t>(B) * C, 0);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* ip = input.data() + input.index4(b, c, 0, 0);
      if (mode == PoolMode::Avg) {
        double s = 0.0;
        for (int i = 0; i < H * W; ++i) s += ip[i];
        out.at4(b, c, 0, 0) = quantize(s / (H * W));
      } else {
        double best = ip[0];
        int bi = 0;
        for (int i = 1; i < H * W; ++i)
          if (ip[i] > best) {
            best = ip[i];
            bi = i;
          }
        out.at4(b, c, 0, 0) = best;
        if (argmax) (*argmax)[static_cast<size_t>(b) * C + c] = bi;
      }
    }
  }
  return out;
}

inline Tensor pool_spatial_backward(const Tensor& input, PoolMode mode, const Tensor& grad_out,
                                    const std::vector<int>& argmax) {
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor grad_in(input.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double g = grad_out.at4(b, c, 0, 0);
      double* gp = grad_in.data() + grad_in.index4(b, c, 0, 0);
      if (mode == PoolMode::Avg) {
        for (int i = 0; i < H * W; ++i) gp[i] += g / (H * W);
      } else {
        gp[argmax[static_cast<size_t>(b) * C + c]] += g;
      }
    }
  return grad_in;
}

// --------------------------------------------------------------------------
// Layer normalization over the last axis of a rank-2 tensor

struct LayerNormCache {
  std::vector<double> mean, rstd;
  Tensor normalized;  // pre-affine
};

inline Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         LayerNormCache& cache, double eps = 1e-5) {
  require_rank(input, 2, "layer_norm input");
  const int N = input.dim(0), D = input.dim(1);
  Tensor out(input.shape());
  cache.mean.resize(static_cast<size_t>(N));
  cache.rstd.resize(static_cast<size_t>(N));
  cache.normalized = Tensor(input.shape());
  for (int n = 0; n < N; ++n) {
    const double* in = input.data() + static_cast<int64_t>(n) * D;
    double mean = 0.0;
    for (int d = 0; d < D; ++d) mean += in[d];
    mean /= D;
    double var = 0.0;
    for (int d = 0; d < D; ++d) var += (in[d] - mean) * (in[d] - mean);
    var /= D;
    const double rstd = 1.0 / std::sqrt(var + eps);
    cache.mean[static_cast<size_t>(n)] = mean;
    cache.rstd[static_cast<size_t>(n)] = rstd;
    for (int d = 0; d < D; ++d) {
      const double h = (in[d] - mean) * rstd;
      cache.normalized[static_cast<int64_t>(n) * D + d] = h;
      out[static_cast<int64_t>(n) * D + d] = quantize(h * gamma[d] + beta[d]);
    }
  }
  return out;
}

inline Tensor layer_norm_backward(const Tensor& input, const Tensor& gamma,
                                  const LayerNormCache& cache, const Tensor& grad_out,
                                  Tensor& grad_gamma, Tensor& grad_beta) {
  const int N = input.dim(0), D = input.dim(1);
  Tensor grad_in(input.shape());
  for (int n = 0; n < N; ++n) {
    const int64_t base = static_cast<int64_t>(n) * D;
    const double rstd = cache.rstd[static_cast<size_t>(n)];
    double sum_g = 0.0, sum_gh = 0.0;
    for (int d = 0; d < D; ++d) {
      const double g = grad_out[base + d] * gamma[d];
      const double h = cache.normalized[base + d];
      grad_gamma[d] += grad_out[base + d] * h;
      grad_beta[d] += grad_out[base + d];
      sum_g += g;
      sum_gh += g * h;
    }
    for (int d = 0; d < D; ++d) {
      const double g = grad_out[base + d] * gamma[d];
      const double h = cache.normalized[base + d];
      grad_in[base + d] = rstd * (g - sum_g / D - h * sum_gh / D);
    }
  }
  return grad_in;
}

// --------------------------------------------------------------------------
// Group normalization over rank-4 feature maps

struct GroupNormCache {
  std::vector<double> mean, rstd;  // [B * groups]
  Tensor normalized;
};

inline Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma, const Tensor& beta,
                         GroupNormCache& cache, double eps = 1e-5) {
  require_rank(input, 4, "group_norm input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cg = C / groups;
  const int64_t gsize = static_cast<int64_t>(cg) * H * W;
  Tensor out(input.shape());
  cache.mean.resize(static_cast<size_t>(B) * groups);
  cache.rstd.resize(static_cast<size_t>(B) * groups);
  cache.normalized = Tensor(input.shape());
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < groups; ++g) {
      const int64_t base = input.index4(b, g * cg, 0, 0);
      const double* ip = input.data() + base;
      double mean = 0.0;
      for (int64_t i = 0; i < gsize; ++i) mean += ip[i];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (int64_t i = 0; i < gsize; ++i) var += (ip[i] - mean) * (ip[i] - mean);
      var /= static_cast<double>(gsize);
      const double rstd = 1.0 / std::sqrt(var + eps);
      cache.mean[static_cast<size_t>(b) * groups + g] = mean;
      cache.rstd[static_cast<size_t>(b) * groups + g] = rstd;
      for (int c = 0; c < cg; ++c) {
        const double ga = gamma[g * cg + c], be = beta[g * cg + c];
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
          const int64_t idx = base + static_cast<int64_t>(c) * H * W + i;
          const double h = (input[idx] - mean) * rstd;
          cache.normalized[idx] = h;
          out[idx] = quantize(h * ga + be);
        }
      }
    }
  }
  return out;
}

inline Tensor group_norm_backward(const Tensor& input, int groups, const Tensor& gamma,
                                  const GroupNormCache& cache, const Tensor& grad_out,
                                  Tensor& grad_gamma, Tensor& grad_beta) {
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int cg = C / groups;
  const int64_t gsize = static_cast<int64_t>(cg) * H * W;
  Tensor grad_in(input.shape());
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < groups; ++g) {
      const int64_t base = input.index4(b, g * cg, 0, 0);
      const double rstd = cache.rstd[static_cast<size_t>(b) * groups + g];
      double sum_g = 0.0, sum_gh = 0.0;
      for (int c = 0; c < cg; ++c) {
        const double ga = gamma[g * cg + c];
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
          const int64_t idx = base + static_cast<int64_t>(c) * H * W + i;
          const double go = grad_out[idx];
          const double h = cache.normalized[idx];
          grad_gamma[g * cg + c] += go * h;
          grad_beta[g * cg + c] += go;
          sum_g += go * ga;
          sum_gh += go * ga * h;
        }
      }
      for (int c = 0; c < cg; ++c) {
        const double ga = gamma[g * cg + c];
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
          const int64_t idx = base + static_cast<int64_t>(c) * H * W + i;
          const double gv = grad_out[idx] * ga;
          const double h = cache.normalized[idx];
          grad_in[idx] =
              rstd * (gv - sum_g / static_cast<double>(gsize) - h * sum_gh / static_cast<double>(gsize));
        }
      }
    }
  }
  return grad_in;
}

}  // namespace dfam
