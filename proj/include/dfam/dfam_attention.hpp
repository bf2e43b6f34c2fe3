#pragma once

#include <string>
#include <vector>

#include "dfam/layers.hpp"
#include "dfam/ops.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

// Spatial attention: channel-pooled average and max planes are concatenated
// into a 2-channel map, convolved with a 7x7 kernel (padding 3), squashed by a
// sigmoid, and the resulting per-pixel weight gates every channel of the input.
class SpatialAttention {
 public:
  SpatialAttention() = default;
  explicit SpatialAttention(Rng& rng) : conv7_(1, 2, 7, 1, 3, rng, 0.05) {}

  Tensor forward(const Tensor& x) {
    require_rank(x, 4, "spatial_attention input");
    in_ = x;
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor avg = pool_channel(x, PoolMode::Avg);
    Tensor mx = pool_channel(x, PoolMode::Max, &max_arg_);
    Tensor cat({B, 2, H, W});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        cat[cat.index4(b, 0, 0, 0) + i] = avg[avg.index4(b, 0, 0, 0) + i];
        cat[cat.index4(b, 1, 0, 0) + i] = mx[mx.index4(b, 0, 0, 0) + i];
      }
    Tensor w = conv7_.forward(cat);
    gate_ = sigmoid(w);  // [B,1,H,W]
    Tensor out(x.shape());
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
          out[out.index4(b, c, 0, 0) + i] =
              quantize(x[x.index4(b, c, 0, 0) + i] * gate_[gate_.index4(b, 0, 0, 0) + i]);
    return out;
  }

  Tensor backward(const Tensor& gout) {
    const int B = in_.dim(0), C = in_.dim(1), H = in_.dim(2), W = in_.dim(3);
    Tensor grad_in(in_.shape());
    Tensor ggate({B, 1, H, W});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i) {
          const int64_t xi = in_.index4(b, c, 0, 0) + i;
          const int64_t gi = ggate.index4(b, 0, 0, 0) + i;
          grad_in[xi] += gout[xi] * gate_[gi];
          ggate[gi] += gout[xi] * in_[xi];
        }
    Tensor gw = sigmoid_backward(gate_, ggate);
    Tensor gcat = conv7_.backward(gw);
    Tensor gavg({B, 1, H, W}), gmax({B, 1, H, W});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        gavg[gavg.index4(b, 0, 0, 0) + i] = gcat[gcat.index4(b, 0, 0, 0) + i];
        gmax[gmax.index4(b, 0, 0, 0) + i] = gcat[gcat.index4(b, 1, 0, 0) + i];
      }
    grad_in.add_(pool_channel_backward(in_, PoolMode::Avg, gavg, {}));
    grad_in.add_(pool_channel_backward(in_, PoolMode::Max, gmax, max_arg_));
    return grad_in;
  }

  const Tensor& gate() const { return gate_; }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    conv7_.collect(out, prefix + ".conv7", backbone);
  }

 private:
  Conv2d conv7_;
  Tensor in_, gate_;
  std::vector<int> max_arg_;
};

// Channel attention: globally pooled average and max vectors pass through one
// shared reduce/expand bottleneck, are summed, squashed by a sigmoid, and the
// per-channel weight gates every pixel.
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(int channels, int reduction, Rng& rng)
      : reduce_(channels / reduction, channels, rng, std::sqrt(2.0 / channels)),
        expand_(channels, channels / reduction, rng, std::sqrt(2.0 / (channels / reduction))) {
    if (channels % reduction != 0)
      throw ShapeError("channel_attention: channels not divisible by reduction ratio");
  }

  Tensor forward(const Tensor& x) {
    require_rank(x, 4, "channel_attention input");
    in_ = x;
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor avg = pool_spatial(x, PoolMode::Avg);
    Tensor mx = pool_spatial(x, PoolMode::Max, &max_arg_);
    avg_flat_ = Tensor({B, C}, avg.vec());
    max_flat_ = Tensor({B, C}, mx.vec());
    // shared bottleneck applied to both branches in one batched pass
    Tensor both({2 * B, C});
    for (int64_t i = 0; i < avg_flat_.numel(); ++i) {
      both[i] = avg_flat_[i];
      both[avg_flat_.numel() + i] = max_flat_[i];
    }
    hidden_pre_ = reduce_.forward(both);
    Tensor h = act_.forward(hidden_pre_);
    Tensor a = expand_.forward(h);  // [2B, C]
    Tensor sum({B, C});
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] = a[i] + a[sum.numel() + i];
    gate_ = sigmoid(sum);  // [B, C]
    Tensor out(x.shape());
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double g = gate_.at2(b, c);
        for (int i = 0; i < H * W; ++i) {
          const int64_t xi = x.index4(b, c, 0, 0) + i;
          out[xi] = quantize(x[xi] * g);
        }
      }
    return out;
  }

  Tensor backward(const Tensor& gout) {
    const int B = in_.dim(0), C = in_.dim(1), H = in_.dim(2), W = in_.dim(3);
    Tensor grad_in(in_.shape());
    Tensor ggate({B, C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double g = gate_.at2(b, c);
        double acc = 0.0;
        for (int i = 0; i < H * W; ++i) {
          const int64_t xi = in_.index4(b, c, 0, 0) + i;
          grad_in[xi] += gout[xi] * g;
          acc += gout[xi] * in_[xi];
        }
        ggate.at2(b, c) = acc;
      }
    Tensor gsum = sigmoid_backward(gate_, ggate);
    Tensor ga({2 * B, C});
    for (int64_t i = 0; i < gsum.numel(); ++i) {
      ga[i] = gsum[i];
      ga[gsum.numel() + i] = gsum[i];
    }
    Tensor gh = expand_.backward(ga);
    Tensor ghp = act_.backward(gh);
    Tensor gboth = reduce_.backward(ghp);
    Tensor gavg({B, C, 1, 1}), gmax({B, C, 1, 1});
    for (int64_t i = 0; i < gavg.numel(); ++i) {
      gavg[i] = gboth[i];
      gmax[i] = gboth[gavg.numel() + i];
    }
    grad_in.add_(pool_spatial_backward(in_, PoolMode::Avg, gavg, {}));
    grad_in.add_(pool_spatial_backward(in_, PoolMode::Max, gmax, max_arg_));
    return grad_in;
  }

  const Tensor& gate() const { return gate_; }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    reduce_.collect(out, prefix + ".reduce", backbone);
    expand_.collect(out, prefix + ".expand", backbone);
  }

 private:
  Linear reduce_, expand_;
  ReLU act_;
  Tensor in_, gate_, avg_flat_, max_flat_, hidden_pre_;
  std::vector<int> max_arg_;
};

// DFAM: spatial attention followed by channel attention on the deformable C5
// feature map.
class Dfam {
 public:
  Dfam() = default;
  Dfam(int channels, int reduction, Rng& rng)
      : spatial_(rng), channel_(channels, reduction, rng) {}

  Tensor forward(const Tensor& x) { return channel_.forward(spatial_.forward(x)); }
  Tensor backward(const Tensor& gout) { return spatial_.backward(channel_.backward(gout)); }

  SpatialAttention& spatial() { return spatial_; }
  ChannelAttention& channel() { return channel_; }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    spatial_.collect(out, prefix + ".spatial", backbone);
    channel_.collect(out, prefix + ".channel", backbone);
  }

 private:
  SpatialAttention spatial_;
  ChannelAttention channel_;
};

}  // namespace dfam
