#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dfam/deform_conv.hpp"
#include "dfam/ops.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

// Named view of one parameter tensor and its gradient accumulator. Checkpoints
// and the optimizer address parameters through these.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
  bool backbone = false;  // selects the backbone learning-rate group
};

using ParamList = std::vector<ParamRef>;

// Layer objects cache whatever the backward pass needs; forward then backward
// must be called in matching order. Gradients accumulate until zero_grad().

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng, double weight_std) {
    p_.weight = Tensor::randn({out_ch, in_ch, k, k}, rng, weight_std);
    p_.bias = Tensor::zeros({out_ch});
    p_.stride = stride;
    p_.padding = pad;
    gw_ = Tensor(p_.weight.shape());
    gb_ = Tensor(p_.bias.shape());
  }

  Tensor forward(const Tensor& x) {
    in_ = x;
    return conv2d(x, p_);
  }
  Tensor backward(const Tensor& gout) { return conv2d_backward(in_, p_, gout, gw_, gb_); }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    out.push_back({prefix + ".weight", &p_.weight, &gw_, backbone});
    out.push_back({prefix + ".bias", &p_.bias, &gb_, backbone});
  }

  ConvParams& params() { return p_; }
  const ConvParams& params() const { return p_; }

 private:
  ConvParams p_;
  Tensor gw_, gb_, in_;
};

class DeformConv2d {
 public:
  DeformConv2d() = default;
  DeformConv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng, double weight_std)
      : p_(make_deform_conv(out_ch, in_ch, k, stride, pad, rng, weight_std)) {
    gmw_ = Tensor(p_.main.weight.shape());
    gmb_ = Tensor(p_.main.bias.shape());
    gow_ = Tensor(p_.offset_pred.weight.shape());
    gob_ = Tensor(p_.offset_pred.bias.shape());
  }

  Tensor forward(const Tensor& x) {
    in_ = x;
    off_ = predict_offsets(x, p_);
    return deform_conv2d_with_offsets(x, p_.main, off_);
  }
  Tensor backward(const Tensor& gout) {
    return deform_conv2d_backward(in_, p_, off_, gout, gmw_, gmb_, gow_, gob_);
  }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    out.push_back({prefix + ".main.weight", &p_.main.weight, &gmw_, backbone});
    out.push_back({prefix + ".main.bias", &p_.main.bias, &gmb_, backbone});
    out.push_back({prefix + ".offset.weight", &p_.offset_pred.weight, &gow_, backbone});
    out.push_back({prefix + ".offset.bias", &p_.offset_pred.bias, &gob_, backbone});
  }

  DeformConvParams& params() { return p_; }

 private:
  DeformConvParams p_;
  Tensor gmw_, gmb_, gow_, gob_, in_, off_;
};

class Linear {
 public:
  Linear() = default;
  Linear(int out_dim, int in_dim, Rng& rng, double weight_std) {
    w_ = Tensor::randn({out_dim, in_dim}, rng, weight_std);
    b_ = Tensor::zeros({out_dim});
    gw_ = Tensor(w_.shape());
    gb_ = Tensor(b_.shape());
  }

  Tensor forward(const Tensor& x) {
    in_ = x;
    return linear(x, w_, b_);
  }
  Tensor backward(const Tensor& gout) { return linear_backward(in_, w_, gout, gw_, gb_); }

  // explicit-cache variants for parameter sharing across call sites
  Tensor forward_with(const Tensor& x, Tensor& cache) const {
    cache = x;
    return linear(x, w_, b_);
  }
  Tensor backward_with(const Tensor& gout, const Tensor& cache) {
    return linear_backward(cache, w_, gout, gw_, gb_);
  }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    out.push_back({prefix + ".weight", &w_, &gw_, backbone});
    out.push_back({prefix + ".bias", &b_, &gb_, backbone});
  }

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

 private:
  Tensor w_, b_, gw_, gb_, in_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int channels, int groups) : groups_(groups) {
    gamma_ = Tensor::full({channels}, 1.0);
    beta_ = Tensor::zeros({channels});
    gg_ = Tensor(gamma_.shape());
    gb_ = Tensor(beta_.shape());
  }

  Tensor forward(const Tensor& x) {
    in_ = x;
    return group_norm(x, groups_, gamma_, beta_, cache_);
  }
  Tensor backward(const Tensor& gout) {
    return group_norm_backward(in_, groups_, gamma_, cache_, gout, gg_, gb_);
  }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    out.push_back({prefix + ".gamma", &gamma_, &gg_, backbone});
    out.push_back({prefix + ".beta", &beta_, &gb_, backbone});
  }

 private:
  int groups_ = 1;
  Tensor gamma_, beta_, gg_, gb_, in_;
  GroupNormCache cache_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim) {
    gamma_ = Tensor::full({dim}, 1.0);
    beta_ = Tensor::zeros({dim});
    gg_ = Tensor(gamma_.shape());
    gb_ = Tensor(beta_.shape());
  }

  Tensor forward(const Tensor& x) {
    in_ = x;
    return layer_norm(x, gamma_, beta_, cache_);
  }
  Tensor backward(const Tensor& gout) {
    return layer_norm_backward(in_, gamma_, cache_, gout, gg_, gb_);
  }

  void collect(ParamList& out, const std::string& prefix, bool backbone = false) {
    out.push_back({prefix + ".gamma", &gamma_, &gg_, backbone});
    out.push_back({prefix + ".beta", &beta_, &gb_, backbone});
  }

 private:
  Tensor gamma_, beta_, gg_, gb_, in_;
  LayerNormCache cache_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x) {
    in_ = x;
    return relu(x);
  }
  Tensor backward(const Tensor& gout) { return relu_backward(in_, gout); }

 private:
  Tensor in_;
};

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.grad->fill(0.0);
}

}  // namespace dfam
