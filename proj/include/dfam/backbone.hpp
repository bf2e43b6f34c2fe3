#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfam/dfam_attention.hpp"
#include "dfam/layers.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

struct BackboneConfig {
  std::vector<int> widths = {32, 64, 128, 256};  // C2..C5
  int blocks_per_stage = 2;
  int gn_groups = 8;
  int dfam_reduction = 4;
  int d_model = 64;
  bool use_dfam = true;  // off: standard C5 convs, no attention, level 4 from C5
};

struct FeaturePyramid {
  std::vector<Tensor> levels;             // 4 maps, d_model channels each
  std::vector<int> strides = {8, 16, 32, 64};
};

namespace detail {
inline double he_std(int in_ch, int k) { return std::sqrt(2.0 / (in_ch * k * k)); }
}  // namespace detail

// Residual basic block: conv-GN-relu-conv-GN plus a (possibly projected)
// skip, relu after the sum. The C5 stage swaps both 3x3 convs for deformable
// ones; 1x1 projections stay standard.
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(int in_ch, int out_ch, int stride, bool deformable, int gn_groups, Rng& rng)
      : deformable_(deformable), project_(stride != 1 || in_ch != out_ch) {
    const double s1 = detail::he_std(in_ch, 3), s2 = detail::he_std(out_ch, 3);
    if (deformable) {
      d1_ = DeformConv2d(out_ch, in_ch, 3, stride, 1, rng, s1);
      d2_ = DeformConv2d(out_ch, out_ch, 3, 1, 1, rng, s2);
    } else {
      c1_ = Conv2d(out_ch, in_ch, 3, stride, 1, rng, s1);
      c2_ = Conv2d(out_ch, out_ch, 3, 1, 1, rng, s2);
    }
    n1_ = GroupNorm(out_ch, gn_groups);
    n2_ = GroupNorm(out_ch, gn_groups);
    if (project_) {
      proj_ = Conv2d(out_ch, in_ch, 1, stride, 0, rng, detail::he_std(in_ch, 1));
      nproj_ = GroupNorm(out_ch, gn_groups);
    }
  }

  Tensor forward(const Tensor& x) {
    Tensor h = deformable_ ? d1_.forward(x) : c1_.forward(x);
    h = r1_.forward(n1_.forward(h));
    h = deformable_ ? d2_.forward(h) : c2_.forward(h);
    h = n2_.forward(h);
    Tensor skip = project_ ? nproj_.forward(proj_.forward(x)) : x;
    h.add_(skip);
    return rout_.forward(h);
  }

  // grad wrt the block input
  Tensor backward(const Tensor& gout) {
    Tensor g = rout_.backward(gout);
    Tensor gskip = project_ ? proj_.backward(nproj_.backward(g)) : g;
    Tensor gh = n2_.backward(g);
    gh = deformable_ ? d2_.backward(gh) : c2_.backward(gh);
    gh = n1_.backward(r1_.backward(gh));
    Tensor gin = deformable_ ? d1_.backward(gh) : c1_.backward(gh);
    gin.add_(gskip);
    return gin;
  }

  void collect(ParamList& out, const std::string& prefix) {
    if (deformable_) {
      d1_.collect(out, prefix + ".conv1", true);
      d2_.collect(out, prefix + ".conv2", true);
    } else {
      c1_.collect(out, prefix + ".conv1", true);
      c2_.collect(out, prefix + ".conv2", true);
    }
    n1_.collect(out, prefix + ".norm1", true);
    n2_.collect(out, prefix + ".norm2", true);
    if (project_) {
      proj_.collect(out, prefix + ".proj", true);
      nproj_.collect(out, prefix + ".proj_norm", true);
    }
  }

 private:
  bool deformable_ = false, project_ = false;
  Conv2d c1_, c2_, proj_;
  DeformConv2d d1_, d2_;
  GroupNorm n1_, n2_, nproj_;
  ReLU r1_, rout_;
};

struct BackboneOutputs {
  Tensor c3, c4, deform_c5, dfam_map;
};

// Mini residual backbone with the C3/C4/C5 stage-stride topology, a fully
// deformable C5 stage, and DFAM on top of it.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    const auto& w = cfg.widths;
    stem1_ = Conv2d(w[0], 3, 3, 2, 1, rng, detail::he_std(3, 3));
    stem1n_ = GroupNorm(w[0], cfg.gn_groups);
    stem2_ = Conv2d(w[0], w[0], 3, 2, 1, rng, detail::he_std(w[0], 3));
    stem2n_ = GroupNorm(w[0], cfg.gn_groups);
    int in_ch = w[0];
    for (int s = 0; s < 4; ++s) {
      const int stride = s == 0 ? 1 : 2;
      const bool deform = cfg.use_dfam && s == 3;
      std::vector<BasicBlock> stage;
      for (int b = 0; b < cfg.blocks_per_stage; ++b) {
        stage.emplace_back(b == 0 ? in_ch : w[s], w[s], b == 0 ? stride : 1, deform,
                           cfg.gn_groups, rng);
      }
      stages_.push_back(std::move(stage));
      in_ch = w[s];
    }
    if (cfg.use_dfam) dfam_ = Dfam(w[3], cfg.dfam_reduction, rng);
  }

  BackboneOutputs forward(const Tensor& image) {
    require_rank(image, 4, "backbone input");
    if (image.dim(1) != 3) throw ShapeError("backbone: expected 3 input channels");
    if (image.dim(2) % 64 != 0 || image.dim(3) % 64 != 0)
      throw ShapeError("backbone: spatial dims must be divisible by 64, got " +
                       Tensor::shape_str(image.shape()));
    Tensor h = stem1r_.forward(stem1n_.forward(stem1_.forward(image)));
    h = stem2r_.forward(stem2n_.forward(stem2_.forward(h)));
    for (auto& block : stages_[0]) h = block.forward(h);
    for (auto& block : stages_[1]) h = block.forward(h);
    BackboneOutputs out;
    out.c3 = h;
    for (auto& block : stages_[2]) h = block.forward(h);
    out.c4 = h;
    for (auto& block : stages_[3]) h = block.forward(h);
    out.deform_c5 = h;
    out.dfam_map = cfg_.use_dfam ? dfam_.forward(h) : h;
    return out;
  }

  // grads for the four outputs; dfam_map and deform_c5 paths are merged here
  Tensor backward(const Tensor& g_c3, const Tensor& g_c4, const Tensor& g_c5,
                  const Tensor& g_dfam) {
    Tensor g5 = g_c5;
    g5.add_(cfg_.use_dfam ? dfam_.backward(g_dfam) : g_dfam);
    for (int b = cfg_.blocks_per_stage - 1; b >= 0; --b)
      g5 = stages_[3][static_cast<size_t>(b)].backward(g5);
    g5.add_(g_c4);
    for (int b = cfg_.blocks_per_stage - 1; b >= 0; --b)
      g5 = stages_[2][static_cast<size_t>(b)].backward(g5);
    g5.add_(g_c3);
    for (int s = 1; s >= 0; --s)
      for (int b = cfg_.blocks_per_stage - 1; b >= 0; --b)
        g5 = stages_[static_cast<size_t>(s)][static_cast<size_t>(b)].backward(g5);
    g5 = stem2_.backward(stem2n_.backward(stem2r_.backward(g5)));
    g5 = stem1_.backward(stem1n_.backward(stem1r_.backward(g5)));
    return g5;
  }

  void collect(ParamList& out, const std::string& prefix) {
    stem1_.collect(out, prefix + ".stem1", true);
    stem1n_.collect(out, prefix + ".stem1_norm", true);
    stem2_.collect(out, prefix + ".stem2", true);
    stem2n_.collect(out, prefix + ".stem2_norm", true);
    for (size_t s = 0; s < stages_.size(); ++s)
      for (size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(out, prefix + ".stage" + std::to_string(s + 2) + ".block" +
                                       std::to_string(b));
    if (cfg_.use_dfam) dfam_.collect(out, prefix + ".dfam", true);
  }

  const BackboneConfig& config() const { return cfg_; }
  Dfam& dfam() { return dfam_; }

 private:
  BackboneConfig cfg_;
  Conv2d stem1_, stem2_;
  GroupNorm stem1n_, stem2n_;
  ReLU stem1r_, stem2r_;
  std::vector<std::vector<BasicBlock>> stages_;
  Dfam dfam_;
};

// Lateral 1x1 stride-1 projections of C3/C4/deformC5 plus a 3x3 stride-2
// convolution of the DFAM map for the stride-64 level.
class PyramidBuilder {
 public:
  PyramidBuilder() = default;
  PyramidBuilder(const BackboneConfig& cfg, Rng& rng) {
    lat3_ = Conv2d(cfg.d_model, cfg.widths[1], 1, 1, 0, rng, detail::he_std(cfg.widths[1], 1));
    lat4_ = Conv2d(cfg.d_model, cfg.widths[2], 1, 1, 0, rng, detail::he_std(cfg.widths[2], 1));
    lat5_ = Conv2d(cfg.d_model, cfg.widths[3], 1, 1, 0, rng, detail::he_std(cfg.widths[3], 1));
    down_ = Conv2d(cfg.d_model, cfg.widths[3], 3, 2, 1, rng, detail::he_std(cfg.widths[3], 3));
  }

  FeaturePyramid forward(const BackboneOutputs& maps) {
    FeaturePyramid pyr;
    pyr.levels.resize(4);
    pyr.levels[0] = lat3_.forward(maps.c3);
    pyr.levels[1] = lat4_.forward(maps.c4);
    pyr.levels[2] = lat5_.forward(maps.deform_c5);
    pyr.levels[3] = down_.forward(maps.dfam_map);
    return pyr;
  }

  void backward(const std::vector<Tensor>& grad_levels, Tensor& g_c3, Tensor& g_c4, Tensor& g_c5,
                Tensor& g_dfam) {
    g_c3 = lat3_.backward(grad_levels[0]);
    g_c4 = lat4_.backward(grad_levels[1]);
    g_c5 = lat5_.backward(grad_levels[2]);
    g_dfam = down_.backward(grad_levels[3]);
  }

  void collect(ParamList& out, const std::string& prefix) {
    lat3_.collect(out, prefix + ".lat3", true);
    lat4_.collect(out, prefix + ".lat4", true);
    lat5_.collect(out, prefix + ".lat5", true);
    down_.collect(out, prefix + ".down", true);
  }

 private:
  Conv2d lat3_, lat4_, lat5_, down_;
};

}  // namespace dfam
