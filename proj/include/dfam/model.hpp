#pragma once

#include <string>
#include <vector>

#include "dfam/backbone.hpp"
#include "dfam/eval.hpp"
#include "dfam/matcher.hpp"
#include "dfam/transformer.hpp"

namespace dfam {

// Full detector: backbone + pyramid -> flattened multi-scale memory ->
// encoder -> decoder with per-layer heads. Processes one image per forward so
// layer caches stay valid for the matching backward call; batching is gradient
// accumulation across images.
class DfamDetr {
 public:
  DfamDetr() = default;
  DfamDetr(const BackboneConfig& bcfg, const ModelConfig& tcfg, uint64_t seed)
      : bcfg_(bcfg), tcfg_(tcfg) {
    tcfg_.validate();
    if (bcfg.d_model != tcfg.d_model)
      throw ShapeError("model: backbone and transformer d_model disagree");
    if (tcfg_.levels != 4) throw ShapeError("model: pyramid provides exactly 4 levels");
    Rng rng(seed, 1);
    backbone_ = Backbone(bcfg_, rng);
    pyramid_ = PyramidBuilder(bcfg_, rng);
    encoder_ = Encoder(tcfg_, rng);
    decoder_ = Decoder(tcfg_, rng);
    backbone_.collect(params_, "backbone");
    pyramid_.collect(params_, "pyramid");
    encoder_.collect(params_, "encoder");
    decoder_.collect(params_, "decoder");
  }

  // image [3,H,W] (H, W divisible by 64)
  std::vector<DetectionOutput> forward(const Tensor& image) {
    require_rank(image, 3, "model input");
    Tensor batched({1, image.dim(0), image.dim(1), image.dim(2)}, image.vec());
    maps_ = backbone_.forward(batched);
    FeaturePyramid pyr = pyramid_.forward(maps_);
    shapes_.clear();
    for (const auto& level : pyr.levels) shapes_.push_back({level.dim(2), level.dim(3)});
    Tensor src = flatten(pyr);
    S_ = src.dim(0);
    Tensor memory = encoder_.forward(src, shapes_);
    return decoder_.forward(memory, shapes_);
  }

  // per-decoder-layer output grads; parameter grads accumulate
  void backward(const std::vector<Tensor>& glogits, const std::vector<Tensor>& gboxes) {
    Tensor gmem = decoder_.backward(glogits, gboxes, S_);
    Tensor gsrc = encoder_.backward(gmem);
    std::vector<Tensor> glevels = unflatten(gsrc);
    Tensor g3, g4, g5, gd;
    pyramid_.backward(glevels, g3, g4, g5, gd);
    backbone_.backward(g3, g4, g5, gd);
  }

  // final-layer decode: per-class sigmoid scores, score floor, detection cap
  std::vector<Detection> decode(const DetectionOutput& out, double score_floor,
                                int max_detections) const {
    std::vector<Detection> dets;
    for (int q = 0; q < out.logits.dim(0); ++q)
      for (int c = 0; c < out.logits.dim(1); ++c) {
        const double score = sigmoid_scalar(out.logits.at2(q, c));
        if (score < score_floor) continue;
        dets.push_back({c, score,
                        Box{out.boxes.at2(q, 0), out.boxes.at2(q, 1), out.boxes.at2(q, 2),
                            out.boxes.at2(q, 3)}});
      }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(dets.size()) > max_detections) dets.resize(static_cast<size_t>(max_detections));
    return dets;
  }

  ParamList& params() { return params_; }
  Encoder& encoder() { return encoder_; }
  const BackboneConfig& backbone_config() const { return bcfg_; }
  const ModelConfig& transformer_config() const { return tcfg_; }
  const std::vector<LevelShape>& level_shapes() const { return shapes_; }

 private:
  // level-major, row-major token order; channels become the feature dimension
  Tensor flatten(const FeaturePyramid& pyr) const {
    int S = 0;
    for (const auto& level : pyr.levels) S += level.dim(2) * level.dim(3);
    Tensor src({S, tcfg_.d_model});
    int base = 0;
    for (const auto& level : pyr.levels) {
      const int H = level.dim(2), W = level.dim(3);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < tcfg_.d_model; ++c)
            src.at2(base + y * W + x, c) = level.at4(0, c, y, x);
      base += H * W;
    }
    return src;
  }

  std::vector<Tensor> unflatten(const Tensor& gsrc) const {
    std::vector<Tensor> glevels;
    int base = 0;
    for (const auto& sh : shapes_) {
      Tensor g({1, tcfg_.d_model, sh.h, sh.w});
      for (int y = 0; y < sh.h; ++y)
        for (int x = 0; x < sh.w; ++x)
          for (int c = 0; c < tcfg_.d_model; ++c)
            g.at4(0, c, y, x) = gsrc.at2(base + y * sh.w + x, c);
      base += sh.h * sh.w;
      glevels.push_back(std::move(g));
    }
    return glevels;
  }

  BackboneConfig bcfg_;
  ModelConfig tcfg_;
  Backbone backbone_;
  PyramidBuilder pyramid_;
  Encoder encoder_;
  Decoder decoder_;
  ParamList params_;
  BackboneOutputs maps_;
  std::vector<LevelShape> shapes_;
  int S_ = 0;
};

}  // namespace dfam
