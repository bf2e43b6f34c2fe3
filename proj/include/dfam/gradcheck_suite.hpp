#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dfam/dfam_attention.hpp"
#include "dfam/gradcheck.hpp"
#include "dfam/matcher.hpp"
#include "dfam/transformer.hpp"

namespace dfam {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  bool pass = false;
};

// Runs the per-operation finite-difference suites. scope filters by substring
// ("" runs everything). corrupt perturbs one analytic gradient per op, as a
// negative control that the comparison actually bites.
inline std::vector<GradCheckEntry> run_gradcheck_suite(const std::string& scope,
                                                       bool corrupt = false,
                                                       double tolerance = 1e-4) {
  if (precision_mode() != Precision::F64)
    throw ShapeError("gradcheck requires 64-bit precision mode");
  std::vector<GradCheckEntry> results;
  auto wants = [&](const std::string& name) {
    return scope.empty() || name.find(scope) != std::string::npos;
  };
  auto projected = [](const Tensor& out, const Tensor& r) {
    double s = 0;
    for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * r[i];
    return s;
  };
  auto record = [&](const std::string& name, std::function<void()> mutate_grads,
                    std::function<double()> loss, std::function<void()> grads,
                    std::vector<std::pair<Tensor*, Tensor*>>& pairs, int max_coords) {
    auto grads_wrapped = [&] {
      grads();
      if (corrupt) mutate_grads();
    };
    auto res = grad_check(loss, grads_wrapped, pairs, 1e-5, 0, max_coords);
    results.push_back({name, res.max_rel_err, res.max_rel_err < tolerance});
  };
  auto bump_first = [](std::vector<std::pair<Tensor*, Tensor*>>& pairs) {
    // shift every entry so the check fails regardless of which coordinates the
    // finite-difference subsampler happens to visit
    return [&pairs] {
      Tensor& g = *pairs[0].second;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += 0.05;
    };
  };

  if (wants("conv2d")) {
    Rng rng(101);
    Conv2d conv(4, 3, 3, 1, 1, rng, 0.3);
    Tensor x = Tensor::randn({1, 3, 6, 6}, rng);
    Tensor r = Tensor::randn({1, 4, 6, 6}, rng);
    ParamList params;
    conv.collect(params, "conv");
    Tensor gx;
    auto loss = [&] { return projected(conv.forward(x), r); };
    auto grads = [&] {
      zero_grads(params);
      conv.forward(x);
      gx = conv.backward(r);
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&x, &gx}};
    for (auto& p : params) pairs.push_back({p.value, p.grad});
    record("conv2d", bump_first(pairs), loss, grads, pairs, 2000);
  }

  if (wants("deform_conv")) {
    Rng rng(102);
    DeformConv2d dc(4, 3, 3, 1, 1, rng, 0.3);
    // fractional sampling positions so the offset path is exercised
    for (int64_t i = 0; i < dc.params().offset_pred.bias.numel(); ++i)
      dc.params().offset_pred.bias[i] = rng.uniform(-0.4, 0.4);
    Tensor x = Tensor::randn({1, 3, 6, 6}, rng);
    Tensor r = Tensor::randn({1, 4, 6, 6}, rng);
    ParamList params;
    dc.collect(params, "deform");
    Tensor gx;
    auto loss = [&] { return projected(dc.forward(x), r); };
    auto grads = [&] {
      zero_grads(params);
      dc.forward(x);
      gx = dc.backward(r);
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&x, &gx}};
    for (auto& p : params) pairs.push_back({p.value, p.grad});
    record("deform_conv2d", bump_first(pairs), loss, grads, pairs, 2000);
  }

  if (wants("dfam")) {
    Rng rng(103);
    Dfam dfam(8, 4, rng);
    Tensor x = Tensor::randn({1, 8, 5, 5}, rng);
    Tensor r = Tensor::randn({1, 8, 5, 5}, rng);
    ParamList params;
    dfam.collect(params, "dfam");
    Tensor gx;
    auto loss = [&] { return projected(dfam.forward(x), r); };
    auto grads = [&] {
      zero_grads(params);
      dfam.forward(x);
      gx = dfam.backward(r);
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&x, &gx}};
    for (auto& p : params) pairs.push_back({p.value, p.grad});
    record("dfam_attention", bump_first(pairs), loss, grads, pairs, 2000);
  }

  if (wants("attention")) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.heads = 4;
    cfg.points = 4;
    cfg.ffn_dim = 64;
    Rng rng(104);
    MSDeformAttn attn(cfg, rng);
    std::vector<LevelShape> shapes = {{8, 8}, {4, 4}, {2, 2}, {1, 1}};
    Tensor memory = Tensor::randn({85, cfg.d_model}, rng);
    Tensor query = Tensor::randn({4, cfg.d_model}, rng);
    Tensor ref({4, 2});
    for (int n = 0; n < 4; ++n) {
      ref.at2(n, 0) = rng.uniform(0.1, 0.9);
      ref.at2(n, 1) = rng.uniform(0.1, 0.9);
    }
    ParamList params;
    attn.collect(params, "attn");
    Tensor r = Tensor::randn({4, cfg.d_model}, rng);
    Tensor gq, gmem, gref({4, 2});
    auto loss = [&] { return projected(attn.forward(query, ref, memory, shapes), r); };
    auto grads = [&] {
      zero_grads(params);
      gref.fill(0);
      attn.forward(query, ref, memory, shapes);
      attn.backward(r, gq, gmem, &gref);
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&query, &gq}, {&memory, &gmem}, {&ref, &gref}};
    for (auto& p : params) pairs.push_back({p.value, p.grad});
    record("ms_deform_attn", bump_first(pairs), loss, grads, pairs, 2000);
  }

  if (wants("heads")) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.num_classes = 3;
    Rng rng(105);
    PredictionHeads heads(cfg, rng);
    Tensor x = Tensor::randn({6, cfg.d_model}, rng);
    Tensor rl = Tensor::randn({6, cfg.num_classes}, rng);
    Tensor rb = Tensor::randn({6, 4}, rng);
    ParamList params;
    heads.collect(params, "heads");
    Tensor gx;
    auto loss = [&] {
      DetectionOutput out = heads.forward(0, x);
      return projected(out.logits, rl) + projected(out.boxes, rb);
    };
    auto grads = [&] {
      zero_grads(params);
      heads.forward(0, x);
      gx = heads.backward(0, rl, rb);
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&x, &gx}};
    for (auto& p : params) pairs.push_back({p.value, p.grad});
    record("prediction_heads", bump_first(pairs), loss, grads, pairs, 2000);
  }

  if (wants("loss")) {
    Rng rng(106);
    LossWeights w;
    SetCriterion crit(w, 3);
    GroundTruthSet gts;
    for (int g = 0; g < 2; ++g)
      gts.push_back({rng.uniform_int(0, 2),
                     Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.35),
                         rng.uniform(0.15, 0.35)}});
    std::vector<DetectionSet> layers(2);
    for (auto& d : layers) {
      d.logits = Tensor::randn({6, 3}, rng);
      d.boxes = Tensor({6, 4});
      for (int64_t i = 0; i < d.boxes.numel(); ++i) d.boxes[i] = rng.uniform(0.15, 0.85);
    }
    crit.compute(layers, gts);
    const std::vector<MatchAssignment> fixed = crit.matches();
    Tensor gl0, gl1, gb0, gb1;
    auto loss = [&] { return crit.compute(layers, gts, &fixed).total; };
    auto grads = [&] {
      crit.compute(layers, gts, &fixed);
      gl0 = crit.grad_logits()[0];
      gl1 = crit.grad_logits()[1];
      gb0 = crit.grad_boxes()[0];
      gb1 = crit.grad_boxes()[1];
    };
    std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&layers[0].logits, &gl0},
                                                      {&layers[1].logits, &gl1},
                                                      {&layers[0].boxes, &gb0},
                                                      {&layers[1].boxes, &gb1}};
    record("set_loss", bump_first(pairs), loss, grads, pairs, 5000);
  }

  return results;
}

}  // namespace dfam
