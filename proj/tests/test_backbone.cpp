#include <catch2/catch_amalgamated.hpp>

#include "dfam/backbone.hpp"
#include "dfam/gradcheck.hpp"

using namespace dfam;

namespace {

double projected(const Tensor& out, const Tensor& r) {
  double s = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * r[i];
  return s;
}

BackboneConfig tiny_config(bool use_dfam = true) {
  BackboneConfig cfg;
  cfg.widths = {8, 8, 8, 8};
  cfg.blocks_per_stage = 1;
  cfg.gn_groups = 4;
  cfg.dfam_reduction = 4;
  cfg.d_model = 8;
  cfg.use_dfam = use_dfam;
  return cfg;
}

// copy the deformable backbone's weights into a standard-conv twin: main-branch
// deform weights map onto plain conv weights, offset predictors are dropped
void copy_to_standard(Backbone& deform, Backbone& standard) {
  ParamList src, dst;
  deform.collect(src, "bb");
  standard.collect(dst, "bb");
  size_t j = 0;
  for (auto& p : src) {
    if (p.name.find(".offset.") != std::string::npos) continue;
    std::string want = p.name;
    if (auto pos = want.find(".main."); pos != std::string::npos) want.erase(pos, 5);
    if (want.find(".dfam.") != std::string::npos) continue;
    REQUIRE(dst[j].name == want);
    *dst[j].value = *p.value;
    ++j;
  }
  REQUIRE(j == dst.size());
}

}  // namespace

TEST_CASE("backbone stride arithmetic on a 512x512 input") {
  Rng rng(1);
  Backbone bb(tiny_config(), rng);
  Tensor img = Tensor::randn({1, 3, 512, 512}, rng, 0.5);
  BackboneOutputs out = bb.forward(img);
  REQUIRE(out.c3.dim(2) == 64);
  REQUIRE(out.c3.dim(3) == 64);
  REQUIRE(out.c4.dim(2) == 32);
  REQUIRE(out.deform_c5.dim(2) == 16);
  REQUIRE(out.dfam_map.dim(2) == 16);
  REQUIRE(out.dfam_map.shape() == out.deform_c5.shape());
}

TEST_CASE("backbone rejects non-conforming inputs") {
  Rng rng(2);
  Backbone bb(tiny_config(), rng);
  Tensor bad = Tensor::randn({1, 3, 100, 100}, rng);
  REQUIRE_THROWS_AS(bb.forward(bad), ShapeError);
  Tensor bad_ch = Tensor::randn({1, 4, 64, 64}, rng);
  REQUIRE_THROWS_AS(bb.forward(bad_ch), ShapeError);
}

TEST_CASE("zero-initialized offset predictors reduce C5 to the standard stage") {
  Rng rng1(3), rng2(4);
  Backbone deform(tiny_config(true), rng1);
  Backbone standard(tiny_config(false), rng2);
  copy_to_standard(deform, standard);
  Rng rng(5);
  Tensor img = Tensor::randn({1, 3, 64, 64}, rng, 0.5);
  BackboneOutputs a = deform.forward(img);
  BackboneOutputs b = standard.forward(img);
  for (int64_t i = 0; i < a.deform_c5.numel(); ++i)
    REQUIRE_THAT(a.deform_c5[i], Catch::Matchers::WithinAbs(b.deform_c5[i], 1e-5));
}

TEST_CASE("pyramid shape contract and channel uniformity") {
  Rng rng(6);
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, rng);
  PyramidBuilder pb(cfg, rng);
  Tensor img = Tensor::randn({2, 3, 256, 256}, rng, 0.5);
  FeaturePyramid pyr = pb.forward(bb.forward(img));
  REQUIRE(pyr.strides == std::vector<int>({8, 16, 32, 64}));
  const int expected[4] = {32, 16, 8, 4};
  for (int l = 0; l < 4; ++l) {
    REQUIRE(pyr.levels[static_cast<size_t>(l)].dim(1) == cfg.d_model);
    REQUIRE(pyr.levels[static_cast<size_t>(l)].dim(2) == expected[l]);
    REQUIRE(pyr.levels[static_cast<size_t>(l)].dim(3) == expected[l]);
  }
}

TEST_CASE("level 4 is built from the DFAM map, not deformable C5") {
  Rng rng(7);
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, rng);
  PyramidBuilder pb(cfg, rng);
  Tensor img = Tensor::randn({1, 3, 64, 64}, rng, 0.5);
  BackboneOutputs maps = bb.forward(img);
  FeaturePyramid pyr = pb.forward(maps);
  BackboneOutputs swapped = maps;
  swapped.dfam_map = maps.deform_c5;
  FeaturePyramid pyr_swapped = pb.forward(swapped);
  double maxdiff = 0;
  for (int64_t i = 0; i < pyr.levels[3].numel(); ++i)
    maxdiff = std::max(maxdiff, std::fabs(pyr.levels[3][i] - pyr_swapped.levels[3][i]));
  REQUIRE(maxdiff > 1e-8);
}

TEST_CASE("zero offsets and zero DFAM parameters give the 0.25-scaled standard pyramid") {
  Rng rng1(8), rng2(9);
  BackboneConfig cfg = tiny_config(true);
  Backbone deform(cfg, rng1);
  Backbone standard(tiny_config(false), rng2);
  copy_to_standard(deform, standard);
  ParamList params;
  deform.collect(params, "bb");
  for (auto& p : params)
    if (p.name.find(".dfam.") != std::string::npos) p.value->fill(0.0);

  Rng rng(10);
  PyramidBuilder pb(cfg, rng);
  Tensor img = Tensor::randn({1, 3, 64, 64}, rng, 0.5);
  FeaturePyramid pyr = pb.forward(deform.forward(img));

  BackboneOutputs ref = standard.forward(img);
  REQUIRE(ref.dfam_map.same_shape(ref.deform_c5));
  // levels 1-3 equal the standard pyramid; level 4 sees the C5 map gated twice by sigma(0)
  BackboneOutputs scaled = ref;
  scaled.dfam_map = ref.deform_c5;
  scaled.dfam_map.scale_(0.25);
  FeaturePyramid ref_pyr = pb.forward(scaled);
  for (int l = 0; l < 4; ++l)
    for (int64_t i = 0; i < pyr.levels[static_cast<size_t>(l)].numel(); ++i)
      REQUIRE_THAT(pyr.levels[static_cast<size_t>(l)][i],
                   Catch::Matchers::WithinAbs(ref_pyr.levels[static_cast<size_t>(l)][i], 1e-5));
}

TEST_CASE("backbone and pyramid gradients match finite differences on a tiny profile") {
  Rng rng(11);
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, rng);
  PyramidBuilder pb(cfg, rng);
  // fractional sampling positions for the deformable stage
  ParamList params;
  bb.collect(params, "bb");
  pb.collect(params, "pyr");
  for (auto& p : params)
    if (p.name.find(".offset.bias") != std::string::npos)
      for (int64_t i = 0; i < p.value->numel(); ++i) (*p.value)[i] = rng.uniform(-0.4, 0.4);

  Tensor img = Tensor::randn({1, 3, 64, 64}, rng, 0.5);
  std::vector<Tensor> r;
  {
    FeaturePyramid pyr = pb.forward(bb.forward(img));
    for (auto& level : pyr.levels) r.push_back(Tensor::randn(level.shape(), rng));
  }
  Tensor gin;
  auto loss = [&] {
    FeaturePyramid pyr = pb.forward(bb.forward(img));
    double s = 0;
    for (int l = 0; l < 4; ++l) s += projected(pyr.levels[static_cast<size_t>(l)], r[static_cast<size_t>(l)]);
    return s;
  };
  auto grads = [&] {
    zero_grads(params);
    BackboneOutputs maps = bb.forward(img);
    pb.forward(maps);
    Tensor g3, g4, g5, gd;
    pb.backward(r, g3, g4, g5, gd);
    gin = bb.backward(g3, g4, g5, gd);
  };
  std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&img, &gin}};
  for (auto& p : params) pairs.push_back({p.value, p.grad});
  auto res = grad_check(loss, grads, pairs, 1e-5, 0, 300);
  INFO("tensor " << res.tensor_index << " coord " << res.coord << " ana " << res.analytic
                 << " num " << res.numeric);
  REQUIRE(res.max_rel_err < 1e-4);
}
