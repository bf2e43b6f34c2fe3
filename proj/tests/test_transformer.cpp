#include <catch2/catch_amalgamated.hpp>

#include "dfam/gradcheck.hpp"
#include "dfam/transformer.hpp"

using namespace dfam;

namespace {

double projected(const Tensor& out, const Tensor& r) {
  double s = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * r[i];
  return s;
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.heads = 4;
  cfg.points = 4;
  cfg.levels = 4;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.queries = 5;
  cfg.num_classes = 2;
  cfg.ffn_dim = 64;
  return cfg;
}

std::vector<LevelShape> toy_shapes() { return {{8, 8}, {4, 4}, {2, 2}, {1, 1}}; }

int total_tokens(const std::vector<LevelShape>& shapes) {
  int s = 0;
  for (auto& sh : shapes) s += sh.h * sh.w;
  return s;
}

void set_identity(Tensor& w) {
  w.fill(0.0);
  for (int i = 0; i < w.dim(0); ++i) w.at2(i, i) = 1.0;
}

}  // namespace

TEST_CASE("ms_deform_attn with zero generators samples the reference point uniformly") {
  ModelConfig cfg = toy_config();
  Rng rng(1);
  MSDeformAttn attn(cfg, rng);
  ParamList params;
  attn.collect(params, "attn");
  for (auto& p : params) {
    if (p.name.find("offset_gen") != std::string::npos ||
        p.name.find("weight_gen") != std::string::npos)
      p.value->fill(0.0);
    if (p.name == "attn.value_proj.weight" || p.name == "attn.out_proj.weight")
      set_identity(*p.value);
    if (p.name.find("proj.bias") != std::string::npos) p.value->fill(0.0);
  }

  auto shapes = toy_shapes();
  const int S = total_tokens(shapes);
  Tensor memory = Tensor::randn({S, cfg.d_model}, rng);
  // queries whose reference is the exact center of pixel (y0,x0) at level 0
  Tensor query = Tensor::randn({3, cfg.d_model}, rng);
  Tensor ref({3, 2});
  const int picks[3][2] = {{1, 2}, {5, 5}, {0, 7}};  // (y,x) in the 8x8 level
  for (int n = 0; n < 3; ++n) {
    ref.at2(n, 0) = (picks[n][1] + 0.5) / 8.0;
    ref.at2(n, 1) = (picks[n][0] + 0.5) / 8.0;
  }
  Tensor out = attn.forward(query, ref, memory, shapes);

  // uniform attention over the L*K samples of each head
  const auto& a = attn.attention();
  for (int64_t i = 0; i < a.numel(); ++i)
    REQUIRE_THAT(a[i], Catch::Matchers::WithinAbs(1.0 / (cfg.levels * cfg.points), 1e-12));

  // with identity projections the output is the mean over levels of the memory
  // rows under the reference point
  std::vector<int> base = {0, 64, 80, 84};
  for (int n = 0; n < 3; ++n) {
    for (int c = 0; c < cfg.d_model; ++c) {
      double expect = 0.0;
      for (int l = 0; l < 4; ++l) {
        const int H = shapes[static_cast<size_t>(l)].h, W = shapes[static_cast<size_t>(l)].w;
        const double py = ref.at2(n, 1) * H - 0.5;
        const double px = ref.at2(n, 0) * W - 0.5;
        // gather the bilinear sample by hand
        const int y0 = static_cast<int>(std::floor(py)), x0 = static_cast<int>(std::floor(px));
        double v = 0.0;
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) {
            const int yy = y0 + i, xx = x0 + j;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            const double wgt = (i ? py - y0 : 1 - (py - y0)) * (j ? px - x0 : 1 - (px - x0));
            v += wgt * memory.at2(base[static_cast<size_t>(l)] + yy * W + xx, c);
          }
        expect += v / 4.0;
      }
      REQUIRE_THAT(out.at2(n, c), Catch::Matchers::WithinAbs(expect, 1e-9));
    }
  }
}

TEST_CASE("ms_deform_attn attention weights sum to 1 per head") {
  ModelConfig cfg = toy_config();
  Rng rng(2);
  MSDeformAttn attn(cfg, rng);
  auto shapes = toy_shapes();
  Tensor memory = Tensor::randn({total_tokens(shapes), cfg.d_model}, rng);
  Tensor query = Tensor::randn({7, cfg.d_model}, rng);
  Tensor ref({7, 2});
  for (int n = 0; n < 7; ++n) {
    ref.at2(n, 0) = rng.uniform(0.05, 0.95);
    ref.at2(n, 1) = rng.uniform(0.05, 0.95);
  }
  attn.forward(query, ref, memory, shapes);
  const auto& a = attn.attention();
  for (int r = 0; r < a.dim(0); ++r) {
    double s = 0.0;
    for (int c = 0; c < a.dim(1); ++c) s += a.at2(r, c);
    REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("ms_deform_attn rejects out-of-range reference points") {
  ModelConfig cfg = toy_config();
  Rng rng(3);
  MSDeformAttn attn(cfg, rng);
  auto shapes = toy_shapes();
  Tensor memory = Tensor::randn({total_tokens(shapes), cfg.d_model}, rng);
  Tensor query = Tensor::randn({1, cfg.d_model}, rng);
  Tensor ref({1, 2}, {0.5, 1.2});
  REQUIRE_THROWS_AS(attn.forward(query, ref, memory, shapes), ShapeError);
}

TEST_CASE("ms_deform_attn gradients match finite differences") {
  ModelConfig cfg = toy_config();
  Rng rng(4);
  MSDeformAttn attn(cfg, rng);
  auto shapes = toy_shapes();
  const int S = total_tokens(shapes);
  Tensor memory = Tensor::randn({S, cfg.d_model}, rng);
  Tensor query = Tensor::randn({4, cfg.d_model}, rng);
  Tensor ref({4, 2});
  for (int n = 0; n < 4; ++n) {
    ref.at2(n, 0) = rng.uniform(0.1, 0.9);
    ref.at2(n, 1) = rng.uniform(0.1, 0.9);
  }
  ParamList params;
  attn.collect(params, "attn");
  Tensor r = Tensor::randn({4, cfg.d_model}, rng);
  Tensor gq, gmem;
  Tensor gref({4, 2});
  auto loss = [&] { return projected(attn.forward(query, ref, memory, shapes), r); };
  auto grads = [&] {
    zero_grads(params);
    gref.fill(0);
    attn.forward(query, ref, memory, shapes);
    attn.backward(r, gq, gmem, &gref);
  };
  std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&query, &gq}, {&memory, &gmem}, {&ref, &gref}};
  for (auto& p : params) pairs.push_back({p.value, p.grad});
  auto res = grad_check(loss, grads, pairs, 1e-5, 0, 2000);
  INFO("tensor " << res.tensor_index << " ana " << res.analytic << " num " << res.numeric);
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("encoder memory length equals the flattened pyramid size") {
  ModelConfig cfg = toy_config();
  Rng rng(5);
  Encoder enc(cfg, rng);
  auto shapes = toy_shapes();
  const int S = total_tokens(shapes);
  REQUIRE(S == 85);
  Tensor src = Tensor::randn({S, cfg.d_model}, rng);
  Tensor memory = enc.forward(src, shapes);
  REQUIRE(memory.shape() == std::vector<int>({S, cfg.d_model}));
}

TEST_CASE("zero encoder layers pass the source through unchanged") {
  ModelConfig cfg = toy_config();
  cfg.enc_layers = 0;
  Rng rng(6);
  Encoder enc(cfg, rng);
  auto shapes = toy_shapes();
  Tensor src = Tensor::randn({total_tokens(shapes), cfg.d_model}, rng);
  Tensor memory = enc.forward(src, shapes);
  for (int64_t i = 0; i < src.numel(); ++i) REQUIRE(memory[i] == src[i]);
}

TEST_CASE("encoder forward is deterministic") {
  ModelConfig cfg = toy_config();
  Rng rng(7);
  Encoder enc(cfg, rng);
  auto shapes = toy_shapes();
  Tensor src = Tensor::randn({total_tokens(shapes), cfg.d_model}, rng);
  Tensor a = enc.forward(src, shapes);
  Tensor b = enc.forward(src, shapes);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("decoder emits per-layer detection sets with sigmoid-bounded boxes") {
  ModelConfig cfg = toy_config();
  cfg.dec_layers = 2;
  Rng rng(8);
  Decoder dec(cfg, rng);
  auto shapes = toy_shapes();
  Tensor memory = Tensor::randn({total_tokens(shapes), cfg.d_model}, rng);
  auto outs = dec.forward(memory, shapes);
  REQUIRE(outs.size() == 2);
  for (auto& o : outs) {
    REQUIRE(o.logits.shape() == std::vector<int>({cfg.queries, cfg.num_classes}));
    REQUIRE(o.boxes.shape() == std::vector<int>({cfg.queries, 4}));
    for (int64_t i = 0; i < o.boxes.numel(); ++i) {
      REQUIRE(o.boxes[i] > 0.0);
      REQUIRE(o.boxes[i] < 1.0);
    }
  }
  // reference points in (0,1)^2
  for (int64_t i = 0; i < dec.reference_points().numel(); ++i) {
    REQUIRE(dec.reference_points()[i] > 0.0);
    REQUIRE(dec.reference_points()[i] < 1.0);
  }
}

TEST_CASE("encoder+decoder end-to-end gradients match finite differences") {
  ModelConfig cfg = toy_config();
  Rng rng(9);
  Encoder enc(cfg, rng);
  Decoder dec(cfg, rng);
  auto shapes = toy_shapes();
  const int S = total_tokens(shapes);
  Tensor src = Tensor::randn({S, cfg.d_model}, rng);
  ParamList params;
  enc.collect(params, "enc");
  dec.collect(params, "dec");

  std::vector<Tensor> rl, rb;
  for (int i = 0; i < cfg.dec_layers; ++i) {
    rl.push_back(Tensor::randn({cfg.queries, cfg.num_classes}, rng));
    rb.push_back(Tensor::randn({cfg.queries, 4}, rng));
  }
  Tensor gsrc;
  auto loss = [&] {
    auto outs = dec.forward(enc.forward(src, shapes), shapes);
    double s = 0.0;
    for (size_t i = 0; i < outs.size(); ++i)
      s += projected(outs[i].logits, rl[i]) + projected(outs[i].boxes, rb[i]);
    return s;
  };
  auto grads = [&] {
    zero_grads(params);
    dec.forward(enc.forward(src, shapes), shapes);
    Tensor gmem = dec.backward(rl, rb, S);
    gsrc = enc.backward(gmem);
  };
  std::vector<std::pair<Tensor*, Tensor*>> pairs = {{&src, &gsrc}};
  for (auto& p : params) pairs.push_back({p.value, p.grad});
  auto res = grad_check(loss, grads, pairs, 1e-5, 0, 600);
  INFO("tensor " << (res.tensor_index > 0 ? params[static_cast<size_t>(res.tensor_index - 1)].name
                                          : "src")
                 << " ana " << res.analytic << " num " << res.numeric);
  REQUIRE(res.max_rel_err < 1e-4);
}
