#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dfam/train.hpp"

using namespace dfam;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.model.d_model = c.backbone.d_model = 8;
  c.model.heads = 2;
  c.model.points = 2;
  c.model.enc_layers = 1;
  c.model.dec_layers = 1;
  c.model.queries = 5;
  c.model.num_classes = 1;
  c.model.ffn_dim = 16;
  c.backbone.widths = {8, 8, 8, 8};
  c.backbone.blocks_per_stage = 1;
  c.backbone.gn_groups = 4;
  c.resolution = 64;
  c.epochs = 1;
  c.batch_size = 2;
  c.train_images = 2;
  c.val_images = 1;
  c.checkpoint_every = 0;
  c.augment = false;
  c.scene.min_objects = 1;
  c.scene.max_objects = 1;
  c.seed = 5;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const char* outroot() { return "/tmp/dfam_harness_test"; }

}  // namespace

TEST_CASE("config parser reads dotted keys, comments, and rejects unknowns") {
  std::istringstream text(
      "# a comment\n"
      "train.epochs = 3   # trailing comment\n"
      "optim.lr_transformer = 0.0002\n"
      "backbone.use_dfam = false\n"
      "\n"
      "loss.w_l1 = 4.5\n");
  RunConfig c = parse_config_text(text);
  REQUIRE(c.epochs == 3);
  REQUIRE(c.lr_transformer == 0.0002);
  REQUIRE_FALSE(c.backbone.use_dfam);
  REQUIRE(c.loss.l1 == 4.5);
  // documented defaults hold for everything else
  REQUIRE(c.lr_backbone == 2e-5);
  REQUIRE(c.batch_size == 2);
  REQUIRE(c.decay_every == 20);

  std::istringstream bad("optim.lr_tranformer = 1e-4\n");
  REQUIRE_THROWS_AS(parse_config_text(bad), ShapeError);
  std::istringstream badval("train.epochs = soon\n");
  REQUIRE_THROWS_AS(parse_config_text(badval), ShapeError);
  std::istringstream noeq("just some words\n");
  REQUIRE_THROWS_AS(parse_config_text(noeq), ShapeError);
}

TEST_CASE("config invariants are enforced") {
  std::istringstream neg_lr("optim.lr_transformer = 0\n");
  REQUIRE_THROWS_AS(parse_config_text(neg_lr), ShapeError);
  std::istringstream bad_batch("train.batch_size = 0\n");
  REQUIRE_THROWS_AS(parse_config_text(bad_batch), ShapeError);
  std::istringstream bad_decay("optim.decay_factor = 1.5\n");
  REQUIRE_THROWS_AS(parse_config_text(bad_decay), ShapeError);
  std::istringstream bad_res("train.resolution = 100\n");
  REQUIRE_THROWS_AS(parse_config_text(bad_res), ShapeError);
}

TEST_CASE("config dump round-trips through the parser") {
  RunConfig c = tiny_config();
  c.lr_transformer = 3.25e-4;
  c.loss.focal_gamma = 1.75;
  c.scene.aspect_max = 17.5;
  std::istringstream text(dump_config(c));
  RunConfig back = parse_config_text(text);
  REQUIRE(back.model.d_model == c.model.d_model);
  REQUIRE(back.lr_transformer == c.lr_transformer);
  REQUIRE(back.loss.focal_gamma == c.loss.focal_gamma);
  REQUIRE(back.scene.aspect_max == c.scene.aspect_max);
  REQUIRE(back.backbone.widths == c.backbone.widths);
  REQUIRE(back.seed == c.seed);
}

TEST_CASE("adam matches a scalar reference to 1e-12") {
  Tensor p({1}, {0.5});
  Tensor g({1});
  ParamList params = {{"p", &p, &g, false}};
  Adam opt(params);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, wd = 1e-4;

  // independent scalar trace of the same update rule
  double rp = 0.5, rm = 0, rv = 0;
  for (int t = 1; t <= 25; ++t) {
    const double grad = 0.3 * rp + std::sin(t);  // any deterministic gradient
    g[0] = 0.3 * p[0] + std::sin(t);
    opt.step(params, lr, lr, b1, b2, wd, 0.0);

    rm = b1 * rm + (1 - b1) * grad;
    rv = b2 * rv + (1 - b2) * grad * grad;
    const double mhat = rm / (1 - std::pow(b1, t));
    const double vhat = rv / (1 - std::pow(b2, t));
    rp -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + wd * rp);
    REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(rp, 1e-12));
  }
}

TEST_CASE("parameter groups apply distinct learning rates") {
  Tensor pt({1}, {0.0}), pb({1}, {0.0});
  Tensor gt({1}, {2.0}), gb({1}, {2.0});
  ParamList params = {{"transformer.w", &pt, &gt, false}, {"backbone.w", &pb, &gb, true}};
  Adam opt(params);
  opt.step(params, 1e-4, 2e-5, 0.9, 0.999, 0.0, 0.0);
  // identical gradients, so the step sizes differ exactly by the rate ratio
  REQUIRE(pt[0] < 0.0);
  REQUIRE(pb[0] < 0.0);
  REQUIRE_THAT(pb[0] / pt[0], Catch::Matchers::WithinAbs(2e-5 / 1e-4, 1e-9));
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
  Tensor p1({2}, {0.0, 0.0}), p2({1}, {0.0});
  Tensor g1({2}, {3.0, 4.0}), g2({1}, {12.0});  // norm 13
  ParamList params = {{"a", &p1, &g1, false}, {"b", &p2, &g2, false}};
  Adam opt(params);
  opt.step(params, 1e-3, 1e-3, 0.9, 0.999, 0.0, 0.1);
  // clipping rescales the gradient vector in place before the moment update
  REQUIRE_THAT(std::sqrt(g1[0] * g1[0] + g1[1] * g1[1] + g2[0] * g2[0]),
               Catch::Matchers::WithinAbs(0.1, 1e-12));
  REQUIRE_THAT(g1[0] / g1[1], Catch::Matchers::WithinAbs(3.0 / 4.0, 1e-12));

  // below the threshold the gradients are untouched
  Tensor g3({1}, {0.05});
  Tensor p3({1});
  ParamList small = {{"c", &p3, &g3, false}};
  Adam opt2(small);
  opt2.step(small, 1e-3, 1e-3, 0.9, 0.999, 0.0, 0.1);
  REQUIRE(g3[0] == 0.05);
}

TEST_CASE("learning-rate schedule decays by the factor every 20 epochs") {
  RunConfig cfg;
  REQUIRE(schedule_scale(cfg, 0) == 1.0);
  REQUIRE(schedule_scale(cfg, 19) == 1.0);
  REQUIRE_THAT(schedule_scale(cfg, 20), Catch::Matchers::WithinAbs(0.1, 1e-15));
  REQUIRE_THAT(schedule_scale(cfg, 39), Catch::Matchers::WithinAbs(0.1, 1e-15));
  REQUIRE_THAT(schedule_scale(cfg, 40), Catch::Matchers::WithinAbs(0.01, 1e-15));
}

TEST_CASE("checkpoints round-trip bit-identically and diff mismatched shapes") {
  std::filesystem::create_directories(outroot());
  Rng rng(77);
  Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({5}, rng);
  Tensor ga({3, 4}), gb({5});
  Tensor extra = Tensor::randn({2, 2}, rng);
  ParamList params = {{"layer.weight", &a, &ga, false}, {"layer.bias", &b, &gb, true}};
  std::vector<CheckpointExtra> extras = {{"layer.weight.adam_m", &extra}};
  const std::string path = std::string(outroot()) + "/round.ckpt";
  save_checkpoint(path, params, extras, 7, 123, "train.epochs = 9\n");

  Tensor a2({3, 4}), b2({5}), e2({2, 2});
  Tensor ga2({3, 4}), gb2({5});
  ParamList params2 = {{"layer.weight", &a2, &ga2, false}, {"layer.bias", &b2, &gb2, true}};
  std::vector<CheckpointExtra> extras2 = {{"layer.weight.adam_m", &e2}};
  CheckpointInfo info = load_checkpoint(path, params2, extras2);
  REQUIRE(info.epoch == 7);
  REQUIRE(info.step == 123);
  REQUIRE(info.config_snapshot == "train.epochs = 9\n");
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a2[i] == a[i]);
  for (int64_t i = 0; i < b.numel(); ++i) REQUIRE(b2[i] == b[i]);
  for (int64_t i = 0; i < extra.numel(); ++i) REQUIRE(e2[i] == extra[i]);

  Tensor wrong({4, 3});
  Tensor gwrong({4, 3});
  ParamList bad = {{"layer.weight", &wrong, &gwrong, false}};
  try {
    load_checkpoint(path, bad, {});
    FAIL("expected a shape diff");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("layer.weight") != std::string::npos);
    REQUIRE(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}

TEST_CASE("one-epoch training smoke run emits csv and a reloadable checkpoint") {
  const std::string dir = std::string(outroot()) + "/smoke";
  std::filesystem::remove_all(dir);
  RunConfig cfg = tiny_config();
  Trainer trainer(cfg, dir);
  EpochStats final = trainer.run();
  REQUIRE(std::isfinite(final.loss_total));

  const std::string csv = slurp(dir + "/loss.csv");
  REQUIRE(csv.find("epoch,loss_total,loss_cls,loss_l1,loss_giou,ap,ap50") == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 2);  // header + 1 row

  // reload into a fresh model: identical evaluation
  Trainer fresh(cfg, dir + "_reload");
  fresh.resume(dir + "/checkpoint_final.ckpt");
  APReport r1 = trainer.evaluate(trainer.val_set());
  APReport r2 = fresh.evaluate(fresh.val_set());
  REQUIRE(r1.ap == r2.ap);
  REQUIRE(r1.ap50 == r2.ap50);
}

TEST_CASE("identical seed and config reproduce the loss csv exactly") {
  RunConfig cfg = tiny_config();
  cfg.epochs = 2;
  const std::string d1 = std::string(outroot()) + "/det1";
  const std::string d2 = std::string(outroot()) + "/det2";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  Trainer(cfg, d1).run();
  Trainer(cfg, d2).run();
  REQUIRE(slurp(d1 + "/loss.csv") == slurp(d2 + "/loss.csv"));
}

TEST_CASE("resume from a mid-run checkpoint reproduces the uninterrupted run") {
  RunConfig cfg = tiny_config();
  cfg.epochs = 2;
  cfg.checkpoint_every = 1;
  const std::string full_dir = std::string(outroot()) + "/full";
  const std::string part_dir = std::string(outroot()) + "/part";
  std::filesystem::remove_all(full_dir);
  std::filesystem::remove_all(part_dir);
  Trainer(cfg, full_dir).run();

  Trainer resumed(cfg, part_dir);
  resumed.resume(full_dir + "/checkpoint_epoch1.ckpt");
  REQUIRE(resumed.epoch() == 1);
  resumed.run();

  // the resumed run's rows must equal the tail of the uninterrupted run
  std::istringstream full_csv(slurp(full_dir + "/loss.csv"));
  std::string header, row1, row2;
  std::getline(full_csv, header);
  std::getline(full_csv, row1);
  std::getline(full_csv, row2);
  const std::string part = slurp(part_dir + "/loss.csv");
  REQUIRE(part == row2 + "\n");
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  const std::string dir = std::string(outroot()) + "/poison";
  std::filesystem::remove_all(dir);
  RunConfig cfg = tiny_config();
  Trainer trainer(cfg, dir);
  for (auto& p : trainer.model().params())
    if (p.name == "decoder.heads.cls.bias") (*p.value)[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    trainer.run();
    FAIL("expected divergence abort");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("training diverged") != std::string::npos);
    REQUIRE(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("model decode caps detections and applies the score floor") {
  RunConfig cfg = tiny_config();
  DfamDetr model(cfg.backbone, cfg.model, 3);
  SceneSpec spec = cfg.scene;
  spec.width = spec.height = cfg.resolution;
  spec.seed = 3;
  AnnotatedImage img = generate_scene(spec, 0);
  auto outs = model.forward(img.image);
  auto all = model.decode(outs.back(), 0.0, 1000);
  REQUIRE(all.size() == static_cast<size_t>(cfg.model.queries * cfg.model.num_classes));
  for (size_t i = 1; i < all.size(); ++i) REQUIRE(all[i - 1].score >= all[i].score);
  auto capped = model.decode(outs.back(), 0.0, 3);
  REQUIRE(capped.size() == 3);
  auto floored = model.decode(outs.back(), 0.9, 1000);
  for (const auto& d : floored) REQUIRE(d.score >= 0.9);
}
