// Command-line harness: train / eval / gradcheck / ablate / generate-data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfam/config.hpp"
#include "dfam/gradcheck_suite.hpp"
#include "dfam/train.hpp"

using namespace dfam;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string checkpoint;
  std::string out = "out";
  std::string precision = "f64";
  std::string profile;
  int64_t seed = -1;
};

RunConfig make_config(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.profile == "toy") apply_toy_profile(cfg);
  else if (o.profile == "full") apply_full_profile(cfg);
  else if (!o.profile.empty()) throw ShapeError("unknown profile '" + o.profile + "'");
  if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
  if (o.precision == "f32") precision_mode() = Precision::F32;
  else if (o.precision == "f64") precision_mode() = Precision::F64;
  else throw ShapeError("unknown precision '" + o.precision + "' (f32|f64)");
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_checkpoint = true) {
  cmd->add_option("--config", o.config_path, "run configuration file");
  if (with_checkpoint) cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "seed override");
  cmd->add_option("--precision", o.precision, "f64 (default) or f32");
  cmd->add_option("--profile", o.profile, "model size preset: toy or full");
}

nlohmann::json report_json(const APReport& r) {
  return {{"ap", r.ap},        {"ap50", r.ap50},          {"ap75", r.ap75},
          {"ap_small", r.ap_small}, {"ap_medium", r.ap_medium}, {"ap_large", r.ap_large},
          {"per_class", r.per_class}};
}

int cmd_train(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  Trainer trainer(cfg, o.out);
  if (!o.checkpoint.empty()) trainer.resume(o.checkpoint);
  EpochStats final = trainer.run();
  APReport report = trainer.evaluate(trainer.val_set());
  std::ofstream(o.out + "/final_metrics.json") << report_json(report).dump(1) << "\n";
  std::printf("trained %d epochs: loss %.6f ap %.4f ap50 %.4f\n", cfg.epochs, final.loss_total,
              report.ap, report.ap50);
  return 0;
}

int cmd_eval(const CommonOpts& o) {
  if (o.checkpoint.empty()) throw ShapeError("eval: --checkpoint is required");
  RunConfig cfg = make_config(o);
  Trainer trainer(cfg, o.out);
  trainer.resume(o.checkpoint);
  APReport report = trainer.evaluate(trainer.val_set());
  std::filesystem::create_directories(o.out);
  std::ofstream(o.out + "/metrics.json") << report_json(report).dump(1) << "\n";
  std::printf("ap %.4f ap50 %.4f ap75 %.4f aps %.4f apm %.4f apl %.4f\n", report.ap, report.ap50,
              report.ap75, report.ap_small, report.ap_medium, report.ap_large);
  return 0;
}

int cmd_gradcheck(const CommonOpts& o, const std::string& scope, bool corrupt) {
  if (o.precision == "f32") throw ShapeError("gradcheck requires --precision f64");
  auto results = run_gradcheck_suite(scope == "all" ? "" : scope, corrupt);
  if (results.empty()) throw ShapeError("gradcheck: scope '" + scope + "' matches no operations");
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-18s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "pass" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_ablate(const CommonOpts& o) {
  RunConfig cfg = make_config(o);
  nlohmann::json summary = run_ablation(cfg, o.out);
  std::printf("ablation: ap50 on %.4f off %.4f delta %.4f\n",
              summary["dfam_on"]["final_ap50"].get<double>(),
              summary["dfam_off"]["final_ap50"].get<double>(),
              summary["ap50_delta"].get<double>());
  return 0;
}

int cmd_generate_data(const CommonOpts& o, int count) {
  RunConfig cfg = make_config(o);
  SceneSpec spec = cfg.scene;
  spec.width = spec.height = cfg.resolution;
  spec.seed = cfg.seed;
  std::vector<AnnotatedImage> dataset;
  for (int i = 0; i < count; ++i) dataset.push_back(generate_scene(spec, i));
  save_coco_dataset(dataset, o.out + "/annotations.json", o.out + "/images", {"slender"});
  std::printf("wrote %d images to %s\n", count, o.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // reserved thread-count knob; all computation is currently single-threaded
  if (const char* threads = std::getenv("DFAM_THREADS"); threads && *threads)
    std::fprintf(stderr, "note: DFAM_THREADS=%s accepted but ignored (single-threaded build)\n",
                 threads);
  CLI::App app{"slender-object detector: training, evaluation, and verification"};
  app.require_subcommand(1);

  CommonOpts train_o, eval_o, grad_o, ablate_o, gen_o;
  std::string scope = "all";
  bool corrupt = false;
  int gen_count = 100;

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_o);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_o);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(grad, grad_o, false);
  grad->add_option("--scope", scope,
                   "operation filter: all, conv2d, deform_conv, dfam, attention, heads, loss");
  grad->add_flag("--corrupt", corrupt,
                 "negative control: perturb analytic gradients, every check must then fail");
  auto* ablate = app.add_subcommand("ablate", "train attention-on vs attention-off variants");
  add_common(ablate, ablate_o);
  auto* gen = app.add_subcommand("generate-data", "write a synthetic dataset");
  add_common(gen, gen_o, false);
  gen->add_option("--count", gen_count, "number of images");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(train_o);
    if (eval->parsed()) return cmd_eval(eval_o);
    if (grad->parsed()) return cmd_gradcheck(grad_o, scope, corrupt);
    if (ablate->parsed()) return cmd_ablate(ablate_o);
    if (gen->parsed()) return cmd_generate_data(gen_o, gen_count);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
