#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "dfam/backbone.hpp"
#include "dfam/data.hpp"
#include "dfam/matcher.hpp"
#include "dfam/transformer.hpp"

namespace dfam {

// Flat "section.key = value" text configuration; '#' starts a comment. Every
// key the program understands is a field below; unknown keys are rejected so
// typos fail loudly.
struct RunConfig {
  BackboneConfig backbone;
  ModelConfig model;
  LossWeights loss;
  SceneSpec scene;

  // optimizer
  double lr_transformer = 1e-4;
  double lr_backbone = 2e-5;
  double beta1 = 0.9, beta2 = 0.999;
  double weight_decay = 1e-4;
  double decay_factor = 0.1;
  int decay_every = 20;  // epochs
  double grad_clip = 0.1;

  // training
  int epochs = 50;
  int batch_size = 2;
  uint64_t seed = 1;
  int resolution = 128;  // square training/eval resolution, divisible by 64
  int checkpoint_every = 10;  // epochs; 0 disables periodic checkpoints
  bool augment = true;
  double crop_min_scale = 0.6;

  // data: synthetic by default; coco paths switch to annotation ingestion
  int train_images = 64;
  int val_images = 16;
  std::string coco_annotations;  // empty: synthetic scenes from `scene`
  std::string coco_image_dir;
  std::string coco_categories;  // comma-separated category ids

  // inference decode
  double score_floor = 0.05;
  int max_detections = 100;

  void validate() const {
    if (!(lr_transformer > 0) || !(lr_backbone > 0)) throw ShapeError("config: learning rates must be > 0");
    if (batch_size < 1) throw ShapeError("config: batch size must be >= 1");
    if (!(decay_factor > 0) || decay_factor > 1) throw ShapeError("config: decay factor outside (0,1]");
    if (epochs < 1) throw ShapeError("config: epochs must be >= 1");
    if (resolution % 64 != 0) throw ShapeError("config: resolution must be divisible by 64");
    if (train_images < 1 && coco_annotations.empty()) throw ShapeError("config: no training data");
    model.validate();
    scene.validate();
  }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ShapeError("config: bad boolean '" + v + "'");
}

}  // namespace detail

inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& value) {
  auto i = [&] { return std::stoi(value); };
  auto d = [&] { return std::stod(value); };
  auto b = [&] { return detail::parse_bool(value); };

  if (key == "model.d_model") c.model.d_model = c.backbone.d_model = i();
  else if (key == "model.heads") c.model.heads = i();
  else if (key == "model.points") c.model.points = i();
  else if (key == "model.enc_layers") c.model.enc_layers = i();
  else if (key == "model.dec_layers") c.model.dec_layers = i();
  else if (key == "model.queries") c.model.queries = i();
  else if (key == "model.num_classes") c.model.num_classes = i();
  else if (key == "model.ffn_dim") c.model.ffn_dim = i();
  else if (key == "backbone.width_c2") c.backbone.widths[0] = i();
  else if (key == "backbone.width_c3") c.backbone.widths[1] = i();
  else if (key == "backbone.width_c4") c.backbone.widths[2] = i();
  else if (key == "backbone.width_c5") c.backbone.widths[3] = i();
  else if (key == "backbone.blocks_per_stage") c.backbone.blocks_per_stage = i();
  else if (key == "backbone.gn_groups") c.backbone.gn_groups = i();
  else if (key == "backbone.dfam_reduction") c.backbone.dfam_reduction = i();
  else if (key == "backbone.use_dfam") c.backbone.use_dfam = b();
  else if (key == "loss.w_cls") c.loss.cls = d();
  else if (key == "loss.w_l1") c.loss.l1 = d();
  else if (key == "loss.w_giou") c.loss.giou = d();
  else if (key == "loss.focal_alpha") c.loss.focal_alpha = d();
  else if (key == "loss.focal_gamma") c.loss.focal_gamma = d();
  else if (key == "loss.focal_cost") c.loss.focal_cost = b();
  else if (key == "optim.lr_transformer") c.lr_transformer = d();
  else if (key == "optim.lr_backbone") c.lr_backbone = d();
  else if (key == "optim.beta1") c.beta1 = d();
  else if (key == "optim.beta2") c.beta2 = d();
  else if (key == "optim.weight_decay") c.weight_decay = d();
  else if (key == "optim.decay_factor") c.decay_factor = d();
  else if (key == "optim.decay_every") c.decay_every = i();
  else if (key == "optim.grad_clip") c.grad_clip = d();
  else if (key == "train.epochs") c.epochs = i();
  else if (key == "train.batch_size") c.batch_size = i();
  else if (key == "train.seed") c.seed = static_cast<uint64_t>(std::stoull(value));
  else if (key == "train.resolution") c.resolution = i();
  else if (key == "train.checkpoint_every") c.checkpoint_every = i();
  else if (key == "train.augment") c.augment = b();
  else if (key == "train.crop_min_scale") c.crop_min_scale = d();
  else if (key == "data.train_images") c.train_images = i();
  else if (key == "data.val_images") c.val_images = i();
  else if (key == "data.coco_annotations") c.coco_annotations = value;
  else if (key == "data.coco_image_dir") c.coco_image_dir = value;
  else if (key == "data.coco_categories") c.coco_categories = value;
  else if (key == "scene.min_objects") c.scene.min_objects = i();
  else if (key == "scene.max_objects") c.scene.max_objects = i();
  else if (key == "scene.aspect_min") c.scene.aspect_min = d();
  else if (key == "scene.aspect_max") c.scene.aspect_max = d();
  else if (key == "scene.rot_min") c.scene.rot_min = d();
  else if (key == "scene.rot_max") c.scene.rot_max = d();
  else if (key == "scene.long_min") c.scene.long_min = d();
  else if (key == "scene.long_max") c.scene.long_max = d();
  else if (key == "scene.fill_min") c.scene.fill_min = d();
  else if (key == "scene.fill_max") c.scene.fill_max = d();
  else if (key == "scene.background") c.scene.background = d();
  else if (key == "scene.noise") c.scene.noise = d();
  else if (key == "eval.score_floor") c.score_floor = d();
  else if (key == "eval.max_detections") c.max_detections = i();
  else throw ShapeError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(std::istream& in) {
  RunConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    if (eq == std::string::npos) {
      if (!trim(line).empty())
        throw ShapeError("config line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ShapeError("config line " + std::to_string(lineno) + ": empty key or value");
    try {
      apply_config_entry(c, key, value);
    } catch (const std::invalid_argument&) {
      throw ShapeError("config line " + std::to_string(lineno) + ": bad value for " + key);
    }
  }
  // scene geometry follows the training resolution
  c.scene.width = c.scene.height = c.resolution;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ShapeError("config: cannot open " + path);
  return parse_config_text(f);
}

// serialized form for checkpoint snapshots; one line per key
inline std::string dump_config(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "model.d_model = " << c.model.d_model << "\n";
  o << "model.heads = " << c.model.heads << "\n";
  o << "model.points = " << c.model.points << "\n";
  o << "model.enc_layers = " << c.model.enc_layers << "\n";
  o << "model.dec_layers = " << c.model.dec_layers << "\n";
  o << "model.queries = " << c.model.queries << "\n";
  o << "model.num_classes = " << c.model.num_classes << "\n";
  o << "model.ffn_dim = " << c.model.ffn_dim << "\n";
  o << "backbone.width_c2 = " << c.backbone.widths[0] << "\n";
  o << "backbone.width_c3 = " << c.backbone.widths[1] << "\n";
  o << "backbone.width_c4 = " << c.backbone.widths[2] << "\n";
  o << "backbone.width_c5 = " << c.backbone.widths[3] << "\n";
  o << "backbone.blocks_per_stage = " << c.backbone.blocks_per_stage << "\n";
  o << "backbone.gn_groups = " << c.backbone.gn_groups << "\n";
  o << "backbone.dfam_reduction = " << c.backbone.dfam_reduction << "\n";
  o << "backbone.use_dfam = " << (c.backbone.use_dfam ? "true" : "false") << "\n";
  o << "loss.w_cls = " << c.loss.cls << "\n";
  o << "loss.w_l1 = " << c.loss.l1 << "\n";
  o << "loss.w_giou = " << c.loss.giou << "\n";
  o << "loss.focal_alpha = " << c.loss.focal_alpha << "\n";
  o << "loss.focal_gamma = " << c.loss.focal_gamma << "\n";
  o << "loss.focal_cost = " << (c.loss.focal_cost ? "true" : "false") << "\n";
  o << "optim.lr_transformer = " << c.lr_transformer << "\n";
  o << "optim.lr_backbone = " << c.lr_backbone << "\n";
  o << "optim.beta1 = " << c.beta1 << "\n";
  o << "optim.beta2 = " << c.beta2 << "\n";
  o << "optim.weight_decay = " << c.weight_decay << "\n";
  o << "optim.decay_factor = " << c.decay_factor << "\n";
  o << "optim.decay_every = " << c.decay_every << "\n";
  o << "optim.grad_clip = " << c.grad_clip << "\n";
  o << "train.epochs = " << c.epochs << "\n";
  o << "train.batch_size = " << c.batch_size << "\n";
  o << "train.seed = " << c.seed << "\n";
  o << "train.resolution = " << c.resolution << "\n";
  o << "train.checkpoint_every = " << c.checkpoint_every << "\n";
  o << "train.augment = " << (c.augment ? "true" : "false") << "\n";
  o << "train.crop_min_scale = " << c.crop_min_scale << "\n";
  o << "data.train_images = " << c.train_images << "\n";
  o << "data.val_images = " << c.val_images << "\n";
  if (!c.coco_annotations.empty()) o << "data.coco_annotations = " << c.coco_annotations << "\n";
  if (!c.coco_image_dir.empty()) o << "data.coco_image_dir = " << c.coco_image_dir << "\n";
  if (!c.coco_categories.empty()) o << "data.coco_categories = " << c.coco_categories << "\n";
  o << "scene.min_objects = " << c.scene.min_objects << "\n";
  o << "scene.max_objects = " << c.scene.max_objects << "\n";
  o << "scene.aspect_min = " << c.scene.aspect_min << "\n";
  o << "scene.aspect_max = " << c.scene.aspect_max << "\n";
  o << "scene.rot_min = " << c.scene.rot_min << "\n";
  o << "scene.rot_max = " << c.scene.rot_max << "\n";
  o << "scene.long_min = " << c.scene.long_min << "\n";
  o << "scene.long_max = " << c.scene.long_max << "\n";
  o << "scene.fill_min = " << c.scene.fill_min << "\n";
  o << "scene.fill_max = " << c.scene.fill_max << "\n";
  o << "scene.background = " << c.scene.background << "\n";
  o << "scene.noise = " << c.scene.noise << "\n";
  o << "eval.score_floor = " << c.score_floor << "\n";
  o << "eval.max_detections = " << c.max_detections << "\n";
  return o.str();
}

// toy profile: desk-scale model dimensions for CPU training
inline void apply_toy_profile(RunConfig& c) {
  c.model.d_model = c.backbone.d_model = 64;
  c.model.heads = 4;
  c.model.enc_layers = 2;
  c.model.dec_layers = 2;
  c.model.queries = 25;
  c.model.ffn_dim = 256;
  c.backbone.widths = {16, 16, 32, 64};
  c.backbone.blocks_per_stage = 1;
  c.backbone.gn_groups = 8;
  c.resolution = 128;
}

// full profile: the published recipe's dimensions (not CPU-practical)
inline void apply_full_profile(RunConfig& c) {
  c.model.d_model = c.backbone.d_model = 256;
  c.model.heads = 8;
  c.model.enc_layers = 6;
  c.model.dec_layers = 6;
  c.model.queries = 300;
  c.model.ffn_dim = 1024;
  c.backbone.widths = {64, 128, 256, 512};
  c.backbone.blocks_per_stage = 2;
  c.backbone.gn_groups = 16;
  c.resolution = 512;
}

}  // namespace dfam
