#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dfam/checkpoint.hpp"
#include "dfam/config.hpp"
#include "dfam/data.hpp"
#include "dfam/eval.hpp"
#include "dfam/model.hpp"

namespace dfam {

// Adam with decoupled weight decay and per-group learning rates. The update,
// per coordinate (g already clipped):
//   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
//   p -= lr (m/(1-b1^t) / (sqrt(v/(1-b2^t)) + 1e-8) + wd p)
class Adam {
 public:
  static constexpr double kEps = 1e-8;

  Adam() = default;
  explicit Adam(const ParamList& params) {
    for (const auto& p : params) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }

  // applies global-norm gradient clipping in place, then one Adam step
  void step(const ParamList& params, double lr_transformer, double lr_backbone, double beta1,
            double beta2, double weight_decay, double grad_clip) {
    double sq = 0;
    for (const auto& p : params)
      for (int64_t i = 0; i < p.grad->numel(); ++i) sq += (*p.grad)[i] * (*p.grad)[i];
    const double norm = std::sqrt(sq);
    if (grad_clip > 0 && norm > grad_clip)
      for (const auto& p : params) p.grad->scale_(grad_clip / norm);
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    for (size_t k = 0; k < params.size(); ++k) {
      const auto& p = params[k];
      const double lr = p.backbone ? lr_backbone : lr_transformer;
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (int64_t i = 0; i < p.value->numel(); ++i) {
        const double g = (*p.grad)[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        (*p.value)[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * (*p.value)[i]);
      }
    }
  }

  int steps() const { return t_; }
  void set_steps(int t) { t_ = t; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }

 private:
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

// epoch starts at 0; rates drop by decay_factor every decay_every epochs
inline double schedule_scale(const RunConfig& cfg, int epoch) {
  return std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

struct EpochStats {
  double loss_total = 0, loss_cls = 0, loss_l1 = 0, loss_giou = 0;
  double ap = 0, ap50 = 0;
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const std::string& out_dir)
      : cfg_(cfg),
        out_dir_(out_dir),
        model_(cfg.backbone, cfg.model, cfg.seed),
        opt_(model_.params()),
        crit_(cfg.loss, cfg.model.num_classes) {
    std::filesystem::create_directories(out_dir_);
    build_datasets();
  }

  DfamDetr& model() { return model_; }
  Adam& optimizer() { return opt_; }
  const std::vector<AnnotatedImage>& train_set() const { return train_; }
  const std::vector<AnnotatedImage>& val_set() const { return val_; }
  int epoch() const { return epoch_; }

  void resume(const std::string& checkpoint_path) {
    const CheckpointInfo info = load_checkpoint(checkpoint_path, model_.params(), moment_extras());
    if (precision_mode() == Precision::F64 && info.precision != "f64")
      throw ShapeError("resume: checkpoint precision " + info.precision + " under a 64-bit run");
    opt_.set_steps(info.step);
    epoch_ = info.epoch;
  }

  // runs through cfg.epochs; appends one CSV row per epoch; returns final stats
  EpochStats run(int max_steps = 0) {
    const std::string csv_path = out_dir_ + "/loss.csv";
    std::ofstream csv(csv_path, epoch_ == 0 ? std::ios::trunc : std::ios::app);
    if (epoch_ == 0) csv << "epoch,loss_total,loss_cls,loss_l1,loss_giou,ap,ap50\n";
    EpochStats last;
    int steps_done = 0;
    for (; epoch_ < cfg_.epochs; ++epoch_) {
      EpochStats s = run_epoch(epoch_, max_steps, steps_done);
      APReport ap = evaluate(val_);
      s.ap = ap.ap;
      s.ap50 = ap.ap50;
      csv << epoch_ + 1 << ',' << fmt(s.loss_total) << ',' << fmt(s.loss_cls) << ','
          << fmt(s.loss_l1) << ',' << fmt(s.loss_giou) << ',' << fmt(s.ap) << ',' << fmt(s.ap50)
          << "\n";
      csv.flush();
      last = s;
      if (cfg_.checkpoint_every > 0 && (epoch_ + 1) % cfg_.checkpoint_every == 0)
        save_at(out_dir_ + "/checkpoint_epoch" + std::to_string(epoch_ + 1) + ".ckpt",
                epoch_ + 1);
      if (max_steps > 0 && steps_done >= max_steps) {
        ++epoch_;
        break;
      }
    }
    save(out_dir_ + "/checkpoint_final.ckpt");
    return last;
  }

  // loss of one image without an optimizer step (diagnostics)
  LossReport image_loss(const AnnotatedImage& img) {
    auto outs = model_.forward(img.image);
    return crit_.compute(to_sets(outs), img.gt);
  }

  APReport evaluate(const std::vector<AnnotatedImage>& dataset) {
    EvalConfig ecfg;
    ecfg.num_classes = cfg_.model.num_classes;
    ecfg.eval_width = cfg_.resolution;
    ecfg.eval_height = cfg_.resolution;
    std::vector<EvalSample> samples;
    for (const auto& img : dataset) {
      auto outs = model_.forward(img.image);
      EvalSample s;
      s.detections = model_.decode(outs.back(), cfg_.score_floor, cfg_.max_detections);
      s.gt = img.gt;
      s.ignore = img.ignore;
      samples.push_back(std::move(s));
    }
    return evaluate_ap(samples, ecfg);
  }

  void save(const std::string& path) { save_at(path, epoch_); }

  // training losses per step, for loss-decrease checks
  const std::vector<double>& step_losses() const { return step_losses_; }

 private:
  static std::string fmt(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
  }

  void save_at(const std::string& path, int epochs_completed) {
    save_checkpoint(path, model_.params(), moment_extras(), epochs_completed, opt_.steps(),
                    dump_config(cfg_));
  }

  std::vector<CheckpointExtra> moment_extras() {
    std::vector<CheckpointExtra> extras;
    const ParamList& params = model_.params();
    for (size_t i = 0; i < params.size(); ++i) {
      extras.push_back({params[i].name + ".adam_m", &opt_.first_moments()[i]});
      extras.push_back({params[i].name + ".adam_v", &opt_.second_moments()[i]});
    }
    return extras;
  }

  void build_datasets() {
    if (!cfg_.coco_annotations.empty()) {
      std::vector<int> cats;
      std::stringstream ss(cfg_.coco_categories);
      for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) cats.push_back(std::stoi(tok));
      LoadStats stats;
      auto all = load_coco_annotations(cfg_.coco_annotations, cfg_.coco_image_dir, cats, &stats,
                                       &std::cerr);
      // deterministic split: every eighth image held out
      for (size_t i = 0; i < all.size(); ++i)
        (i % 8 == 7 ? val_ : train_).push_back(std::move(all[i]));
      return;
    }
    SceneSpec spec = cfg_.scene;
    spec.width = spec.height = cfg_.resolution;
    spec.seed = cfg_.seed;
    for (int i = 0; i < cfg_.train_images; ++i) train_.push_back(generate_scene(spec, i));
    for (int i = 0; i < cfg_.val_images; ++i)
      val_.push_back(generate_scene(spec, 1000000 + i));
  }

  static std::vector<DetectionSet> to_sets(const std::vector<DetectionOutput>& outs) {
    std::vector<DetectionSet> sets;
    for (const auto& o : outs) sets.push_back({o.logits, o.boxes});
    return sets;
  }

  EpochStats run_epoch(int epoch, int max_steps, int& steps_done) {
    // deterministic shuffle keyed by (seed, epoch)
    std::vector<int> order(train_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(cfg_.seed, 0xE000 + static_cast<uint64_t>(epoch));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[shuffle_rng.uniform_int(0, i)]);

    const double lr_scale = schedule_scale(cfg_, epoch);
    EpochStats stats;
    int images = 0, in_batch = 0, batch_index = 0;
    zero_grads(model_.params());
    for (size_t oi = 0; oi < order.size(); ++oi) {
      const AnnotatedImage& base = train_[static_cast<size_t>(order[oi])];
      AnnotatedImage sample = base;
      if (cfg_.augment) {
        CropParams cp;
        cp.out_width = cp.out_height = cfg_.resolution;
        cp.min_scale = cfg_.crop_min_scale;
        Rng aug_rng(cfg_.seed, 0xA000 + static_cast<uint64_t>(epoch) * 131071 +
                                   static_cast<uint64_t>(order[oi]));
        sample = random_crop_augment(base, aug_rng, cp);
      }

      auto outs = model_.forward(sample.image);
      const std::string where =
          " at epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(batch_index);
      for (const auto& o : outs)
        if (!o.logits.all_finite() || !o.boxes.all_finite())
          throw ShapeError("training diverged: non-finite model output" + where);
      LossReport report = crit_.compute(to_sets(outs), sample.gt);
      if (!std::isfinite(report.total))
        throw ShapeError("training diverged: non-finite loss" + where + " (cls " +
                         std::to_string(report.cls) + ", l1 " + std::to_string(report.l1) +
                         ", giou " + std::to_string(report.giou_term) + ")");
      model_.backward(crit_.grad_logits(), crit_.grad_boxes());
      stats.loss_total += report.total;
      stats.loss_cls += report.cls;
      stats.loss_l1 += report.l1;
      stats.loss_giou += report.giou_term;
      step_losses_.push_back(report.total);
      ++images;
      ++in_batch;

      if (in_batch == cfg_.batch_size || oi + 1 == order.size()) {
        // mean gradient over the batch
        for (const auto& p : model_.params()) p.grad->scale_(1.0 / in_batch);
        opt_.step(model_.params(), cfg_.lr_transformer * lr_scale, cfg_.lr_backbone * lr_scale,
                  cfg_.beta1, cfg_.beta2, cfg_.weight_decay, cfg_.grad_clip);
        zero_grads(model_.params());
        in_batch = 0;
        ++batch_index;
        ++steps_done;
        if (max_steps > 0 && steps_done >= max_steps) break;
      }
    }
    stats.loss_total /= images;
    stats.loss_cls /= images;
    stats.loss_l1 /= images;
    stats.loss_giou /= images;
    return stats;
  }

  RunConfig cfg_;
  std::string out_dir_;
  DfamDetr model_;
  Adam opt_;
  SetCriterion crit_;
  std::vector<AnnotatedImage> train_, val_;
  std::vector<double> step_losses_;
  int epoch_ = 0;
};

// DFAM on/off comparison with shared seed and data; writes both loss curves
// plus a JSON summary (final metrics, AP50 delta, epochs-to-threshold).
inline nlohmann::json run_ablation(const RunConfig& base_cfg, const std::string& out_dir) {
  auto curve_ap50 = [](const std::string& csv_path) {
    std::ifstream f(csv_path);
    std::string line;
    std::getline(f, line);  // header
    std::vector<double> ap50;
    while (std::getline(f, line)) {
      const auto pos = line.find_last_of(',');
      ap50.push_back(std::stod(line.substr(pos + 1)));
    }
    return ap50;
  };
  auto epochs_to = [](const std::vector<double>& curve, double threshold) {
    for (size_t i = 0; i < curve.size(); ++i)
      if (curve[i] >= threshold) return static_cast<int>(i) + 1;
    return -1;
  };

  RunConfig on_cfg = base_cfg;
  on_cfg.backbone.use_dfam = true;
  RunConfig off_cfg = base_cfg;
  off_cfg.backbone.use_dfam = false;

  Trainer on(on_cfg, out_dir + "/dfam_on");
  EpochStats on_final = on.run();
  Trainer off(off_cfg, out_dir + "/dfam_off");
  EpochStats off_final = off.run();

  const auto on_curve = curve_ap50(out_dir + "/dfam_on/loss.csv");
  const auto off_curve = curve_ap50(out_dir + "/dfam_off/loss.csv");
  nlohmann::json summary;
  summary["dfam_on"] = {{"final_ap", on_final.ap}, {"final_ap50", on_final.ap50},
                        {"final_loss", on_final.loss_total}};
  summary["dfam_off"] = {{"final_ap", off_final.ap}, {"final_ap50", off_final.ap50},
                         {"final_loss", off_final.loss_total}};
  summary["ap50_delta"] = on_final.ap50 - off_final.ap50;
  // epochs the DFAM variant needs to reach the baseline's final AP50
  summary["epochs_to_baseline_final_ap50"] = epochs_to(on_curve, off_final.ap50);
  summary["baseline_epochs"] = static_cast<int>(off_curve.size());
  std::ofstream(out_dir + "/ablation_summary.json") << summary.dump(1) << "\n";
  return summary;
}

}  // namespace dfam
