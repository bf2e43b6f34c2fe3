#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dfam/matcher.hpp"

namespace dfam {

// One decoded detection in an image.
struct Detection {
  int label = 0;
  double score = 0;
  Box box;
};

struct EvalSample {
  std::vector<Detection> detections;
  GroundTruthSet gt;
  std::vector<Box> ignore;  // crowd regions: overlapping unmatched detections are discounted
};

struct APReport {
  double ap = 0, ap50 = 0, ap75 = 0;
  double ap_small = 0, ap_medium = 0, ap_large = 0;
  std::vector<double> per_class;  // AP per label; -1 when the class has no GT
};

struct EvalConfig {
  int num_classes = 1;
  int eval_width = 128, eval_height = 128;  // area boundaries apply at this resolution
  double area_small = 32.0 * 32.0;          // pixel-area partition boundaries
  double area_large = 96.0 * 96.0;
};

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(
      0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double iy = std::max(
      0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

namespace detail {

struct ScoredFlag {
  double score;
  int image, index;  // deterministic order for tied scores
  bool tp;
  bool operator<(const ScoredFlag& o) const {
    if (score != o.score) return score > o.score;
    if (image != o.image) return image < o.image;
    return index < o.index;
  }
};

// AP for one class at one IoU threshold within one area range; returns -1 when
// no GT falls in the range. lo/hi bound the GT pixel area (half-open: [lo,hi)).
inline double ap_single(const std::vector<EvalSample>& samples, int cls, double thr, double lo,
                        double hi, const EvalConfig& cfg) {
  const double px = static_cast<double>(cfg.eval_width) * cfg.eval_height;
  std::vector<ScoredFlag> flags;
  int npos = 0;
  for (size_t si = 0; si < samples.size(); ++si) {
    const auto& s = samples[si];
    std::vector<int> gidx;
    std::vector<char> gignore;
    for (size_t g = 0; g < s.gt.size(); ++g) {
      if (s.gt[g].label != cls) continue;
      const double area = s.gt[g].box.w * s.gt[g].box.h * px;
      gidx.push_back(static_cast<int>(g));
      gignore.push_back(area < lo || area >= hi);
    }
    for (char ig : gignore)
      if (!ig) ++npos;

    // detections in score order within the image
    std::vector<int> order;
    for (size_t d = 0; d < s.detections.size(); ++d)
      if (s.detections[d].label == cls) order.push_back(static_cast<int>(d));
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return s.detections[static_cast<size_t>(a)].score > s.detections[static_cast<size_t>(b)].score;
    });

    std::vector<char> taken(gidx.size(), false);
    for (int d : order) {
      const Detection& det = s.detections[static_cast<size_t>(d)];
      int best = -1;
      double best_iou = thr;
      for (size_t k = 0; k < gidx.size(); ++k) {
        if (taken[k] || gignore[k]) continue;
        const double iou = box_iou(det.box, s.gt[static_cast<size_t>(gidx[k])].box);
        if (iou >= best_iou) {
          best_iou = iou;
          best = static_cast<int>(k);
        }
      }
      if (best >= 0) {
        taken[static_cast<size_t>(best)] = true;
        flags.push_back({det.score, static_cast<int>(si), d, true});
        continue;
      }
      // unmatched: discount area-ignored GT, crowd regions, and out-of-range detections
      bool discounted = false;
      for (size_t k = 0; k < gidx.size() && !discounted; ++k)
        if (gignore[k] && box_iou(det.box, s.gt[static_cast<size_t>(gidx[k])].box) >= thr)
          discounted = true;
      for (const auto& ig : s.ignore)
        if (!discounted && box_iou(det.box, ig) >= thr) discounted = true;
      const double darea = det.box.w * det.box.h * px;
      if (!discounted && (darea < lo || darea >= hi)) discounted = true;
      if (!discounted) flags.push_back({det.score, static_cast<int>(si), d, false});
    }
  }
  if (npos == 0) return -1.0;
  std::sort(flags.begin(), flags.end());

  // precision at each recall step, then 101-point interpolation
  std::vector<double> prec, rec;
  int tp = 0, fp = 0;
  for (const auto& f : flags) {
    f.tp ? ++tp : ++fp;
    prec.push_back(static_cast<double>(tp) / (tp + fp));
    rec.push_back(static_cast<double>(tp) / npos);
  }
  for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i)
    prec[static_cast<size_t>(i)] = std::max(prec[static_cast<size_t>(i)], prec[static_cast<size_t>(i) + 1]);
  double sum = 0;
  size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = r / 100.0;
    while (j < rec.size() && rec[j] < want) ++j;
    if (j < prec.size()) sum += prec[j];
  }
  return sum / 101.0;
}

// mean over classes and thresholds, skipping absent classes
inline double ap_mean(const std::vector<EvalSample>& samples, const std::vector<double>& thrs,
                      double lo, double hi, const EvalConfig& cfg,
                      std::vector<double>* per_class = nullptr) {
  double total = 0;
  int present = 0;
  for (int c = 0; c < cfg.num_classes; ++c) {
    double csum = 0;
    int cn = 0;
    for (double t : thrs) {
      const double ap = ap_single(samples, c, t, lo, hi, cfg);
      if (ap >= 0) {
        csum += ap;
        ++cn;
      }
    }
    const double cap = cn ? csum / cn : -1.0;
    if (per_class) per_class->push_back(cap);
    if (cn) {
      total += cap;
      ++present;
    }
  }
  return present ? total / present : 0.0;
}

}  // namespace detail

inline APReport evaluate_ap(const std::vector<EvalSample>& samples, const EvalConfig& cfg) {
  std::vector<double> thrs;
  for (int i = 0; i < 10; ++i) thrs.push_back(0.5 + 0.05 * i);
  const double inf = std::numeric_limits<double>::infinity();
  APReport r;
  r.ap = detail::ap_mean(samples, thrs, 0, inf, cfg, &r.per_class);
  r.ap50 = detail::ap_mean(samples, {0.5}, 0, inf, cfg);
  r.ap75 = detail::ap_mean(samples, {0.75}, 0, inf, cfg);
  r.ap_small = detail::ap_mean(samples, thrs, 0, cfg.area_small, cfg);
  r.ap_medium = detail::ap_mean(samples, thrs, cfg.area_small, cfg.area_large, cfg);
  r.ap_large = detail::ap_mean(samples, thrs, cfg.area_large, inf, cfg);
  return r;
}

}  // namespace dfam
