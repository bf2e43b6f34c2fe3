#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "dfam/tensor.hpp"

namespace dfam {

// Normalized (cx, cy, w, h) box.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct GroundTruth {
  int label = 0;
  Box box;
};
using GroundTruthSet = std::vector<GroundTruth>;

// Per-image prediction set: [Q, num_classes] logits and [Q, 4] boxes.
struct DetectionSet {
  Tensor logits;
  Tensor boxes;
};

// --------------------------------------------------------------------------
// Generalized IoU

inline void check_box(const Box& b, const char* who) {
  if (!(b.w > 0.0) || !(b.h > 0.0))
    throw ShapeError(std::string(who) + ": degenerate box (w or h <= 0)");
}

inline double giou(const Box& a, const Box& b) {
  check_box(a, "giou boxA");
  check_box(b, "giou boxB");
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  const double ew = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double eh = std::max(ay2, by2) - std::min(ay1, by1);
  const double enc = ew * eh;
  return inter / uni - (enc - uni) / enc;
}

// d(giou)/d(a.cx, a.cy, a.w, a.h); subgradients at corner ties follow the
// max/min choices below.
inline std::array<double, 4> giou_grad_a(const Box& a, const Box& b) {
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  const bool overlap = iw > 0 && ih > 0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = a.w * a.h + b.w * b.h - inter;
  const double ew = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double eh = std::max(ay2, by2) - std::min(ay1, by1);
  const double enc = ew * eh;

  // partials wrt the a-corners
  double dI[4] = {0, 0, 0, 0};  // ax1, ay1, ax2, ay2
  if (overlap) {
    if (ax1 >= bx1) dI[0] = -ih;
    if (ay1 >= by1) dI[1] = -iw;
    if (ax2 <= bx2) dI[2] = ih;
    if (ay2 <= by2) dI[3] = iw;
  }
  const double dA[4] = {-(ay2 - ay1), -(ax2 - ax1), ay2 - ay1, ax2 - ax1};
  double dE[4] = {0, 0, 0, 0};
  if (ax1 <= bx1) dE[0] = -eh;
  if (ay1 <= by1) dE[1] = -ew;
  if (ax2 >= bx2) dE[2] = eh;
  if (ay2 >= by2) dE[3] = ew;

  // G = I/U + U/E - 1, with U = A + B - I
  std::array<double, 4> gc{};
  for (int i = 0; i < 4; ++i) {
    const double dU = dA[i] - dI[i];
    gc[static_cast<size_t>(i)] =
        dI[i] / uni - inter / (uni * uni) * dU + dU / enc - uni / (enc * enc) * dE[i];
  }
  // chain corners -> (cx, cy, w, h)
  return {gc[0] + gc[2], gc[1] + gc[3], 0.5 * (gc[2] - gc[0]), 0.5 * (gc[3] - gc[1])};
}

// --------------------------------------------------------------------------
// Matching cost

struct LossWeights {
  double cls = 2.0, l1 = 5.0, giou = 2.0;
  bool focal_cost = true;  // focal-style classification cost; false: -p
  double focal_alpha = 0.25, focal_gamma = 2.0;
};

inline double sigmoid_cost(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// cost[g][q]; empty GT gives an empty (0 x Q) matrix
inline Tensor build_cost_matrix(const DetectionSet& preds, const GroundTruthSet& gts,
                                const LossWeights& w) {
  const int Q = preds.logits.dim(0);
  if (Q < 1) throw ShapeError("build_cost_matrix: empty prediction set");
  const int G = static_cast<int>(gts.size());
  Tensor cost({G, Q});
  for (int g = 0; g < G; ++g) {
    const Box& bg = gts[static_cast<size_t>(g)].box;
    const int cls = gts[static_cast<size_t>(g)].label;
    for (int q = 0; q < Q; ++q) {
      const double z = preds.logits.at2(q, cls);
      const double p = sigmoid_cost(z);
      double ccls;
      if (w.focal_cost) {
        const double pos = w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * softplus(-z);
        const double neg = (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) * softplus(z);
        ccls = pos - neg;
      } else {
        ccls = -p;
      }
      Box bq{preds.boxes.at2(q, 0), preds.boxes.at2(q, 1), preds.boxes.at2(q, 2),
             preds.boxes.at2(q, 3)};
      const double l1 = std::fabs(bq.cx - bg.cx) + std::fabs(bq.cy - bg.cy) +
                        std::fabs(bq.w - bg.w) + std::fabs(bq.h - bg.h);
      cost.at2(g, q) = w.cls * ccls + w.l1 * l1 + w.giou * (1.0 - giou(bq, bg));
    }
  }
  return cost;
}

// --------------------------------------------------------------------------
// Hungarian assignment: exactly optimal, lexicographically smallest among
// optima (rows in order, each fixed to the smallest column preserving the
// optimal total).

struct MatchAssignment {
  std::vector<int> gt_to_query;  // size |GT|, injective
};

namespace detail {

// e-maxx potential-based Hungarian; rows <= cols; returns col for each row.
inline double hungarian_core(const std::vector<std::vector<double>>& c, std::vector<int>& row_to_col) {
  const int n = static_cast<int>(c.size());
  if (n == 0) {
    row_to_col.clear();
    return 0.0;
  }
  const int m = static_cast<int>(c[0].size());
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(m) + 1);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, INF);
    std::vector<char> used(static_cast<size_t>(m) + 1, false);
    do {
      used[static_cast<size_t>(j0)] = true;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = INF;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = c[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  row_to_col.assign(static_cast<size_t>(n), -1);
  double total = 0.0;
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  for (int i = 0; i < n; ++i) total += c[static_cast<size_t>(i)][static_cast<size_t>(row_to_col[static_cast<size_t>(i)])];
  return total;
}

}  // namespace detail

inline MatchAssignment hungarian(const Tensor& cost) {
  require_rank(cost, 2, "hungarian cost");
  const int G = cost.dim(0), Q = cost.dim(1);
  if (G > Q) throw ShapeError("hungarian: more ground-truth rows than prediction columns");
  for (int64_t i = 0; i < cost.numel(); ++i)
    if (!std::isfinite(cost[i])) throw ShapeError("hungarian: non-finite cost entry");
  MatchAssignment out;
  if (G == 0) return out;

  std::vector<std::vector<double>> c(static_cast<size_t>(G), std::vector<double>(static_cast<size_t>(Q)));
  double scale = 0.0;
  for (int g = 0; g < G; ++g)
    for (int q = 0; q < Q; ++q) {
      c[static_cast<size_t>(g)][static_cast<size_t>(q)] = cost.at2(g, q);
      scale = std::max(scale, std::fabs(cost.at2(g, q)));
    }
  std::vector<int> assign;
  const double best = detail::hungarian_core(c, assign);
  const double eps = 1e-9 * (1.0 + scale) * G;

  // lexicographic refinement: fix rows in order to the smallest column that
  // keeps the total optimal
  out.gt_to_query.assign(static_cast<size_t>(G), -1);
  std::vector<char> used(static_cast<size_t>(Q), false);
  double fixed_cost = 0.0;
  for (int g = 0; g < G; ++g) {
    for (int q = 0; q < Q; ++q) {
      if (used[static_cast<size_t>(q)]) continue;
      // subproblem over rows g+1.. and unused columns != q
      std::vector<std::vector<double>> sub;
      std::vector<int> colmap;
      for (int qq = 0; qq < Q; ++qq)
        if (!used[static_cast<size_t>(qq)] && qq != q) colmap.push_back(qq);
      for (int gg = g + 1; gg < G; ++gg) {
        std::vector<double> row;
        row.reserve(colmap.size());
        for (int qq : colmap) row.push_back(c[static_cast<size_t>(gg)][static_cast<size_t>(qq)]);
        sub.push_back(std::move(row));
      }
      std::vector<int> subassign;
      const double subtotal = detail::hungarian_core(sub, subassign);
      if (fixed_cost + c[static_cast<size_t>(g)][static_cast<size_t>(q)] + subtotal <= best + eps) {
        out.gt_to_query[static_cast<size_t>(g)] = q;
        used[static_cast<size_t>(q)] = true;
        fixed_cost += c[static_cast<size_t>(g)][static_cast<size_t>(q)];
        break;
      }
    }
    if (out.gt_to_query[static_cast<size_t>(g)] < 0)
      throw ShapeError("hungarian: internal refinement failure");
  }
  return out;
}

// --------------------------------------------------------------------------
// Matched set loss with per-layer auxiliary terms

struct LossReport {
  double cls = 0, l1 = 0, giou_term = 0, total = 0;
  struct LayerLosses {
    double cls = 0, l1 = 0, giou_term = 0, total = 0;
  };
  std::vector<LayerLosses> per_layer;
};

// focal loss value and d/dz for one logit with binary target
inline double focal_value(double z, bool positive, double alpha, double gamma) {
  const double p = sigmoid_cost(z);
  if (positive) return alpha * std::pow(1.0 - p, gamma) * softplus(-z);
  return (1.0 - alpha) * std::pow(p, gamma) * softplus(z);
}

inline double focal_dz(double z, bool positive, double alpha, double gamma) {
  const double p = sigmoid_cost(z);
  const double pq = p * (1.0 - p);
  if (positive) {
    // L = alpha (1-p)^g (-log p); dL/dp = -alpha [g (1-p)^(g-1) (-log p) + (1-p)^g / p]
    const double dLdp =
        -alpha * (gamma * std::pow(1.0 - p, gamma - 1.0) * softplus(-z) + std::pow(1.0 - p, gamma) / p);
    return dLdp * pq;
  }
  const double dLdp =
      (1.0 - alpha) * (gamma * std::pow(p, gamma - 1.0) * softplus(z) - std::pow(p, gamma) / (1.0 - p) * -1.0);
  // L = (1-alpha) p^g (-log(1-p)); dL/dp = (1-alpha)[g p^(g-1) (-log(1-p)) + p^g/(1-p)]
  return dLdp * pq;
}

// Per-layer Hungarian matching plus focal / L1 / GIoU terms. Gradients treat
// each layer's assignment as a constant of the forward pass.
class SetCriterion {
 public:
  explicit SetCriterion(LossWeights weights, int num_classes)
      : w_(weights), num_classes_(num_classes) {}

  // fixed (when non-null) bypasses matching; used to probe gradients with the
  // assignment held constant
  LossReport compute(const std::vector<DetectionSet>& layers, const GroundTruthSet& gts,
                     const std::vector<MatchAssignment>* fixed = nullptr) {
    matches_.clear();
    grad_logits_.clear();
    grad_boxes_.clear();
    LossReport report;
    const double denom = std::max<size_t>(1, gts.size());
    for (size_t li = 0; li < layers.size(); ++li) {
      const auto& preds = layers[li];
      const int Q = preds.logits.dim(0);
      MatchAssignment match =
          fixed ? (*fixed)[li]
                : (gts.empty() ? MatchAssignment{} : hungarian(build_cost_matrix(preds, gts, w_)));
      std::vector<int> query_to_gt(static_cast<size_t>(Q), -1);
      for (size_t g = 0; g < match.gt_to_query.size(); ++g)
        query_to_gt[static_cast<size_t>(match.gt_to_query[g])] = static_cast<int>(g);

      Tensor glog(preds.logits.shape());
      Tensor gbox(preds.boxes.shape());
      LossReport::LayerLosses layer;
      for (int q = 0; q < Q; ++q) {
        const int g = query_to_gt[static_cast<size_t>(q)];
        for (int cidx = 0; cidx < num_classes_; ++cidx) {
          const bool pos = g >= 0 && gts[static_cast<size_t>(g)].label == cidx;
          const double z = preds.logits.at2(q, cidx);
          layer.cls += focal_value(z, pos, w_.focal_alpha, w_.focal_gamma) / denom;
          glog.at2(q, cidx) = w_.cls * focal_dz(z, pos, w_.focal_alpha, w_.focal_gamma) / denom;
        }
        if (g >= 0) {
          const Box& bg = gts[static_cast<size_t>(g)].box;
          Box bq{preds.boxes.at2(q, 0), preds.boxes.at2(q, 1), preds.boxes.at2(q, 2),
                 preds.boxes.at2(q, 3)};
          const double d[4] = {bq.cx - bg.cx, bq.cy - bg.cy, bq.w - bg.w, bq.h - bg.h};
          for (int i = 0; i < 4; ++i) {
            layer.l1 += std::fabs(d[i]) / denom;
            gbox.at2(q, i) += w_.l1 * (d[i] > 0 ? 1.0 : (d[i] < 0 ? -1.0 : 0.0)) / denom;
          }
          layer.giou_term += (1.0 - giou(bq, bg)) / denom;
          const auto gg = giou_grad_a(bq, bg);
          for (int i = 0; i < 4; ++i) gbox.at2(q, i) += -w_.giou * gg[static_cast<size_t>(i)] / denom;
        }
      }
      layer.total = w_.cls * layer.cls + w_.l1 * layer.l1 + w_.giou * layer.giou_term;
      report.cls += layer.cls;
      report.l1 += layer.l1;
      report.giou_term += layer.giou_term;
      report.per_layer.push_back(layer);
      matches_.push_back(std::move(match));
      grad_logits_.push_back(std::move(glog));
      grad_boxes_.push_back(std::move(gbox));
    }
    report.total = w_.cls * report.cls + w_.l1 * report.l1 + w_.giou * report.giou_term;
    return report;
  }

  const std::vector<MatchAssignment>& matches() const { return matches_; }
  const std::vector<Tensor>& grad_logits() const { return grad_logits_; }
  const std::vector<Tensor>& grad_boxes() const { return grad_boxes_; }
  const LossWeights& weights() const { return w_; }

 private:
  LossWeights w_;
  int num_classes_;
  std::vector<MatchAssignment> matches_;
  std::vector<Tensor> grad_logits_, grad_boxes_;
};

}  // namespace dfam
