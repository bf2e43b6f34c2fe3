#include <catch2/catch_amalgamated.hpp>

#include "dfam/gradcheck.hpp"
#include "dfam/matcher.hpp"

using namespace dfam;

namespace {

// lexicographically smallest minimum-cost assignment by full enumeration;
// totals are summed in row order so equal assignments give bit-equal totals
struct BruteResult {
  std::vector<int> assign;
  double total = 0;
};

void enumerate(const Tensor& cost, int g, std::vector<int>& cur, std::vector<char>& used,
               double acc, BruteResult& best, bool& have) {
  const int G = cost.dim(0), Q = cost.dim(1);
  if (g == G) {
    if (!have || acc < best.total) {
      best.assign = cur;
      best.total = acc;
      have = true;
    }
    return;
  }
  for (int q = 0; q < Q; ++q) {
    if (used[static_cast<size_t>(q)]) continue;
    used[static_cast<size_t>(q)] = true;
    cur.push_back(q);
    enumerate(cost, g + 1, cur, used, acc + cost.at2(g, q), best, have);
    cur.pop_back();
    used[static_cast<size_t>(q)] = false;
  }
}

BruteResult brute_force(const Tensor& cost) {
  BruteResult best;
  bool have = false;
  std::vector<int> cur;
  std::vector<char> used(static_cast<size_t>(cost.dim(1)), false);
  enumerate(cost, 0, cur, used, 0.0, best, have);
  return best;
}

double row_order_total(const Tensor& cost, const std::vector<int>& assign) {
  double t = 0;
  for (size_t g = 0; g < assign.size(); ++g) t += cost.at2(static_cast<int>(g), assign[g]);
  return t;
}

Tensor logits_for(double z, int queries, int classes) {
  Tensor t({queries, classes});
  t.fill(z);
  return t;
}

}  // namespace

TEST_CASE("giou hand values") {
  Box a{0.5, 0.5, 1.0, 1.0};
  REQUIRE_THAT(giou(a, a), Catch::Matchers::WithinAbs(1.0, 1e-12));

  // corner-touching unit boxes: IoU 0, union 2, enclosing 4
  Box b{1.5, 1.5, 1.0, 1.0};
  REQUIRE_THAT(giou(a, b), Catch::Matchers::WithinAbs(-0.5, 1e-12));

  // half-overlapping unit boxes: inter .5, union 1.5, enclosing box = union
  Box c{1.0, 0.5, 1.0, 1.0};
  REQUIRE_THAT(giou(a, c), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("giou is symmetric and bounded on random pairs") {
  Rng rng(21);
  for (int t = 0; t < 200; ++t) {
    Box a{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.05, 1)};
    Box b{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.05, 1)};
    const double g1 = giou(a, b), g2 = giou(b, a);
    REQUIRE_THAT(g1, Catch::Matchers::WithinAbs(g2, 1e-12));
    REQUIRE(g1 >= -1.0);
    REQUIRE(g1 <= 1.0);
  }
}

TEST_CASE("giou rejects degenerate boxes") {
  Box ok{0.5, 0.5, 0.2, 0.2};
  REQUIRE_THROWS_AS(giou(Box{0.5, 0.5, 0.0, 0.2}, ok), ShapeError);
  REQUIRE_THROWS_AS(giou(ok, Box{0.5, 0.5, 0.2, -0.1}), ShapeError);
}

TEST_CASE("giou analytic gradient matches finite differences") {
  Rng rng(22);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    Box a{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
    Box b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
    const auto g = giou_grad_a(a, b);
    const double eps = 1e-6;
    double* fields[4] = {&a.cx, &a.cy, &a.w, &a.h};
    for (int i = 0; i < 4; ++i) {
      const double keep = *fields[i];
      *fields[i] = keep + eps;
      const double hi = giou(a, b);
      *fields[i] = keep - eps;
      const double lo = giou(a, b);
      *fields[i] = keep;
      const double num = (hi - lo) / (2 * eps);
      const double ana = g[static_cast<size_t>(i)];
      if (std::fabs(ana) < 1e-9 && std::fabs(num) < 1e-9) continue;  // flat coordinate
      const double rel = std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-8});
      REQUIRE(rel < 1e-4);
      ++checked;
    }
  }
  REQUIRE(checked > 100);
}

TEST_CASE("cost matrix shape and perfect-prediction value") {
  LossWeights w;
  w.focal_cost = false;  // probability-mode classification cost
  GroundTruthSet gts;
  gts.push_back({0, Box{0.5, 0.5, 0.25, 0.25}});

  DetectionSet preds;
  preds.logits = logits_for(40.0, 1, 2);  // p saturates to 1
  preds.boxes = Tensor({1, 4}, {0.5, 0.5, 0.25, 0.25});
  Tensor cost = build_cost_matrix(preds, gts, w);
  REQUIRE(cost.shape() == std::vector<int>({1, 1}));
  REQUIRE_THAT(cost.at2(0, 0), Catch::Matchers::WithinAbs(-w.cls, 1e-9));
}

TEST_CASE("cost matrix shape contract and column degeneracy") {
  LossWeights w;
  Rng rng(23);
  GroundTruthSet gts;
  for (int g = 0; g < 3; ++g)
    gts.push_back({g % 2, Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 0.2, 0.2}});
  DetectionSet preds;
  preds.logits = logits_for(-1.0, 25, 2);
  preds.boxes = Tensor({25, 4});
  for (int q = 0; q < 25; ++q) {
    preds.boxes.at2(q, 0) = 0.5;
    preds.boxes.at2(q, 1) = 0.5;
    preds.boxes.at2(q, 2) = 0.3;
    preds.boxes.at2(q, 3) = 0.3;
  }
  Tensor cost = build_cost_matrix(preds, gts, w);
  REQUIRE(cost.shape() == std::vector<int>({3, 25}));
  for (int g = 0; g < 3; ++g)
    for (int q = 1; q < 25; ++q) REQUIRE(cost.at2(g, q) == cost.at2(g, 0));

  GroundTruthSet empty;
  REQUIRE(build_cost_matrix(preds, empty, w).dim(0) == 0);
}

TEST_CASE("hungarian hand case and 1xN argmin") {
  Tensor c({2, 2}, {1, 2, 2, 1});
  auto m = hungarian(c);
  REQUIRE(m.gt_to_query == std::vector<int>({0, 1}));
  REQUIRE_THAT(row_order_total(c, m.gt_to_query), Catch::Matchers::WithinAbs(2.0, 0.0));

  Tensor row({1, 5}, {3, 1, 4, 0.5, 2});
  REQUIRE(hungarian(row).gt_to_query == std::vector<int>({3}));
}

TEST_CASE("hungarian rejects more rows than columns and non-finite entries") {
  Tensor wide({3, 2});
  REQUIRE_THROWS_AS(hungarian(wide), ShapeError);
  Tensor bad({1, 2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  REQUIRE_THROWS_AS(hungarian(bad), ShapeError);
}

TEST_CASE("hungarian matches the brute-force oracle on 200 seeded matrices") {
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 1000);
    const int G = rng.uniform_int(1, 7);
    const int Q = rng.uniform_int(G, 7);
    Tensor cost({G, Q});
    for (int64_t i = 0; i < cost.numel(); ++i) cost[i] = rng.uniform(-5, 5);
    auto got = hungarian(cost);
    auto want = brute_force(cost);
    INFO("seed " << seed << " G " << G << " Q " << Q);
    // random reals: the optimum is unique, totals must agree exactly
    REQUIRE(row_order_total(cost, got.gt_to_query) == want.total);
    REQUIRE(got.gt_to_query == want.assign);
  }
}

TEST_CASE("hungarian breaks ties lexicographically") {
  // every permutation has total 3
  Tensor flat({3, 3});
  flat.fill(1.0);
  REQUIRE(hungarian(flat).gt_to_query == std::vector<int>({0, 1, 2}));

  // two optima: {0->0,1->1} and {0->1,1->0}, both total 4
  Tensor tie({2, 3}, {2, 2, 9, 2, 2, 9});
  REQUIRE(hungarian(tie).gt_to_query == std::vector<int>({0, 1}));

  // integer matrices against the oracle, which enumerates lexicographically
  for (int seed = 0; seed < 60; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 5000);
    const int G = rng.uniform_int(2, 5);
    const int Q = rng.uniform_int(G, G + 2);
    Tensor cost({G, Q});
    for (int64_t i = 0; i < cost.numel(); ++i) cost[i] = static_cast<double>(rng.uniform_int(0, 3));
    auto got = hungarian(cost);
    auto want = brute_force(cost);
    INFO("seed " << seed);
    REQUIRE(got.gt_to_query == want.assign);
  }
}

TEST_CASE("hungarian assignment is invariant under positive cost scaling") {
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 7000);
    const int G = rng.uniform_int(1, 5);
    const int Q = rng.uniform_int(G, G + 3);
    Tensor cost({G, Q});
    for (int64_t i = 0; i < cost.numel(); ++i) cost[i] = rng.uniform(-3, 3);
    auto base = hungarian(cost);
    for (double s : {0.125, 7.0, 3 + 1e3}) {
      Tensor scaled = cost;
      scaled.scale_(s);
      REQUIRE(hungarian(scaled).gt_to_query == base.gt_to_query);
    }
  }
}

TEST_CASE("set loss: empty ground truth leaves only the classification term") {
  LossWeights w;
  SetCriterion crit(w, 3);
  DetectionSet preds;
  Rng rng(31);
  preds.logits = Tensor::randn({6, 3}, rng);
  preds.boxes = Tensor({6, 4});
  preds.boxes.fill(0.5);
  auto report = crit.compute({preds}, {});
  REQUIRE(report.l1 == 0.0);
  REQUIRE(report.giou_term == 0.0);
  REQUIRE(report.cls > 0.0);
  double expect = 0;
  for (int64_t i = 0; i < preds.logits.numel(); ++i)
    expect += focal_value(preds.logits[i], false, w.focal_alpha, w.focal_gamma);
  REQUIRE_THAT(report.cls, Catch::Matchers::WithinAbs(expect, 1e-12));
  for (int64_t i = 0; i < crit.grad_boxes()[0].numel(); ++i)
    REQUIRE(crit.grad_boxes()[0][i] == 0.0);
}

TEST_CASE("set loss vanishes in the perfect-prediction limit") {
  LossWeights w;
  SetCriterion crit(w, 2);
  GroundTruthSet gts;
  gts.push_back({1, Box{0.4, 0.6, 0.2, 0.3}});
  DetectionSet preds;
  preds.logits = Tensor({2, 2}, {-40, -40, -40, 40});  // query 1 predicts class 1
  preds.boxes = Tensor({2, 4}, {0.8, 0.8, 0.1, 0.1, 0.4, 0.6, 0.2, 0.3});
  auto report = crit.compute({preds}, gts);
  REQUIRE(report.l1 == 0.0);
  REQUIRE_THAT(report.giou_term, Catch::Matchers::WithinAbs(0.0, 1e-12));
  REQUIRE(report.cls < 1e-12);
  REQUIRE(report.total < 1e-10);
  REQUIRE(crit.matches()[0].gt_to_query == std::vector<int>({1}));
}

TEST_CASE("set loss report is consistent: total equals the weighted sum per layer") {
  LossWeights w;
  SetCriterion crit(w, 4);
  Rng rng(32);
  GroundTruthSet gts;
  for (int g = 0; g < 3; ++g)
    gts.push_back({rng.uniform_int(0, 3),
                   Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
                       rng.uniform(0.1, 0.3)}});
  std::vector<DetectionSet> layers;
  for (int l = 0; l < 3; ++l) {
    DetectionSet d;
    d.logits = Tensor::randn({8, 4}, rng);
    d.boxes = Tensor({8, 4});
    for (int64_t i = 0; i < d.boxes.numel(); ++i) d.boxes[i] = rng.uniform(0.1, 0.9);
    layers.push_back(std::move(d));
  }
  auto report = crit.compute(layers, gts);
  REQUIRE(report.per_layer.size() == 3);
  double cls = 0, l1 = 0, gi = 0;
  for (auto& pl : report.per_layer) {
    REQUIRE_THAT(pl.total, Catch::Matchers::WithinAbs(w.cls * pl.cls + w.l1 * pl.l1 + w.giou * pl.giou_term, 1e-9));
    cls += pl.cls;
    l1 += pl.l1;
    gi += pl.giou_term;
  }
  REQUIRE_THAT(report.cls, Catch::Matchers::WithinAbs(cls, 1e-12));
  REQUIRE_THAT(report.total,
               Catch::Matchers::WithinAbs(w.cls * report.cls + w.l1 * report.l1 + w.giou * report.giou_term, 1e-9));
  REQUIRE(report.cls >= 0.0);
  REQUIRE(report.l1 >= 0.0);
  for (auto& m : crit.matches()) {
    std::vector<char> seen(8, false);
    for (int q : m.gt_to_query) {
      REQUIRE(q >= 0);
      REQUIRE_FALSE(seen[static_cast<size_t>(q)]);
      seen[static_cast<size_t>(q)] = true;
    }
  }
}

TEST_CASE("shrinking a matched box's L1 distance never increases the loss") {
  LossWeights w;
  SetCriterion crit(w, 2);
  Rng rng(33);
  GroundTruthSet gts;
  gts.push_back({0, Box{0.5, 0.5, 0.3, 0.3}});
  DetectionSet preds;
  preds.logits = Tensor({3, 2}, {4, -4, -4, -4, -4, -4});
  preds.boxes = Tensor({3, 4}, {0.7, 0.6, 0.2, 0.25, 0.2, 0.2, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1});
  double prev = crit.compute({preds}, gts).total;
  REQUIRE(crit.matches()[0].gt_to_query == std::vector<int>({0}));
  for (double t : {0.25, 0.5, 0.75, 1.0}) {
    DetectionSet step = preds;
    step.boxes.at2(0, 0) = 0.7 + t * (0.5 - 0.7);
    step.boxes.at2(0, 1) = 0.6 + t * (0.5 - 0.6);
    step.boxes.at2(0, 2) = 0.2 + t * (0.3 - 0.2);
    step.boxes.at2(0, 3) = 0.25 + t * (0.3 - 0.25);
    const double cur = crit.compute({step}, gts).total;
    REQUIRE(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("set loss gradients match finite differences with the matching held fixed") {
  LossWeights w;
  SetCriterion crit(w, 3);
  Rng rng(34);
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
  auto res = grad_check(loss, grads, pairs, 1e-6, 0, 10000);
  INFO("tensor " << res.tensor_index << " coord " << res.coord << " ana " << res.analytic
                 << " num " << res.numeric);
  REQUIRE(res.max_rel_err < 1e-4);
}
