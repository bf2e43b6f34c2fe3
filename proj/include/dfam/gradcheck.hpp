#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dfam/rng.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int tensor_index = -1;
  int64_t coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central finite-difference check. `loss` evaluates the forward scalar;
// `compute_grads` runs forward+backward and must leave d(loss)/d(value) in each
// grad tensor. Coordinates above `max_coords` are subsampled with a seeded rng.
inline GradCheckResult grad_check(const std::function<double()>& loss,
                                  const std::function<void()>& compute_grads,
                                  const std::vector<std::pair<Tensor*, Tensor*>>& value_grad,
                                  double eps = 1e-5, uint64_t seed = 7,
                                  int64_t max_coords = 10000, double abs_tol = 1e-9) {
  if (precision_mode() != Precision::F64)
    throw std::runtime_error("grad_check requires 64-bit precision mode");

  compute_grads();
  std::vector<Tensor> analytic;
  analytic.reserve(value_grad.size());
  for (const auto& [v, g] : value_grad) {
    (void)v;
    analytic.push_back(*g);
  }

  int64_t total = 0;
  for (const auto& [v, g] : value_grad) {
    (void)g;
    total += v->numel();
  }

  Rng rng(seed, 0xfd);
  GradCheckResult res;
  for (size_t t = 0; t < value_grad.size(); ++t) {
    Tensor* v = value_grad[t].first;
    const int64_t n = v->numel();
    // per-tensor share of the coordinate budget
    int64_t budget = total <= max_coords ? n : std::max<int64_t>(1, max_coords * n / total);
    for (int64_t k = 0; k < budget; ++k) {
      const int64_t i = total <= max_coords ? k : static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
      const double orig = (*v)[i];
      (*v)[i] = orig + eps;
      const double fp = loss();
      (*v)[i] = orig - eps;
      const double fm = loss();
      (*v)[i] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[t][i];
      if (!std::isfinite(num) || !std::isfinite(ana))
        throw std::runtime_error("grad_check: non-finite gradient at tensor " + std::to_string(t) +
                                 " coord " + std::to_string(i));
      // differences below abs_tol are indistinguishable from central-difference
      // rounding noise, independent of the gradient's own magnitude
      if (std::fabs(ana - num) < abs_tol) continue;
      const double denom = std::max({std::fabs(ana), std::fabs(num), 1e-8});
      const double rel = std::fabs(ana - num) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.tensor_index = static_cast<int>(t);
        res.coord = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace dfam
