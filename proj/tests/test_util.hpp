#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "koff/ops.hpp"
#include "koff/rng.hpp"
#include "koff/tensor.hpp"

namespace koff::test {

inline Tensor<double> randn(Shape shape, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

inline Tensor<double> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Collapses any output to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& y, uint64_t seed = 7) {
  Rng rng(seed, Stream::kTest);
  return sum(mul(y, randn(y.shape(), rng)));
}

struct GradCheck {
  double max_rel = 0;
  double max_abs = 0;
  int64_t checked = 0;
};

// Central differences against reverse mode over every entry of params.
// Relative error uses max(|a|, |n|, floor) in the denominator so near-zero
// gradients are judged on absolute error.
inline GradCheck grad_check(std::vector<Tensor<double>> params, const std::function<Tensor<double>()>& loss_fn,
                            double h = 1e-5, double floor = 1e-4) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheck r;
  NoGradGuard no_grad;
  for (size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].mutable_data();
    for (size_t j = 0; j < d.size(); ++j) {
      const double keep = d[j];
      d[j] = keep + h;
      const double fp = loss_fn().item();
      d[j] = keep - h;
      const double fm = loss_fn().item();
      d[j] = keep;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - num);
      r.max_abs = std::max(r.max_abs, abs_err);
      r.max_rel = std::max(r.max_rel, abs_err / std::max({std::abs(a), std::abs(num), floor}));
      ++r.checked;
    }
  }
  return r;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return a.size() == b.size() ? m : INFINITY;
}

}  // namespace koff::test
