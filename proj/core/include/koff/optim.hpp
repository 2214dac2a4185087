#pragma once

#include <vector>

#include "koff/tensor.hpp"

namespace koff {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay over a fixed parameter list. Moments are
// kept in double; parameters stay in their storage type.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Tensor<float>> params, AdamWConfig cfg);

  void step();
  void zero_grad();
  double grad_norm() const;

  const std::vector<Tensor<float>>& params() const { return params_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long long steps() const { return t_; }

 private:
  std::vector<Tensor<float>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

}  // namespace koff
