#include "koff/optim.hpp"

#include <cmath>

namespace koff {

AdamW::AdamW(std::vector<Tensor<float>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double update = cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] = static_cast<float>(static_cast<double>(w[j]) * decay - update);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double AdamW::grad_norm() const {
  double ss = 0;
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

}  // namespace koff
