#pragma once

#include <map>
#include <span>
#include <vector>

#include "koff/model.hpp"
#include "koff/rng.hpp"

namespace koff {

struct HardConcreteConfig {
  double beta = 2.0;
  double gamma = -0.1;
  double zeta = 1.1;
  double lambda = 60.0;
  double s_star = 0.15;
  // Normalize the active fraction over all gated channels instead of per site.
  bool global_hat = false;

  void validate() const;
  // beta * ln(-gamma / zeta), the shift between log_alpha and P(z > 0).
  double l0_shift() const;
  static HardConcreteConfig from_config(const Config& c);
};

// Learned log_alpha per output channel of every gated site.
template <typename T>
struct GateSet {
  std::map<SiteId, Tensor<T>> log_alpha;

  std::vector<Tensor<T>> parameters() const;
  int64_t total_channels() const;
};

template <typename T>
GateSet<T> init_gates(const DenseModel<T>& model, double init_value);

template <typename U, typename T>
GateSet<U> cast_gates(const GateSet<T>& g) {
  GateSet<U> out;
  for (const auto& [s, t] : g.log_alpha) out.log_alpha[s] = cast<U>(t);
  return out;
}

using GateNoise = std::map<SiteId, std::vector<double>>;

// One uniform draw per channel per site, in site order.
template <typename T>
GateNoise draw_gate_noise(const GateSet<T>& gates, Rng& rng);

// z = clamp(sigmoid((ln u - ln(1-u) + log_alpha)/beta) * (zeta-gamma) + gamma, 0, 1)
template <typename T>
Tensor<T> sample_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg, Rng& rng);
template <typename T>
Tensor<T> sample_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg, std::span<const double> u);

template <typename T>
GateValues<T> sample_gates(const GateSet<T>& gates, const HardConcreteConfig& cfg, const GateNoise& noise);

// P(z_i > 0) = sigmoid(log_alpha_i - beta * ln(-gamma/zeta)).
double prob_active(double log_alpha, const HardConcreteConfig& cfg);

// Differentiable expected count of retained channels (scalar).
template <typename T>
Tensor<T> expected_active(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg);

// lambda * max(0, a_hat - (1 - s_star)), summed over sites (or once, globally).
template <typename T>
Tensor<T> hinge_penalty(const GateSet<T>& gates, const HardConcreteConfig& cfg);

// Test-time gate clamp(sigmoid(log_alpha) * (zeta-gamma) + gamma, 0, 1).
template <typename T>
Tensor<T> deterministic_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg);
double deterministic_gate_value(double log_alpha, const HardConcreteConfig& cfg);

template <typename T>
GateValues<T> deterministic_gates(const GateSet<T>& gates, const HardConcreteConfig& cfg);

// a_hat per site (expected active fraction), for logging.
std::map<SiteId, double> active_fractions(const GateSet<float>& gates, const HardConcreteConfig& cfg);

uint64_t hash_gates(const GateSet<float>& g);
void save_gates(Checkpoint& ck, const GateSet<float>& g);
GateSet<float> load_gates(const Checkpoint& ck);

}  // namespace koff
