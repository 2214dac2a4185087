#include "koff/gates.hpp"

#include <cmath>

#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/ops.hpp"

namespace koff {

void HardConcreteConfig::validate() const {
  if (!(beta > 0)) throw ConfigError("hard concrete beta must be > 0");
  if (!(gamma < 0 && zeta > 1)) throw ConfigError("hard concrete stretch needs gamma < 0 < 1 < zeta");
  if (!(lambda >= 0)) throw ConfigError("L0 lambda must be >= 0");
  if (!(s_star >= 0 && s_star < 1)) throw ConfigError("target sparsity s_star must lie in [0, 1)");
}

double HardConcreteConfig::l0_shift() const { return beta * std::log(-gamma / zeta); }

HardConcreteConfig HardConcreteConfig::from_config(const Config& c) {
  HardConcreteConfig h;
  h.beta = c.get_double("beta", h.beta);
  h.gamma = c.get_double("gamma", h.gamma);
  h.zeta = c.get_double("zeta", h.zeta);
  h.lambda = c.get_double("lambda", h.lambda);
  h.s_star = c.get_double("s_star", h.s_star);
  h.global_hat = c.get_bool("global_hat", h.global_hat);
  h.validate();
  return h;
}

template <typename T>
std::vector<Tensor<T>> GateSet<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& [s, t] : log_alpha) out.push_back(t);
  return out;
}

template <typename T>
int64_t GateSet<T>::total_channels() const {
  int64_t n = 0;
  for (const auto& [s, t] : log_alpha) n += t.numel();
  return n;
}

template <typename T>
GateSet<T> init_gates(const DenseModel<T>& model, double init_value) {
  GateSet<T> g;
  for (auto site : model.sites())
    g.log_alpha[site] = Tensor<T>::full({model.site_out(site)}, static_cast<T>(init_value));
  return g;
}

template <typename T>
GateNoise draw_gate_noise(const GateSet<T>& gates, Rng& rng) {
  GateNoise noise;
  for (const auto& [s, t] : gates.log_alpha) noise[s] = uniform_vector(rng, static_cast<size_t>(t.numel()));
  return noise;
}

template <typename T>
Tensor<T> sample_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg, std::span<const double> u) {
  return hard_concrete(log_alpha, u, cfg.beta, cfg.gamma, cfg.zeta);
}

template <typename T>
Tensor<T> sample_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg, Rng& rng) {
  auto u = uniform_vector(rng, static_cast<size_t>(log_alpha.numel()));
  return sample_gate(log_alpha, cfg, std::span<const double>(u));
}

template <typename T>
GateValues<T> sample_gates(const GateSet<T>& gates, const HardConcreteConfig& cfg, const GateNoise& noise) {
  GateValues<T> out;
  for (const auto& [s, t] : gates.log_alpha) {
    auto it = noise.find(s);
    if (it == noise.end()) throw ContractError("no gate noise for site " + s.str());
    out[s] = sample_gate(t, cfg, std::span<const double>(it->second));
  }
  return out;
}

double prob_active(double log_alpha, const HardConcreteConfig& cfg) {
  return 1.0 / (1.0 + std::exp(-(log_alpha - cfg.l0_shift())));
}

template <typename T>
Tensor<T> expected_active(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg) {
  return sum(sigmoid(add_scalar(log_alpha, static_cast<T>(-cfg.l0_shift()))));
}

template <typename T>
Tensor<T> hinge_penalty(const GateSet<T>& gates, const HardConcreteConfig& cfg) {
  if (gates.log_alpha.empty()) throw ContractError("hinge penalty needs at least one gated site");
  const T keep = static_cast<T>(1.0 - cfg.s_star);
  const T lambda = static_cast<T>(cfg.lambda);
  if (cfg.global_hat) {
    Tensor<T> total;
    for (const auto& [s, t] : gates.log_alpha) {
      auto e = expected_active(t, cfg);
      total = total.defined() ? add(total, e) : e;
    }
    auto a_hat = scale(total, T(1) / static_cast<T>(gates.total_channels()));
    return scale(relu(add_scalar(a_hat, -keep)), lambda);
  }
  Tensor<T> penalty;
  for (const auto& [s, t] : gates.log_alpha) {
    auto a_hat = scale(expected_active(t, cfg), T(1) / static_cast<T>(t.numel()));
    auto term = scale(relu(add_scalar(a_hat, -keep)), lambda);
    penalty = penalty.defined() ? add(penalty, term) : term;
  }
  return penalty;
}

double deterministic_gate_value(double log_alpha, const HardConcreteConfig& cfg) {
  double s = 1.0 / (1.0 + std::exp(-log_alpha));
  return std::clamp(s * (cfg.zeta - cfg.gamma) + cfg.gamma, 0.0, 1.0);
}

template <typename T>
Tensor<T> deterministic_gate(const Tensor<T>& log_alpha, const HardConcreteConfig& cfg) {
  std::vector<T> v(log_alpha.values().size());
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<T>(deterministic_gate_value(static_cast<double>(log_alpha.values()[i]), cfg));
  return Tensor<T>::from(log_alpha.shape(), std::move(v));
}

template <typename T>
GateValues<T> deterministic_gates(const GateSet<T>& gates, const HardConcreteConfig& cfg) {
  GateValues<T> out;
  for (const auto& [s, t] : gates.log_alpha) out[s] = deterministic_gate(t, cfg);
  return out;
}

std::map<SiteId, double> active_fractions(const GateSet<float>& gates, const HardConcreteConfig& cfg) {
  std::map<SiteId, double> out;
  for (const auto& [s, t] : gates.log_alpha) {
    double acc = 0;
    for (float la : t.values()) acc += prob_active(la, cfg);
    out[s] = acc / static_cast<double>(t.numel());
  }
  return out;
}

uint64_t hash_gates(const GateSet<float>& g) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [s, t] : g.log_alpha) h = hash_tensor(t, h);
  return h;
}

void save_gates(Checkpoint& ck, const GateSet<float>& g) {
  for (const auto& [s, t] : g.log_alpha) ck.put("gates/" + s.str() + "/log_alpha", t);
}

GateSet<float> load_gates(const Checkpoint& ck) {
  GateSet<float> g;
  for (const auto& name : ck.names_with_prefix("gates/")) {
    auto rel = name.substr(6);
    auto a = rel.find('/');
    auto b = rel.find('/', a + 1);
    SiteId s{std::stoi(rel.substr(0, a)), parse_proj(rel.substr(a + 1, b - a - 1))};
    g.log_alpha[s] = ck.get(name);
  }
  if (g.log_alpha.empty()) throw InputError("checkpoint contains no gates");
  return g;
}

#define KOFF_INSTANTIATE_GATES(T)                                                                              \
  template struct GateSet<T>;                                                                                  \
  template GateSet<T> init_gates<T>(const DenseModel<T>&, double);                                             \
  template GateNoise draw_gate_noise<T>(const GateSet<T>&, Rng&);                                              \
  template Tensor<T> sample_gate<T>(const Tensor<T>&, const HardConcreteConfig&, Rng&);                        \
  template Tensor<T> sample_gate<T>(const Tensor<T>&, const HardConcreteConfig&, std::span<const double>);     \
  template GateValues<T> sample_gates<T>(const GateSet<T>&, const HardConcreteConfig&, const GateNoise&);      \
  template Tensor<T> expected_active<T>(const Tensor<T>&, const HardConcreteConfig&);                          \
  template Tensor<T> hinge_penalty<T>(const GateSet<T>&, const HardConcreteConfig&);                           \
  template Tensor<T> deterministic_gate<T>(const Tensor<T>&, const HardConcreteConfig&);                       \
  template GateValues<T> deterministic_gates<T>(const GateSet<T>&, const HardConcreteConfig&);

KOFF_INSTANTIATE_GATES(float)
KOFF_INSTANTIATE_GATES(double)

}  // namespace koff
