#include "koff/memory.hpp"

#include <cmath>

#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/ops.hpp"
#include "koff/rng.hpp"

namespace koff {

int MemoryConfig::resolved_first_layer(const ModelConfig& m) const {
  return first_layer < 0 ? m.n_layers / 2 : first_layer;
}

void MemoryConfig::validate(const ModelConfig& m) const {
  if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
  if (n_kv < 0) throw ConfigError("n_kv must be >= 0");
  int f = resolved_first_layer(m);
  if (f < 0 || f >= m.n_layers)
    throw ConfigError("memory first_layer " + std::to_string(f) + " outside [0, " + std::to_string(m.n_layers) + ")");
}

MemoryConfig MemoryConfig::from_config(const Config& c) {
  MemoryConfig m;
  m.lora_rank = static_cast<int>(c.get_int("lora_rank", m.lora_rank));
  m.lora_alpha = c.get_double("lora_alpha", m.lora_alpha);
  m.n_kv = static_cast<int>(c.get_int("n_kv", m.n_kv));
  m.first_layer = static_cast<int>(c.get_int("memory_first_layer", m.first_layer));
  m.use_lora = c.get_bool("use_lora", m.use_lora);
  m.use_kv = c.get_bool("use_kv", m.use_kv);
  m.kv_init_std = c.get_double("kv_init_std", m.kv_init_std);
  return m;
}

template <typename T>
const LoraPair<T>* MemoryModule<T>::lora_at(SiteId site) const {
  auto it = lora.find(site);
  return it == lora.end() ? nullptr : &it->second;
}

template <typename T>
std::vector<Tensor<T>> MemoryModule<T>::lora_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& [s, p] : lora) {
    out.push_back(p.a);
    out.push_back(p.b);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> MemoryModule<T>::kv_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& [l, t] : mem_k) out.push_back(t);
  for (const auto& [l, t] : mem_v) out.push_back(t);
  return out;
}

template <typename T>
MemoryModule<T> init_module(const ModelConfig& model, const MemoryConfig& cfg, int domain, uint64_t seed) {
  cfg.validate(model);
  MemoryModule<T> m;
  m.domain = domain;
  m.first_layer = cfg.resolved_first_layer(model);
  m.n_kv = cfg.use_kv ? cfg.n_kv : 0;
  Rng rng = Rng(seed, Stream::kModuleInit).fork(static_cast<uint64_t>(domain));
  auto normal = [&](Shape s, double std) {
    std::vector<T> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
    return Tensor<T>::from(std::move(s), std::move(v));
  };
  const int64_t d = model.d_model, f = model.d_inter;
  for (int l = m.first_layer; l < model.n_layers; ++l) {
    if (cfg.use_lora) {
      for (auto p : kGatedProjs) {
        const int64_t in = p == Proj::kDown ? f : d;
        const int64_t out = (p == Proj::kGate || p == Proj::kUp) ? f : d;
        LoraPair<T> pair;
        pair.a = normal({cfg.lora_rank, in}, 1.0 / std::sqrt(static_cast<double>(in)));
        pair.b = Tensor<T>::zeros({out, cfg.lora_rank});
        pair.scale = static_cast<T>(cfg.lora_alpha / cfg.lora_rank);
        m.lora[{l, p}] = std::move(pair);
      }
    }
    if (cfg.use_kv && cfg.n_kv > 0) {
      m.mem_k[l] = normal({cfg.n_kv, d}, cfg.kv_init_std);
      m.mem_v[l] = normal({cfg.n_kv, d}, cfg.kv_init_std);
    }
  }
  return m;
}

template <typename T>
Tensor<T> masked_adapted_linear(const Tensor<T>& x, const Tensor<T>& w, const LoraPair<T>* lora,
                                const Tensor<T>* gate) {
  Tensor<T> y = linear(x, w);
  if (lora) {
    if (lora->a.dim(1) != w.dim(1) || lora->b.dim(0) != w.dim(0) || lora->a.dim(0) != lora->b.dim(1))
      throw ConfigError("LoRA factors " + shape_str(lora->a.shape()) + "/" + shape_str(lora->b.shape()) +
                        " do not fit weight " + shape_str(w.shape()));
    y = add(y, scale(linear(linear(x, lora->a), lora->b), lora->scale));
  }
  if (gate) {
    if (gate->rank() != 1 || gate->dim(0) != w.dim(0))
      throw ConfigError("gate of shape " + shape_str(gate->shape()) + " for weight " + shape_str(w.shape()));
    y = mul_row(y, *gate);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> inject_memory(const MemoryModule<T>& m, int layer, const Tensor<T>* k_gate,
                                              const Tensor<T>* v_gate, bool mask_memory) {
  if (!m.active(layer)) throw ConfigError("layer " + std::to_string(layer) + " is not an active memory layer");
  auto ik = m.mem_k.find(layer);
  auto iv = m.mem_v.find(layer);
  if (ik == m.mem_k.end() || iv == m.mem_v.end()) return {};
  Tensor<T> k = ik->second, v = iv->second;
  if (mask_memory) {
    if (k_gate) k = mul_row(k, *k_gate);
    if (v_gate) v = mul_row(v, *v_gate);
  }
  return {k, v};
}

uint64_t hash_module(const MemoryModule<float>& m) {
  uint64_t h = fnv1a(&m.domain, sizeof(m.domain));
  for (const auto& t : m.lora_parameters()) h = hash_tensor(t, h);
  for (const auto& t : m.kv_parameters()) h = hash_tensor(t, h);
  return h;
}

std::vector<float> kv_to_heads(const std::vector<float>& slots, int n_kv, int heads, int dh) {
  std::vector<float> out(slots.size());
  for (int n = 0; n < n_kv; ++n)
    for (int h = 0; h < heads; ++h)
      for (int e = 0; e < dh; ++e) out[(static_cast<size_t>(h) * n_kv + n) * dh + e] = slots[(static_cast<size_t>(n) * heads + h) * dh + e];
  return out;
}

std::vector<float> kv_from_heads(const std::vector<float>& heads_major, int n_kv, int heads, int dh) {
  std::vector<float> out(heads_major.size());
  for (int n = 0; n < n_kv; ++n)
    for (int h = 0; h < heads; ++h)
      for (int e = 0; e < dh; ++e) out[(static_cast<size_t>(n) * heads + h) * dh + e] = heads_major[(static_cast<size_t>(h) * n_kv + n) * dh + e];
  return out;
}

void save_module(Checkpoint& ck, const MemoryModule<float>& m, const ModelConfig& cfg) {
  const std::string base = "mem/" + std::to_string(m.domain) + "/";
  ck.meta()[base + "first_layer"] = std::to_string(m.first_layer);
  ck.meta()[base + "n_kv"] = std::to_string(m.n_kv);
  for (const auto& [s, p] : m.lora) {
    const std::string n = base + "lora/" + s.str() + "/";
    ck.put(n + "A", p.a);
    ck.put(n + "B", p.b);
    ck.put_f32(n + "scale", {1}, {p.scale});
  }
  const int h = cfg.n_heads, dh = cfg.d_head();
  for (const auto& [l, t] : m.mem_k)
    ck.put_f32(base + "kv/" + std::to_string(l) + "/K", {h, m.n_kv, dh}, kv_to_heads(t.values(), m.n_kv, h, dh));
  for (const auto& [l, t] : m.mem_v)
    ck.put_f32(base + "kv/" + std::to_string(l) + "/V", {h, m.n_kv, dh}, kv_to_heads(t.values(), m.n_kv, h, dh));
}

MemoryModule<float> load_module(const Checkpoint& ck, int domain, const ModelConfig& cfg) {
  const std::string base = "mem/" + std::to_string(domain) + "/";
  auto fl = ck.meta().find(base + "first_layer");
  if (fl == ck.meta().end()) throw InputError("checkpoint has no memory module for domain " + std::to_string(domain));
  MemoryModule<float> m;
  m.domain = domain;
  m.first_layer = std::stoi(fl->second);
  m.n_kv = std::stoi(ck.meta().at(base + "n_kv"));
  for (const auto& name : ck.names_with_prefix(base + "lora/")) {
    if (!name.ends_with("/A")) continue;
    auto stem = name.substr(0, name.size() - 1);  // ".../"
    auto rel = stem.substr((base + "lora/").size());  // "<layer>/<proj>/"
    auto slash = rel.find('/');
    SiteId s{std::stoi(rel.substr(0, slash)), parse_proj(rel.substr(slash + 1, rel.size() - slash - 2))};
    LoraPair<float> p{ck.get(stem + "A"), ck.get(stem + "B"), ck.get_f32(stem + "scale").at(0)};
    m.lora[s] = std::move(p);
  }
  const int h = cfg.n_heads, dh = cfg.d_head();
  for (const auto& name : ck.names_with_prefix(base + "kv/")) {
    auto rel = name.substr((base + "kv/").size());
    auto slash = rel.find('/');
    int layer = std::stoi(rel.substr(0, slash));
    auto slots = kv_from_heads(ck.get_f32(name), m.n_kv, h, dh);
    auto t = Tensor<float>::from({m.n_kv, cfg.d_model}, std::move(slots));
    (rel.substr(slash + 1) == "K" ? m.mem_k : m.mem_v)[layer] = t;
  }
  return m;
}

#define KOFF_INSTANTIATE_MEMORY(T)                                                                        \
  template struct MemoryModule<T>;                                                                        \
  template MemoryModule<T> init_module<T>(const ModelConfig&, const MemoryConfig&, int, uint64_t);       \
  template Tensor<T> masked_adapted_linear<T>(const Tensor<T>&, const Tensor<T>&, const LoraPair<T>*,     \
                                              const Tensor<T>*);                                          \
  template std::pair<Tensor<T>, Tensor<T>> inject_memory<T>(const MemoryModule<T>&, int, const Tensor<T>*, \
                                                            const Tensor<T>*, bool);

KOFF_INSTANTIATE_MEMORY(float)
KOFF_INSTANTIATE_MEMORY(double)

}  // namespace koff
