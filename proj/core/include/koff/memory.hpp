#pragma once

#include <map>
#include <utility>
#include <vector>

#include "koff/model.hpp"

namespace koff {

struct MemoryConfig {
  int lora_rank = 8;
  double lora_alpha = 16.0;
  int n_kv = 16;
  // First layer carrying memory; -1 means the upper half of the stack.
  int first_layer = -1;
  bool use_lora = true;
  bool use_kv = true;
  double kv_init_std = 0.02;

  int resolved_first_layer(const ModelConfig& m) const;
  bool enabled() const { return use_lora || use_kv; }
  void validate(const ModelConfig& m) const;
  static MemoryConfig from_config(const Config& c);
};

template <typename T>
struct LoraPair {
  Tensor<T> a;  // [rank, d_in]
  Tensor<T> b;  // [d_out, rank], zero at init
  T scale = T(1);
};

// One domain's memory: LoRA pairs on the gated sites of the active layers and
// learned key/value slots prepended to attention there. KV slots are stored
// as [n_kv, n_heads*d_head] (channel-major like the K/V projections) and
// serialized as [n_heads, n_kv, d_head].
template <typename T>
struct MemoryModule {
  int domain = 0;
  int first_layer = 0;
  int n_kv = 0;
  std::map<SiteId, LoraPair<T>> lora;
  std::map<int, Tensor<T>> mem_k;
  std::map<int, Tensor<T>> mem_v;

  bool active(int layer) const { return layer >= first_layer; }
  const LoraPair<T>* lora_at(SiteId site) const;
  std::vector<Tensor<T>> lora_parameters() const;
  std::vector<Tensor<T>> kv_parameters() const;
};

template <typename T>
MemoryModule<T> init_module(const ModelConfig& model, const MemoryConfig& cfg, int domain, uint64_t seed);

template <typename U, typename T>
MemoryModule<U> cast_module(const MemoryModule<T>& m) {
  MemoryModule<U> out;
  out.domain = m.domain;
  out.first_layer = m.first_layer;
  out.n_kv = m.n_kv;
  for (const auto& [s, p] : m.lora) out.lora[s] = {cast<U>(p.a), cast<U>(p.b), static_cast<U>(p.scale)};
  for (const auto& [l, t] : m.mem_k) out.mem_k[l] = cast<U>(t);
  for (const auto& [l, t] : m.mem_v) out.mem_v[l] = cast<U>(t);
  return out;
}

template <typename T>
void set_requires_grad(MemoryModule<T>& m, bool on) {
  for (auto& t : m.lora_parameters()) t.set_requires_grad(on);
  for (auto& t : m.kv_parameters()) t.set_requires_grad(on);
}

// y = gate * (W x + scale * B (A x)); absent lora/gate drop their factor.
template <typename T>
Tensor<T> masked_adapted_linear(const Tensor<T>& x, const Tensor<T>& w, const LoraPair<T>* lora,
                                const Tensor<T>* gate);

// Memory keys/values for one active layer. With masking on, memory channels
// are multiplied by the layer's K/V gates exactly like text keys/values.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> inject_memory(const MemoryModule<T>& m, int layer, const Tensor<T>* k_gate,
                                              const Tensor<T>* v_gate, bool mask_memory);

uint64_t hash_module(const MemoryModule<float>& m);
void save_module(Checkpoint& ck, const MemoryModule<float>& m, const ModelConfig& cfg);
MemoryModule<float> load_module(const Checkpoint& ck, int domain, const ModelConfig& cfg);

// [n_kv, H*dh] <-> [H, n_kv, dh]
std::vector<float> kv_to_heads(const std::vector<float>& slots, int n_kv, int heads, int dh);
std::vector<float> kv_from_heads(const std::vector<float>& heads_major, int n_kv, int heads, int dh);

}  // namespace koff
