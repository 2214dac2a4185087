#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "koff/tensor.hpp"

namespace koff {

class Checkpoint;
class Config;

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_inter = 512;
  int max_seq_len = 128;

  int d_head() const { return d_model / n_heads; }
  void validate() const;

  static ModelConfig from_config(const Config& c);
  void write_meta(std::map<std::string, std::string>& meta) const;
  static ModelConfig from_meta(const std::map<std::string, std::string>& meta);
  bool operator==(const ModelConfig&) const = default;
};

// The five projections that carry gates and LoRA adapters. W_Q and W_O are
// never gated.
enum class Proj : int { kK = 0, kV, kGate, kUp, kDown };
inline constexpr std::array<Proj, 5> kGatedProjs = {Proj::kK, Proj::kV, Proj::kGate, Proj::kUp, Proj::kDown};

std::string_view proj_name(Proj p);
Proj parse_proj(std::string_view name);

struct SiteId {
  int layer = 0;
  Proj proj = Proj::kK;

  auto operator<=>(const SiteId&) const = default;
  std::string str() const;  // "<layer>/<proj>"
};

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [d_model]
  Tensor<T> wq, wk, wv, wo;  // [d_model, d_model], rows are output channels
  Tensor<T> mlp_norm;  // [d_model]
  Tensor<T> w_gate, w_up;  // [d_inter, d_model]
  Tensor<T> w_down;  // [d_model, d_inter]
};

template <typename T>
struct DenseModel {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab, d_model], tied with the output head
  Tensor<T> pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  const Tensor<T>& site_weight(SiteId site) const;
  int64_t site_out(SiteId site) const { return site_weight(site).dim(0); }
  std::vector<SiteId> sites() const;
  // Everything except token and position embeddings.
  int64_t non_embedding_params() const;
};

template <typename T>
DenseModel<T> init_dense(const ModelConfig& cfg, uint64_t seed);

template <typename U, typename T>
DenseModel<U> cast_model(const DenseModel<T>& m) {
  DenseModel<U> out;
  out.config = m.config;
  out.tok_emb = cast<U>(m.tok_emb);
  out.pos_emb = cast<U>(m.pos_emb);
  out.final_norm = cast<U>(m.final_norm);
  for (const auto& l : m.layers)
    out.layers.push_back({cast<U>(l.attn_norm), cast<U>(l.wq), cast<U>(l.wk), cast<U>(l.wv), cast<U>(l.wo),
                          cast<U>(l.mlp_norm), cast<U>(l.w_gate), cast<U>(l.w_up), cast<U>(l.w_down)});
  return out;
}

template <typename T>
DenseModel<T> clone_model(const DenseModel<T>& m) {
  return cast_model<T>(m);
}

template <typename T>
void set_requires_grad(DenseModel<T>& m, bool on) {
  for (auto& [name, t] : m.named_parameters()) t.set_requires_grad(on);
}

uint64_t hash_model(const DenseModel<float>& m);
void save_model(Checkpoint& ck, const DenseModel<float>& m, const std::string& prefix = "model/");
DenseModel<float> load_model(const Checkpoint& ck, const std::string& prefix = "model/");

// batch x seq token ids, row-major.
struct TokenBatch {
  int batch = 0;
  int seq = 0;
  std::vector<int32_t> ids;

  std::span<const int32_t> row(int b) const { return {ids.data() + static_cast<size_t>(b) * seq, static_cast<size_t>(seq)}; }
  static TokenBatch single(std::span<const int32_t> tokens);
};

template <typename T>
struct MemoryModule;

template <typename T>
using GateValues = std::map<SiteId, Tensor<T>>;

// What a student adds on top of the frozen weights. Null members mean
// "absent": no gates is the all-one mask, no module is no LoRA and no memory.
template <typename T>
struct Attachment {
  const GateValues<T>* gates = nullptr;
  const MemoryModule<T>* module = nullptr;
  bool mask_memory = true;
};

// Optional activations recorded during a forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> gate_act;  // per layer: silu(gate branch), [B*T, d_inter]
};

// Final normalized hidden states, [batch*seq, d_model].
template <typename T>
Tensor<T> forward_hidden(const DenseModel<T>& m, const TokenBatch& batch, const Attachment<T>& att = {},
                         ForwardTrace<T>* trace = nullptr);

template <typename T>
Tensor<T> lm_head(const DenseModel<T>& m, const Tensor<T>& hidden);

template <typename T>
Tensor<T> forward(const DenseModel<T>& m, const TokenBatch& batch, const Attachment<T>& att = {});

template <typename T>
Tensor<T> forward_dense(const DenseModel<T>& m, const TokenBatch& batch) {
  return forward<T>(m, batch, {});
}

template <typename T>
Tensor<T> forward_offloaded(const DenseModel<T>& m, const GateValues<T>& gates, const MemoryModule<T>& module,
                            const TokenBatch& batch, bool mask_memory = true) {
  return forward<T>(m, batch, {&gates, &module, mask_memory});
}

}  // namespace koff
