#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "koff/gates.hpp"
#include "koff/memory.hpp"
#include "koff/model.hpp"

namespace koff {

// Per-site keep flags, one per output channel (1 = retained).
using KeepMask = std::map<SiteId, std::vector<uint8_t>>;

KeepMask keep_mask(const GateValues<float>& zhat);

struct SparsityReport {
  int64_t dense_params = 0;    // non-embedding parameters of the dense model
  int64_t removed_params = 0;  // physically removed under the compaction rules
  // Weights in the rows of pruned gated channels only, ignoring consumer
  // columns and paired rows.
  int64_t gated_row_removed = 0;
  std::map<SiteId, int64_t> pruned_channels;
  std::map<SiteId, double> local;  // pruned fraction per site

  double global_sparsity() const { return dense_params ? double(removed_params) / dense_params : 0.0; }
  double gated_row_sparsity() const { return dense_params ? double(gated_row_removed) / dense_params : 0.0; }
};

SparsityReport count_sparsity(const ModelConfig& cfg, const KeepMask& keep);
SparsityReport sparsity_report(const DenseModel<float>& model, const GateSet<float>& gates,
                               const HardConcreteConfig& hc);

struct CompactLayer {
  std::vector<int32_t> k_keep;      // retained K channels (also the Q rows kept)
  std::vector<int32_t> v_keep;      // retained V channels (W_O columns kept)
  std::vector<int32_t> inter_keep;  // retained MLP intermediate channels
  std::vector<int32_t> down_keep;   // residual rows written by W_down
  std::vector<int32_t> k_head_offsets;  // n_heads+1 prefix offsets into k_keep
  std::vector<int32_t> v_head_offsets;
  Tensor<float> attn_norm, mlp_norm;
  Tensor<float> wq, wk, wv;  // [n_keep, d_model]; wk, wv rows scaled by z
  Tensor<float> wo;          // [d_model, v_keep]
  Tensor<float> w_gate, w_up;  // [inter_keep, d_model], scaled by z
  Tensor<float> w_down;        // [down_keep, inter_keep], scaled by z
};

struct CompactBackbone {
  ModelConfig config;  // the dense geometry it was cut from
  Tensor<float> tok_emb, pos_emb, final_norm;
  std::vector<CompactLayer> layers;
  // Deterministic gates of every site, kept for module compaction.
  GateValues<float> zhat;

  int64_t non_embedding_params() const;
};

// Folds deterministic gates into the weights and drops zero channels.
// Throws MaterializationError naming any site left with no channels.
CompactBackbone materialize(const DenseModel<float>& model, const GateSet<float>& gates, const HardConcreteConfig& hc);

// Gathers LoRA B rows (and W_down LoRA A columns) and KV channels at the
// retained indices, scaling by the folded gate values. The result reuses
// the MemoryModule record with compacted shapes.
MemoryModule<float> compact_module(const MemoryModule<float>& module, const CompactBackbone& backbone);

SparsityReport sparsity_report(const CompactBackbone& b);

// Logits [batch*seq, vocab] row-major.
std::vector<float> compact_logits(const CompactBackbone& b, const MemoryModule<float>* module,
                                  const TokenBatch& batch);
// Final normalized hidden states [batch*seq, d_model].
std::vector<float> compact_hidden(const CompactBackbone& b, const MemoryModule<float>* module,
                                  const TokenBatch& batch);

uint64_t hash_backbone(const CompactBackbone& b);
void save_backbone(Checkpoint& ck, const CompactBackbone& b);
CompactBackbone load_backbone(const Checkpoint& ck);

// Any model variant viewed as a function from tokens to logits.
using LogitFn = std::function<std::vector<float>(const TokenBatch&)>;

LogitFn dense_logits_fn(const DenseModel<float>& model);
LogitFn masked_logits_fn(const DenseModel<float>& model, const GateValues<float>* gates,
                         const MemoryModule<float>* module, bool mask_memory = true);
LogitFn compact_logits_fn(const CompactBackbone& b, const MemoryModule<float>* module);

// Greedy continuation; lowest index wins ties. Input error if prompt plus
// continuation exceed max_len or the prompt is empty.
std::vector<int32_t> generate(const LogitFn& logits, std::span<const int32_t> prompt, int n_tokens, int vocab,
                              int max_len);
std::vector<int32_t> generate(const CompactBackbone& b, const MemoryModule<float>* module,
                              std::span<const int32_t> prompt, int n_tokens);

}  // namespace koff
