#include "koff/model.hpp"

#include <cmath>

#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/memory.hpp"
#include "koff/ops.hpp"
#include "koff/rng.hpp"

namespace koff {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_inter < 1 || max_seq_len < 1)
    throw ConfigError("model extents must all be >= 1");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
}

ModelConfig ModelConfig::from_config(const Config& c) {
  ModelConfig m;
  m.vocab_size = static_cast<int>(c.get_int("vocab_size", m.vocab_size));
  m.d_model = static_cast<int>(c.get_int("d_model", m.d_model));
  m.n_layers = static_cast<int>(c.get_int("n_layers", m.n_layers));
  m.n_heads = static_cast<int>(c.get_int("n_heads", m.n_heads));
  m.d_inter = static_cast<int>(c.get_int("d_inter", m.d_inter));
  m.max_seq_len = static_cast<int>(c.get_int("max_seq_len", m.max_seq_len));
  m.validate();
  return m;
}

void ModelConfig::write_meta(std::map<std::string, std::string>& meta) const {
  meta["model.vocab_size"] = std::to_string(vocab_size);
  meta["model.d_model"] = std::to_string(d_model);
  meta["model.n_layers"] = std::to_string(n_layers);
  meta["model.n_heads"] = std::to_string(n_heads);
  meta["model.d_inter"] = std::to_string(d_inter);
  meta["model.max_seq_len"] = std::to_string(max_seq_len);
}

ModelConfig ModelConfig::from_meta(const std::map<std::string, std::string>& meta) {
  auto get = [&](const char* k) {
    auto it = meta.find(k);
    if (it == meta.end()) throw InputError(std::string("checkpoint metadata lacks ") + k);
    return std::stoi(it->second);
  };
  ModelConfig m;
  m.vocab_size = get("model.vocab_size");
  m.d_model = get("model.d_model");
  m.n_layers = get("model.n_layers");
  m.n_heads = get("model.n_heads");
  m.d_inter = get("model.d_inter");
  m.max_seq_len = get("model.max_seq_len");
  m.validate();
  return m;
}

std::string_view proj_name(Proj p) {
  switch (p) {
    case Proj::kK: return "k";
    case Proj::kV: return "v";
    case Proj::kGate: return "gate";
    case Proj::kUp: return "up";
    case Proj::kDown: return "down";
  }
  return "?";
}

Proj parse_proj(std::string_view name) {
  for (auto p : kGatedProjs)
    if (proj_name(p) == name) return p;
  throw InputError("unknown projection '" + std::string(name) + "'");
}

std::string SiteId::str() const { return std::to_string(layer) + "/" + std::string(proj_name(proj)); }

TokenBatch TokenBatch::single(std::span<const int32_t> tokens) {
  return {1, static_cast<int>(tokens.size()), std::vector<int32_t>(tokens.begin(), tokens.end())};
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DenseModel<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers/" + std::to_string(i) + "/";
    out.insert(out.end(), {{p + "attn_norm", l.attn_norm},
                           {p + "wq", l.wq},
                           {p + "wk", l.wk},
                           {p + "wv", l.wv},
                           {p + "wo", l.wo},
                           {p + "mlp_norm", l.mlp_norm},
                           {p + "w_gate", l.w_gate},
                           {p + "w_up", l.w_up},
                           {p + "w_down", l.w_down}});
  }
  out.emplace_back("final_norm", final_norm);
  return out;
}

template <typename T>
const Tensor<T>& DenseModel<T>::site_weight(SiteId site) const {
  if (site.layer < 0 || site.layer >= static_cast<int>(layers.size()))
    throw ConfigError("site " + site.str() + " outside the layer stack");
  const auto& l = layers[site.layer];
  switch (site.proj) {
    case Proj::kK: return l.wk;
    case Proj::kV: return l.wv;
    case Proj::kGate: return l.w_gate;
    case Proj::kUp: return l.w_up;
    case Proj::kDown: return l.w_down;
  }
  throw ConfigError("bad projection");
}

template <typename T>
std::vector<SiteId> DenseModel<T>::sites() const {
  std::vector<SiteId> out;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l)
    for (auto p : kGatedProjs) out.push_back({l, p});
  return out;
}

template <typename T>
int64_t DenseModel<T>::non_embedding_params() const {
  int64_t n = final_norm.numel();
  for (const auto& l : layers)
    n += l.attn_norm.numel() + l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel() + l.mlp_norm.numel() +
         l.w_gate.numel() + l.w_up.numel() + l.w_down.numel();
  return n;
}

template <typename T>
DenseModel<T> init_dense(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed, Stream::kModelInit);
  auto normal = [&](Shape s, double std) {
    std::vector<T> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
    return Tensor<T>::from(std::move(s), std::move(v));
  };
  const int64_t d = cfg.d_model, f = cfg.d_inter;
  const double std = 0.02;
  const double resid_std = std / std::sqrt(2.0 * cfg.n_layers);
  DenseModel<T> m;
  m.config = cfg;
  m.tok_emb = normal({cfg.vocab_size, d}, std);
  m.pos_emb = normal({cfg.max_seq_len, d}, std);
  for (int i = 0; i < cfg.n_layers; ++i) {
    LayerWeights<T> l;
    l.attn_norm = Tensor<T>::full({d}, T(1));
    l.wq = normal({d, d}, std);
    l.wk = normal({d, d}, std);
    l.wv = normal({d, d}, std);
    l.wo = normal({d, d}, resid_std);
    l.mlp_norm = Tensor<T>::full({d}, T(1));
    l.w_gate = normal({f, d}, std);
    l.w_up = normal({f, d}, std);
    l.w_down = normal({d, f}, resid_std);
    m.layers.push_back(std::move(l));
  }
  m.final_norm = Tensor<T>::full({d}, T(1));
  return m;
}

uint64_t hash_model(const DenseModel<float>& m) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : m.named_parameters()) h = hash_tensor(t, h);
  return h;
}

void save_model(Checkpoint& ck, const DenseModel<float>& m, const std::string& prefix) {
  m.config.write_meta(ck.meta());
  for (const auto& [name, t] : m.named_parameters()) ck.put(prefix + name, t);
}

DenseModel<float> load_model(const Checkpoint& ck, const std::string& prefix) {
  auto cfg = ModelConfig::from_meta(ck.meta());
  auto m = init_dense<float>(cfg, 0);
  for (auto& [name, t] : m.named_parameters()) {
    auto loaded = ck.get(prefix + name);
    if (loaded.shape() != t.shape())
      throw InputError("checkpoint array " + prefix + name + " has shape " + shape_str(loaded.shape()) +
                       ", model expects " + shape_str(t.shape()));
    std::copy(loaded.values().begin(), loaded.values().end(), t.mutable_data().begin());
  }
  return m;
}

namespace {

template <typename T>
const Tensor<T>* gate_for(const Attachment<T>& att, SiteId site) {
  if (!att.gates) return nullptr;
  auto it = att.gates->find(site);
  return it == att.gates->end() ? nullptr : &it->second;
}

template <typename T>
Tensor<T> site_linear(const Attachment<T>& att, SiteId site, const Tensor<T>& x, const Tensor<T>& w) {
  const LoraPair<T>* lora = att.module ? att.module->lora_at(site) : nullptr;
  return masked_adapted_linear<T>(x, w, lora, gate_for(att, site));
}

}  // namespace

template <typename T>
Tensor<T> forward_hidden(const DenseModel<T>& m, const TokenBatch& batch, const Attachment<T>& att,
                         ForwardTrace<T>* trace) {
  const auto& cfg = m.config;
  if (batch.batch < 1 || batch.seq < 1) throw InputError("empty token batch");
  if (batch.seq > cfg.max_seq_len)
    throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  if (static_cast<int64_t>(batch.ids.size()) != int64_t(batch.batch) * batch.seq)
    throw DimensionError("token batch id count does not match batch*seq");
  if (att.module) {
    if (att.module->first_layer < 0 || att.module->first_layer > cfg.n_layers)
      throw ConfigError("memory module active layers outside [0, n_layers)");
    for (const auto& [l, t] : att.module->mem_k)
      if (l < 0 || l >= cfg.n_layers || t.dim(1) != cfg.d_model)
        throw ConfigError("memory module KV shape does not match the model");
    for (const auto& [s, p] : att.module->lora)
      if (s.layer >= cfg.n_layers || p.b.dim(0) != m.site_out(s) || p.a.dim(1) != m.site_weight(s).dim(1))
        throw ConfigError("LoRA pair at " + s.str() + " does not match the model");
  }

  std::vector<int32_t> pos(batch.ids.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int32_t>(i % batch.seq);
  Tensor<T> x = add(embedding(m.tok_emb, batch.ids), embedding(m.pos_emb, pos));
  const AttentionShape shape{batch.batch, batch.seq, cfg.n_heads};

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& lw = m.layers[li];
    Tensor<T> h = rmsnorm(x, lw.attn_norm);
    Tensor<T> q = linear(h, lw.wq);
    Tensor<T> k = site_linear(att, {li, Proj::kK}, h, lw.wk);
    Tensor<T> v = site_linear(att, {li, Proj::kV}, h, lw.wv);
    Tensor<T> mk, mv;
    if (att.module && att.module->active(li) && att.module->mem_k.count(li)) {
      std::tie(mk, mv) = inject_memory<T>(*att.module, li, gate_for(att, {li, Proj::kK}),
                                          gate_for(att, {li, Proj::kV}), att.mask_memory);
    }
    Tensor<T> a = attention(q, k, v, mk, mv, shape);
    x = add(x, linear(a, lw.wo));

    Tensor<T> h2 = rmsnorm(x, lw.mlp_norm);
    Tensor<T> g = silu(site_linear(att, {li, Proj::kGate}, h2, lw.w_gate));
    if (trace) trace->gate_act.push_back(g);
    Tensor<T> u = site_linear(att, {li, Proj::kUp}, h2, lw.w_up);
    x = add(x, site_linear(att, {li, Proj::kDown}, mul(g, u), lw.w_down));
  }
  return rmsnorm(x, m.final_norm);
}

template <typename T>
Tensor<T> lm_head(const DenseModel<T>& m, const Tensor<T>& hidden) {
  return linear(hidden, m.tok_emb);
}

template <typename T>
Tensor<T> forward(const DenseModel<T>& m, const TokenBatch& batch, const Attachment<T>& att) {
  return lm_head(m, forward_hidden(m, batch, att));
}

#define KOFF_INSTANTIATE_MODEL(T)                                                                       \
  template struct DenseModel<T>;                                                                        \
  template DenseModel<T> init_dense<T>(const ModelConfig&, uint64_t);                                  \
  template Tensor<T> forward_hidden<T>(const DenseModel<T>&, const TokenBatch&, const Attachment<T>&,   \
                                       ForwardTrace<T>*);                                               \
  template Tensor<T> lm_head<T>(const DenseModel<T>&, const Tensor<T>&);                                \
  template Tensor<T> forward<T>(const DenseModel<T>&, const TokenBatch&, const Attachment<T>&);

KOFF_INSTANTIATE_MODEL(float)
KOFF_INSTANTIATE_MODEL(double)

}  // namespace koff
