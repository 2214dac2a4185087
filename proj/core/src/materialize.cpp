#include "koff/materialize.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "koff/checkpoint.hpp"
#include "koff/errors.hpp"
#include "koff/ops.hpp"

namespace koff {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const Mat>;

ConstMap view(const Tensor<float>& t) { return ConstMap(t.values().data(), t.dim(0), t.dim(1)); }

std::vector<int32_t> kept(const std::vector<uint8_t>& keep) {
  std::vector<int32_t> out;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(static_cast<int32_t>(i));
  return out;
}

// Rows of w at idx, each multiplied by its gate value (when given).
Tensor<float> gather_rows(const Tensor<float>& w, const std::vector<int32_t>& idx, const Tensor<float>* z) {
  const int64_t c = w.dim(1);
  std::vector<float> out(idx.size() * static_cast<size_t>(c));
  for (size_t r = 0; r < idx.size(); ++r) {
    const float s = z ? z->at(idx[r]) : 1.0f;
    for (int64_t j = 0; j < c; ++j) out[r * c + j] = w.at(idx[r] * c + j) * s;
  }
  return Tensor<float>::from({static_cast<int64_t>(idx.size()), c}, std::move(out));
}

Tensor<float> gather_cols(const Tensor<float>& w, const std::vector<int32_t>& idx) {
  const int64_t rows = w.dim(0), c = w.dim(1);
  std::vector<float> out(static_cast<size_t>(rows) * idx.size());
  for (int64_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < idx.size(); ++j) out[r * idx.size() + j] = w.at(r * c + idx[j]);
  return Tensor<float>::from({rows, static_cast<int64_t>(idx.size())}, std::move(out));
}

std::vector<int32_t> head_offsets(const std::vector<int32_t>& keep, int heads, int dh) {
  std::vector<int32_t> off(static_cast<size_t>(heads) + 1, 0);
  for (int32_t c : keep) ++off[c / dh + 1];
  for (int h = 0; h < heads; ++h) off[h + 1] += off[h];
  return off;
}

std::vector<int32_t> intersect_mlp(const std::vector<uint8_t>& gate, const std::vector<uint8_t>& up) {
  std::vector<int32_t> out;
  for (size_t i = 0; i < gate.size(); ++i)
    if (gate[i] && up[i]) out.push_back(static_cast<int32_t>(i));
  return out;
}

const std::vector<uint8_t>& keep_at(const KeepMask& keep, SiteId s, const ModelConfig& cfg) {
  auto it = keep.find(s);
  if (it == keep.end()) throw ContractError("keep mask lacks site " + s.str());
  const size_t expect = (s.proj == Proj::kGate || s.proj == Proj::kUp) ? cfg.d_inter : cfg.d_model;
  if (it->second.size() != expect) throw DimensionError("keep mask for " + s.str() + " has the wrong length");
  return it->second;
}

int64_t count_kept(const std::vector<uint8_t>& v) { return std::count(v.begin(), v.end(), uint8_t(1)); }

}  // namespace

KeepMask keep_mask(const GateValues<float>& zhat) {
  KeepMask out;
  for (const auto& [s, z] : zhat) {
    std::vector<uint8_t> k(static_cast<size_t>(z.numel()));
    for (int64_t i = 0; i < z.numel(); ++i) k[i] = z.at(i) > 0.0f ? 1 : 0;
    out[s] = std::move(k);
  }
  return out;
}

SparsityReport count_sparsity(const ModelConfig& cfg, const KeepMask& keep) {
  const int64_t d = cfg.d_model, f = cfg.d_inter;
  SparsityReport r;
  r.dense_params = cfg.n_layers * (2 * d + 4 * d * d + 3 * f * d) + d;
  int64_t compact = d;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& k = keep_at(keep, {l, Proj::kK}, cfg);
    const auto& v = keep_at(keep, {l, Proj::kV}, cfg);
    const auto& g = keep_at(keep, {l, Proj::kGate}, cfg);
    const auto& u = keep_at(keep, {l, Proj::kUp}, cfg);
    const auto& dn = keep_at(keep, {l, Proj::kDown}, cfg);
    const int64_t nk = count_kept(k), nv = count_kept(v), nd = count_kept(dn);
    const int64_t ni = static_cast<int64_t>(intersect_mlp(g, u).size());
    compact += 2 * d + 2 * nk * d + nv * d + d * nv + 2 * ni * d + nd * ni;
    for (auto p : kGatedProjs) {
      SiteId s{l, p};
      const auto& kv = keep_at(keep, s, cfg);
      const int64_t pruned = static_cast<int64_t>(kv.size()) - count_kept(kv);
      const int64_t row_len = p == Proj::kDown ? f : d;
      r.pruned_channels[s] = pruned;
      r.local[s] = static_cast<double>(pruned) / kv.size();
      r.gated_row_removed += pruned * row_len;
    }
  }
  r.removed_params = r.dense_params - compact;
  return r;
}

SparsityReport sparsity_report(const DenseModel<float>& model, const GateSet<float>& gates,
                               const HardConcreteConfig& hc) {
  return count_sparsity(model.config, keep_mask(deterministic_gates(gates, hc)));
}

int64_t CompactBackbone::non_embedding_params() const {
  int64_t n = final_norm.numel();
  for (const auto& l : layers)
    n += l.attn_norm.numel() + l.mlp_norm.numel() + l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel() +
         l.w_gate.numel() + l.w_up.numel() + l.w_down.numel();
  return n;
}

SparsityReport sparsity_report(const CompactBackbone& b) { return count_sparsity(b.config, keep_mask(b.zhat)); }

CompactBackbone materialize(const DenseModel<float>& model, const GateSet<float>& gates, const HardConcreteConfig& hc) {
  const auto& cfg = model.config;
  for (auto s : model.sites()) {
    auto it = gates.log_alpha.find(s);
    if (it == gates.log_alpha.end()) throw ContractError("gate set lacks site " + s.str());
    if (it->second.numel() != model.site_out(s)) throw DimensionError("gate length mismatch at site " + s.str());
  }
  CompactBackbone b;
  b.config = cfg;
  b.tok_emb = model.tok_emb.clone();
  b.pos_emb = model.pos_emb.clone();
  b.final_norm = model.final_norm.clone();
  b.zhat = deterministic_gates(gates, hc);
  auto keep = keep_mask(b.zhat);
  for (const auto& [s, k] : keep)
    if (count_kept(k) == 0)
      throw MaterializationError("site " + s.str() + " is fully pruned (no retained channels)");

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = model.layers[l];
    auto z = [&](Proj p) { return &b.zhat.at({l, p}); };
    CompactLayer c;
    c.k_keep = kept(keep.at({l, Proj::kK}));
    c.v_keep = kept(keep.at({l, Proj::kV}));
    c.inter_keep = intersect_mlp(keep.at({l, Proj::kGate}), keep.at({l, Proj::kUp}));
    c.down_keep = kept(keep.at({l, Proj::kDown}));
    if (c.inter_keep.empty())
      throw MaterializationError("site " + std::to_string(l) + "/gate+up is fully pruned (no intermediate channel "
                                 "retained in both gate and up)");
    c.k_head_offsets = head_offsets(c.k_keep, cfg.n_heads, cfg.d_head());
    c.v_head_offsets = head_offsets(c.v_keep, cfg.n_heads, cfg.d_head());
    c.attn_norm = lw.attn_norm.clone();
    c.mlp_norm = lw.mlp_norm.clone();
    c.wq = gather_rows(lw.wq, c.k_keep, nullptr);
    c.wk = gather_rows(lw.wk, c.k_keep, z(Proj::kK));
    c.wv = gather_rows(lw.wv, c.v_keep, z(Proj::kV));
    c.wo = gather_cols(lw.wo, c.v_keep);
    c.w_gate = gather_rows(lw.w_gate, c.inter_keep, z(Proj::kGate));
    c.w_up = gather_rows(lw.w_up, c.inter_keep, z(Proj::kUp));
    c.w_down = gather_cols(gather_rows(lw.w_down, c.down_keep, z(Proj::kDown)), c.inter_keep);
    b.layers.push_back(std::move(c));
  }
  return b;
}

MemoryModule<float> compact_module(const MemoryModule<float>& module, const CompactBackbone& b) {
  NoGradGuard no_grad;
  const auto& cfg = b.config;
  MemoryModule<float> out;
  out.domain = module.domain;
  out.first_layer = module.first_layer;
  out.n_kv = module.n_kv;
  for (const auto& [s, p] : module.lora) {
    if (s.layer < 0 || s.layer >= cfg.n_layers) throw ConfigError("LoRA site " + s.str() + " outside the model");
    const auto& c = b.layers[s.layer];
    const int64_t d_out = (s.proj == Proj::kGate || s.proj == Proj::kUp) ? cfg.d_inter : cfg.d_model;
    const int64_t d_in = s.proj == Proj::kDown ? cfg.d_inter : cfg.d_model;
    if (p.b.dim(0) != d_out || p.a.dim(1) != d_in || p.a.dim(0) != p.b.dim(1))
      throw ConfigError("LoRA pair at " + s.str() + " does not match the dense geometry");
    const Tensor<float>* z = &b.zhat.at(s);
    LoraPair<float> q;
    q.scale = p.scale;
    switch (s.proj) {
      case Proj::kK: q.b = gather_rows(p.b, c.k_keep, z); q.a = p.a.clone(); break;
      case Proj::kV: q.b = gather_rows(p.b, c.v_keep, z); q.a = p.a.clone(); break;
      case Proj::kGate:
      case Proj::kUp: q.b = gather_rows(p.b, c.inter_keep, z); q.a = p.a.clone(); break;
      case Proj::kDown: q.b = gather_rows(p.b, c.down_keep, z); q.a = gather_cols(p.a, c.inter_keep); break;
    }
    out.lora[s] = std::move(q);
  }
  for (const auto& [l, k] : module.mem_k) {
    if (k.dim(1) != cfg.d_model) throw ConfigError("memory keys do not match the dense geometry");
    const auto& c = b.layers.at(l);
    out.mem_k[l] = gather_cols(mul_row(k, b.zhat.at({l, Proj::kK})), c.k_keep);
    out.mem_v[l] = gather_cols(mul_row(module.mem_v.at(l), b.zhat.at({l, Proj::kV})), c.v_keep);
  }
  return out;
}

namespace {

Mat rmsnorm_rows(const Mat& x, const Tensor<float>& w) {
  Mat out(x.rows(), x.cols());
  const float* wv = w.values().data();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    float ss = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) ss += x(r, j) * x(r, j);
    const float s = 1.0f / std::sqrt(ss / static_cast<float>(x.cols()) + 1e-5f);
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(r, j) = x(r, j) * s * wv[j];
  }
  return out;
}

Mat project(const Mat& x, const Tensor<float>& w, const LoraPair<float>* lora) {
  Mat y = x * view(w).transpose();
  if (lora) y += lora->scale * ((x * view(lora->a).transpose()) * view(lora->b).transpose());
  return y;
}

// Per-head attention over variable retained widths; the score scale keeps
// the dense head width.
Mat compact_attention(const Mat& q, const Mat& k, const Mat& v, const Mat* mk, const Mat* mv, const CompactLayer& c,
                      int batch, int seq, int heads, int dh) {
  const int n_kv = mk ? static_cast<int>(mk->rows()) : 0;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  Mat out = Mat::Zero(q.rows(), v.cols());
  std::vector<float> p(static_cast<size_t>(n_kv + seq));
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h) {
      const int k0 = c.k_head_offsets[h], kn = c.k_head_offsets[h + 1] - k0;
      const int v0 = c.v_head_offsets[h], vn = c.v_head_offsets[h + 1] - v0;
      for (int t = 0; t < seq; ++t) {
        const int row = b * seq + t;
        const int visible = n_kv + t + 1;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < visible; ++j) {
          float s = 0;
          for (int e = 0; e < kn; ++e) {
            const float kj = j < n_kv ? (*mk)(j, k0 + e) : k(b * seq + j - n_kv, k0 + e);
            s += q(row, k0 + e) * kj;
          }
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        float z = 0;
        for (int j = 0; j < visible; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (int j = 0; j < visible; ++j) {
          const float w = p[j] / z;
          for (int e = 0; e < vn; ++e) {
            const float vj = j < n_kv ? (*mv)(j, v0 + e) : v(b * seq + j - n_kv, v0 + e);
            out(row, v0 + e) += w * vj;
          }
        }
      }
    }
  return out;
}

Mat silu(const Mat& x) { return x.unaryExpr([](float a) { return a / (1.0f + std::exp(-a)); }); }

}  // namespace

std::vector<float> compact_hidden(const CompactBackbone& b, const MemoryModule<float>* module,
                                  const TokenBatch& batch) {
  const auto& cfg = b.config;
  if (batch.batch < 1 || batch.seq < 1) throw InputError("empty token batch");
  if (batch.seq > cfg.max_seq_len)
    throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  const int64_t rows = static_cast<int64_t>(batch.batch) * batch.seq;
  const int d = cfg.d_model;
  Mat x(rows, d);
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t id = batch.ids[r];
    if (id < 0 || id >= cfg.vocab_size) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    const int pos = static_cast<int>(r % batch.seq);
    for (int j = 0; j < d; ++j) x(r, j) = b.tok_emb.at(int64_t(id) * d + j) + b.pos_emb.at(int64_t(pos) * d + j);
  }
  auto lora = [&](int l, Proj p) { return module ? module->lora_at({l, p}) : nullptr; };

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& c = b.layers[l];
    Mat h = rmsnorm_rows(x, c.attn_norm);
    Mat q = h * view(c.wq).transpose();
    Mat k = project(h, c.wk, lora(l, Proj::kK));
    Mat v = project(h, c.wv, lora(l, Proj::kV));
    Mat mk, mv;
    const bool mem = module && module->active(l) && module->mem_k.count(l) && module->n_kv > 0;
    if (mem) {
      mk = view(module->mem_k.at(l));
      mv = view(module->mem_v.at(l));
      if (mk.cols() != static_cast<Eigen::Index>(c.k_keep.size()) ||
          mv.cols() != static_cast<Eigen::Index>(c.v_keep.size()))
        throw ConfigError("memory module is not compacted for this backbone (use compact_module)");
    }
    Mat a = compact_attention(q, k, v, mem ? &mk : nullptr, mem ? &mv : nullptr, c, batch.batch, batch.seq,
                              cfg.n_heads, cfg.d_head());
    x += a * view(c.wo).transpose();

    Mat h2 = rmsnorm_rows(x, c.mlp_norm);
    Mat g = silu(project(h2, c.w_gate, lora(l, Proj::kGate)));
    Mat u = project(h2, c.w_up, lora(l, Proj::kUp));
    Mat dn = project(g.cwiseProduct(u), c.w_down, lora(l, Proj::kDown));
    for (size_t j = 0; j < c.down_keep.size(); ++j) x.col(c.down_keep[j]) += dn.col(static_cast<Eigen::Index>(j));
  }
  Mat out = rmsnorm_rows(x, b.final_norm);
  return std::vector<float>(out.data(), out.data() + out.size());
}

std::vector<float> compact_logits(const CompactBackbone& b, const MemoryModule<float>* module,
                                  const TokenBatch& batch) {
  auto hidden = compact_hidden(b, module, batch);
  ConstMap h(hidden.data(), static_cast<Eigen::Index>(hidden.size() / b.config.d_model), b.config.d_model);
  Mat logits = h * view(b.tok_emb).transpose();
  return std::vector<float>(logits.data(), logits.data() + logits.size());
}

uint64_t hash_backbone(const CompactBackbone& b) {
  uint64_t h = hash_tensor(b.tok_emb);
  h = hash_tensor(b.pos_emb, h);
  h = hash_tensor(b.final_norm, h);
  for (const auto& l : b.layers) {
    for (const auto* idx : {&l.k_keep, &l.v_keep, &l.inter_keep, &l.down_keep})
      h = fnv1a(idx->data(), idx->size() * sizeof(int32_t), h);
    for (const auto* t : {&l.attn_norm, &l.mlp_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down})
      h = hash_tensor(*t, h);
  }
  return h;
}

void save_backbone(Checkpoint& ck, const CompactBackbone& b) {
  b.config.write_meta(ck.meta());
  ck.put("compact/tok_emb", b.tok_emb);
  ck.put("compact/pos_emb", b.pos_emb);
  ck.put("compact/final_norm", b.final_norm);
  for (const auto& [s, z] : b.zhat) ck.put("compact/" + s.str() + "/zhat", z);
  for (int l = 0; l < static_cast<int>(b.layers.size()); ++l) {
    const auto& c = b.layers[l];
    const std::string p = "compact/" + std::to_string(l) + "/";
    auto idx = [&](const std::string& proj, const std::vector<int32_t>& v) {
      ck.put_i32(p + proj + "/retained", {static_cast<int64_t>(v.size())}, v);
    };
    idx("k", c.k_keep);
    idx("v", c.v_keep);
    idx("gate", c.inter_keep);
    idx("up", c.inter_keep);
    idx("down", c.down_keep);
    ck.put(p + "attn_norm", c.attn_norm);
    ck.put(p + "mlp_norm", c.mlp_norm);
    ck.put(p + "wq", c.wq);
    ck.put(p + "wk", c.wk);
    ck.put(p + "wv", c.wv);
    ck.put(p + "wo", c.wo);
    ck.put(p + "w_gate", c.w_gate);
    ck.put(p + "w_up", c.w_up);
    ck.put(p + "w_down", c.w_down);
  }
}

CompactBackbone load_backbone(const Checkpoint& ck) {
  CompactBackbone b;
  b.config = ModelConfig::from_meta(ck.meta());
  if (!ck.contains("compact/tok_emb")) throw MissingDependency("compact backbone", "materialize");
  b.tok_emb = ck.get("compact/tok_emb");
  b.pos_emb = ck.get("compact/pos_emb");
  b.final_norm = ck.get("compact/final_norm");
  for (int l = 0; l < b.config.n_layers; ++l) {
    const std::string p = "compact/" + std::to_string(l) + "/";
    for (auto proj : kGatedProjs) b.zhat[{l, proj}] = ck.get("compact/" + SiteId{l, proj}.str() + "/zhat");
    CompactLayer c;
    c.k_keep = ck.get_i32(p + "k/retained");
    c.v_keep = ck.get_i32(p + "v/retained");
    c.inter_keep = ck.get_i32(p + "gate/retained");
    c.down_keep = ck.get_i32(p + "down/retained");
    c.k_head_offsets = head_offsets(c.k_keep, b.config.n_heads, b.config.d_head());
    c.v_head_offsets = head_offsets(c.v_keep, b.config.n_heads, b.config.d_head());
    c.attn_norm = ck.get(p + "attn_norm");
    c.mlp_norm = ck.get(p + "mlp_norm");
    c.wq = ck.get(p + "wq");
    c.wk = ck.get(p + "wk");
    c.wv = ck.get(p + "wv");
    c.wo = ck.get(p + "wo");
    c.w_gate = ck.get(p + "w_gate");
    c.w_up = ck.get(p + "w_up");
    c.w_down = ck.get(p + "w_down");
    b.layers.push_back(std::move(c));
  }
  return b;
}

LogitFn dense_logits_fn(const DenseModel<float>& model) {
  return [&model](const TokenBatch& batch) {
    NoGradGuard no_grad;
    return forward_dense(model, batch).values();
  };
}

LogitFn masked_logits_fn(const DenseModel<float>& model, const GateValues<float>* gates,
                         const MemoryModule<float>* module, bool mask_memory) {
  return [&model, gates, module, mask_memory](const TokenBatch& batch) {
    NoGradGuard no_grad;
    return forward(model, batch, Attachment<float>{gates, module, mask_memory}).values();
  };
}

LogitFn compact_logits_fn(const CompactBackbone& b, const MemoryModule<float>* module) {
  return [&b, module](const TokenBatch& batch) { return compact_logits(b, module, batch); };
}

std::vector<int32_t> generate(const LogitFn& logits, std::span<const int32_t> prompt, int n_tokens, int vocab,
                              int max_len) {
  if (prompt.empty()) throw InputError("generation needs a non-empty prompt");
  if (n_tokens < 0) throw InputError("n_tokens must be >= 0");
  if (static_cast<int64_t>(prompt.size()) + n_tokens > max_len)
    throw InputError("prompt of " + std::to_string(prompt.size()) + " tokens plus " + std::to_string(n_tokens) +
                     " new tokens overflows the context of " + std::to_string(max_len));
  std::vector<int32_t> seq(prompt.begin(), prompt.end());
  for (int i = 0; i < n_tokens; ++i) {
    auto out = logits(TokenBatch::single(seq));
    const float* last = out.data() + (seq.size() - 1) * static_cast<size_t>(vocab);
    seq.push_back(static_cast<int32_t>(std::max_element(last, last + vocab) - last));
  }
  return seq;
}

std::vector<int32_t> generate(const CompactBackbone& b, const MemoryModule<float>* module,
                              std::span<const int32_t> prompt, int n_tokens) {
  return generate(compact_logits_fn(b, module), prompt, n_tokens, b.config.vocab_size, b.config.max_seq_len);
}

}  // namespace koff
