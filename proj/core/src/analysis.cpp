#include "koff/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "koff/errors.hpp"
#include "koff/ops.hpp"

namespace koff {

NllSum nll_sum(const LogitFn& logits, const TokenStream& slice, int vocab, const EvalOptions& opt) {
  if (slice.empty()) throw InputError("perplexity over an empty slice");
  if (opt.seq_len < 1 || opt.batch < 1) throw ConfigError("eval seq_len and batch must be >= 1");
  // (doc, offset, length) of every chunk, length counts the input tokens.
  struct Chunk {
    int doc, off, len;
  };
  std::vector<Chunk> chunks;
  for (int d = 0; d < slice.n_docs(); ++d)
    for (int off = 0; off + 1 < slice.doc_len; off += opt.seq_len)
      chunks.push_back({d, off, std::min(opt.seq_len, slice.doc_len - 1 - off)});
  if (opt.max_chunks > 0 && static_cast<int>(chunks.size()) > opt.max_chunks) chunks.resize(opt.max_chunks);

  NllSum total;
  size_t i = 0;
  while (i < chunks.size()) {
    // Batch consecutive chunks of equal length.
    size_t j = i;
    while (j < chunks.size() && j - i < static_cast<size_t>(opt.batch) && chunks[j].len == chunks[i].len) ++j;
    const int len = chunks[i].len;
    TokenBatch batch{static_cast<int>(j - i), len, {}};
    std::vector<int32_t> targets;
    for (size_t c = i; c < j; ++c) {
      auto doc = slice.doc(chunks[c].doc);
      batch.ids.insert(batch.ids.end(), doc.begin() + chunks[c].off, doc.begin() + chunks[c].off + len);
      targets.insert(targets.end(), doc.begin() + chunks[c].off + 1, doc.begin() + chunks[c].off + len + 1);
    }
    auto out = logits(batch);
    for (size_t r = 0; r < targets.size(); ++r) {
      const float* row = out.data() + r * static_cast<size_t>(vocab);
      double mx = *std::max_element(row, row + vocab), z = 0;
      for (int v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      total.nll += mx + std::log(z) - row[targets[r]];
    }
    total.count += static_cast<int64_t>(targets.size());
    i = j;
  }
  if (!std::isfinite(total.nll)) throw NumericError("non-finite evaluation loss");
  return total;
}

double perplexity(const LogitFn& logits, const TokenStream& slice, int vocab, const EvalOptions& opt) {
  auto s = nll_sum(logits, slice, vocab, opt);
  if (s.count == 0) throw InputError("perplexity slice has no predicted positions");
  return std::exp(s.nll / static_cast<double>(s.count));
}

OffloadEval evaluate_offload(const DenseModel<float>& teacher, const OffloadState& state, const TrainPlan& plan,
                             const CorpusSet& corpora, const EvalOptions& opt) {
  OffloadEval ev;
  ev.backbone = plan.prune ? materialize(teacher, state.gates, plan.gates)
                           : materialize(teacher, init_gates(teacher, 30.0), plan.gates);
  ev.sparsity = sparsity_report(ev.backbone);
  for (const auto& m : state.modules) ev.modules.push_back(compact_module(m, ev.backbone));
  for (const auto& d : corpora.domains) {
    const auto* module = d.domain < static_cast<int>(ev.modules.size()) ? &ev.modules[d.domain] : nullptr;
    ev.ppl.push_back(perplexity(compact_logits_fn(ev.backbone, module), d.eval, teacher.config.vocab_size, opt));
  }
  ev.mean_ppl = std::accumulate(ev.ppl.begin(), ev.ppl.end(), 0.0) / std::max<size_t>(1, ev.ppl.size());
  return ev;
}

SwapMatrix swap_matrix(const CompactBackbone& backbone, const std::vector<MemoryModule<float>>& compact_modules,
                       const CorpusSet& corpora, const EvalOptions& opt) {
  if (compact_modules.size() != corpora.domains.size())
    throw ConfigError("swap matrix needs one module per domain");
  SwapMatrix m(corpora.domains.size(), std::vector<double>(compact_modules.size()));
  for (size_t r = 0; r < corpora.domains.size(); ++r)
    for (size_t c = 0; c < compact_modules.size(); ++c)
      m[r][c] = perplexity(compact_logits_fn(backbone, &compact_modules[c]), corpora.domains[r].eval,
                           backbone.config.vocab_size, opt);
  return m;
}

std::vector<ProfileRow> layer_sparsity_profile(const GateSet<float>& gates, const HardConcreteConfig& hc) {
  std::vector<ProfileRow> out;
  for (const auto& [s, la] : gates.log_alpha) {
    ProfileRow r;
    r.site = s;
    r.channels = la.numel();
    for (float v : la.values()) r.pruned += deterministic_gate_value(v, hc) == 0.0;
    r.sparsity = r.channels ? static_cast<double>(r.pruned) / r.channels : 0.0;
    out.push_back(r);
  }
  return out;
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD centered(const Embeddings& e) {
  MatD m = Eigen::Map<const MatD>(e.data.data(), e.n, e.d);
  m.rowwise() -= m.colwise().mean();
  return m;
}

std::vector<std::vector<int>> cosine_neighbors(const Embeddings& e, int k) {
  MatD m = Eigen::Map<const MatD>(e.data.data(), e.n, e.d);
  for (int i = 0; i < e.n; ++i) {
    double nrm = m.row(i).norm();
    if (nrm > 0) m.row(i) /= nrm;
  }
  MatD sim = m * m.transpose();
  std::vector<std::vector<int>> out(static_cast<size_t>(e.n));
  std::vector<int> order(static_cast<size_t>(e.n));
  for (int i = 0; i < e.n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    order.erase(order.begin() + i);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) { return sim(i, a) > sim(i, b) || (sim(i, a) == sim(i, b) && a < b); });
    out[i].assign(order.begin(), order.begin() + k);
    std::sort(out[i].begin(), out[i].end());
    order.resize(static_cast<size_t>(e.n));
  }
  return out;
}

}  // namespace

double linear_cka(const Embeddings& x, const Embeddings& y) {
  if (x.n != y.n) throw DimensionError("CKA needs the same number of rows in both sets");
  if (x.n < 2) throw InputError("CKA needs at least two samples");
  MatD a = centered(x), b = centered(y);
  const double xy = (a.transpose() * b).squaredNorm();
  const double xx = (a.transpose() * a).norm();
  const double yy = (b.transpose() * b).norm();
  if (xx == 0 || yy == 0) throw NumericError("CKA of a constant representation is undefined");
  return xy / (xx * yy);
}

double knn_overlap(const Embeddings& x, const Embeddings& y, int k) {
  if (x.n != y.n) throw DimensionError("kNN overlap needs the same number of rows in both sets");
  if (k < 1 || x.n < k + 1)
    throw InputError("kNN overlap with k=" + std::to_string(k) + " needs at least " + std::to_string(k + 1) +
                     " texts, got " + std::to_string(x.n));
  auto nx = cosine_neighbors(x, k), ny = cosine_neighbors(y, k);
  double acc = 0;
  for (int i = 0; i < x.n; ++i) {
    std::vector<int> both;
    std::set_intersection(nx[i].begin(), nx[i].end(), ny[i].begin(), ny[i].end(), std::back_inserter(both));
    const double inter = static_cast<double>(both.size());
    acc += inter / (2.0 * k - inter);
  }
  return acc / x.n;
}

double centroid_cosine(const Embeddings& x, const Embeddings& y, const std::vector<int>& labels) {
  if (x.n != y.n || x.d != y.d || static_cast<int>(labels.size()) != x.n)
    throw DimensionError("centroid cosine needs matching shapes and one label per row");
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> cent;
  for (int i = 0; i < x.n; ++i) {
    auto& [cx, cy] = cent[labels[i]];
    cx.resize(static_cast<size_t>(x.d), 0.0);
    cy.resize(static_cast<size_t>(x.d), 0.0);
    for (int j = 0; j < x.d; ++j) {
      cx[j] += x.row(i)[j];
      cy[j] += y.row(i)[j];
    }
  }
  double acc = 0;
  for (const auto& [label, c] : cent) {
    double dot = 0, na = 0, nb = 0;
    for (int j = 0; j < x.d; ++j) {
      dot += c.first[j] * c.second[j];
      na += c.first[j] * c.first[j];
      nb += c.second[j] * c.second[j];
    }
    acc += dot / std::sqrt(na * nb);
  }
  return acc / static_cast<double>(cent.size());
}

namespace {

Embeddings pool(const std::vector<LabelledText>& texts, int d,
                const std::function<std::vector<float>(const TokenBatch&)>& hidden) {
  Embeddings e;
  e.n = static_cast<int>(texts.size());
  e.d = d;
  e.data.assign(static_cast<size_t>(e.n) * d, 0.0);
  for (int i = 0; i < e.n; ++i) {
    const auto& t = texts[i].tokens;
    if (t.empty()) throw InputError("cannot embed an empty text");
    auto h = hidden(TokenBatch::single(t));
    double* out = e.data.data() + static_cast<size_t>(i) * d;
    for (size_t p = 0; p < t.size(); ++p)
      for (int j = 0; j < d; ++j) out[j] += h[p * d + j];
    for (int j = 0; j < d; ++j) out[j] /= static_cast<double>(t.size());
  }
  return e;
}

}  // namespace

Embeddings embed_dense(const DenseModel<float>& model, const std::vector<LabelledText>& texts) {
  return pool(texts, model.config.d_model, [&](const TokenBatch& b) {
    NoGradGuard no_grad;
    return forward_hidden(model, b).values();
  });
}

Embeddings embed_compact(const CompactBackbone& b, const std::vector<LabelledText>& texts) {
  return pool(texts, b.config.d_model, [&](const TokenBatch& batch) { return compact_hidden(b, nullptr, batch); });
}

ProbeResult backbone_probes(const DenseModel<float>& dense, const CompactBackbone& backbone,
                            const std::vector<LabelledText>& texts, int k) {
  if (static_cast<int>(texts.size()) < k + 1)
    throw InputError("probes with k=" + std::to_string(k) + " need at least " + std::to_string(k + 1) + " texts");
  std::vector<int> labels;
  for (const auto& t : texts) labels.push_back(t.domain);
  auto x = embed_dense(dense, texts);
  auto y = embed_compact(backbone, texts);
  return {linear_cka(x, y), knn_overlap(x, y, k), centroid_cosine(x, y, labels)};
}

LapeProfile lape_profile(const DenseModel<float>& teacher, const CorpusSet& corpora, const LapeOptions& opt) {
  if (corpora.n_domains() < 2) throw InputError("LAPE needs at least two domains");
  const auto& cfg = teacher.config;
  LapeProfile p;
  p.n_layers = cfg.n_layers;
  p.d_inter = cfg.d_inter;
  p.n_domains = corpora.n_domains();
  const size_t n_neurons = static_cast<size_t>(cfg.n_layers) * cfg.d_inter;
  p.prob.assign(n_neurons * p.n_domains, 0.0);
  NoGradGuard no_grad;
  for (int d = 0; d < p.n_domains; ++d) {
    Rng rng = Rng(opt.seed, Stream::kEval).fork(static_cast<uint64_t>(d) + 1);
    std::vector<int64_t> fired(n_neurons, 0);
    int64_t tokens = 0;
    for (int w = 0; w < opt.windows_per_domain; ++w) {
      auto batch = sample_batch(corpora.domains[d].train, 1, opt.seq_len, rng);
      ForwardTrace<float> trace;
      forward_hidden(teacher, batch.input, {}, &trace);
      for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& g = trace.gate_act[l].values();
        for (int t = 0; t < batch.input.seq; ++t)
          for (int i = 0; i < cfg.d_inter; ++i)
            fired[static_cast<size_t>(l) * cfg.d_inter + i] += g[static_cast<size_t>(t) * cfg.d_inter + i] > 0.0f;
      }
      tokens += batch.input.seq;
    }
    for (size_t n = 0; n < n_neurons; ++n) p.prob[n * p.n_domains + d] = static_cast<double>(fired[n]) / tokens;
  }
  p.entropy.assign(n_neurons, std::numeric_limits<double>::quiet_NaN());
  p.excluded.assign(n_neurons, 0);
  for (size_t n = 0; n < n_neurons; ++n) {
    double z = 0;
    for (int d = 0; d < p.n_domains; ++d) z += p.prob[n * p.n_domains + d];
    if (z <= 0) {
      p.excluded[n] = 1;
      ++p.n_excluded;
      continue;
    }
    double h = 0;
    for (int d = 0; d < p.n_domains; ++d) {
      const double q = p.prob[n * p.n_domains + d] / z;
      if (q > 0) h -= q * std::log(q);
    }
    p.entropy[n] = h;
  }
  return p;
}

LapeResult lape_crossref(const LapeProfile& profile, const GateSet<float>& gates, const HardConcreteConfig& hc,
                         double tail) {
  if (profile.n_domains < 2) throw InputError("LAPE needs at least two domains");
  if (!(tail > 0 && tail <= 0.5)) throw ConfigError("LAPE tail must lie in (0, 0.5]");
  LapeResult r;
  r.profile = profile;
  const size_t n_neurons = static_cast<size_t>(profile.n_layers) * profile.d_inter;
  std::vector<size_t> order;
  for (size_t n = 0; n < n_neurons; ++n)
    if (!profile.excluded[n]) order.push_back(n);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return profile.entropy[a] < profile.entropy[b]; });
  const size_t n_tail = static_cast<size_t>(std::floor(tail * order.size()));
  if (n_tail == 0) throw InputError("too few non-degenerate neurons for the LAPE tails");
  r.specific.assign(n_neurons, 0);
  r.general.assign(n_neurons, 0);
  for (size_t i = 0; i < n_tail; ++i) {
    r.specific[order[i]] = 1;
    r.general[order[order.size() - 1 - i]] = 1;
  }
  r.n_specific = r.n_general = static_cast<int64_t>(n_tail);

  std::vector<uint8_t> pruned_gate(n_neurons), pruned_up(n_neurons);
  for (int l = 0; l < profile.n_layers; ++l)
    for (auto [proj, out] : {std::pair{Proj::kGate, &pruned_gate}, std::pair{Proj::kUp, &pruned_up}}) {
      const auto& la = gates.log_alpha.at({l, proj});
      for (int i = 0; i < profile.d_inter; ++i)
        (*out)[static_cast<size_t>(l) * profile.d_inter + i] = deterministic_gate_value(la.at(i), hc) == 0.0;
    }
  auto row = [&](const std::string& name, auto pruned) {
    LapeRow row;
    row.proj = name;
    double all = 0, spec = 0, gen = 0;
    for (size_t n = 0; n < n_neurons; ++n) {
      const bool p = pruned(n);
      all += p;
      if (r.specific[n]) spec += p;
      if (r.general[n]) gen += p;
    }
    row.sparsity = all / n_neurons;
    row.p_pruned_specific = spec / n_tail;
    row.p_pruned_general = gen / n_tail;
    row.ratio_general = row.sparsity > 0 ? row.p_pruned_general / row.sparsity : 0.0;
    r.rows.push_back(row);
  };
  row("gate", [&](size_t n) { return pruned_gate[n] != 0; });
  row("up", [&](size_t n) { return pruned_up[n] != 0; });
  row("either", [&](size_t n) { return pruned_gate[n] || pruned_up[n]; });
  return r;
}

LapeResult lape_crossref(const DenseModel<float>& teacher, const GateSet<float>& gates, const HardConcreteConfig& hc,
                         const CorpusSet& corpora, const LapeOptions& opt) {
  return lape_crossref(lape_profile(teacher, corpora, opt), gates, hc, opt.tail);
}

std::vector<SweepRow> sparsity_sweep(const DenseModel<float>& teacher, const TrainPlan& base, const CorpusSet& corpora,
                                     const std::vector<double>& targets, const EvalOptions& opt) {
  if (targets.empty()) throw ConfigError("sparsity sweep needs at least one target");
  std::vector<SweepRow> rows;
  for (double t : targets) {
    SweepRow row;
    row.s_star = t;
    try {
      TrainPlan plan = base;
      plan.gates.s_star = t;
      auto result = run_schedule(teacher, plan, corpora);
      auto ev = evaluate_offload(teacher, result.state, plan, corpora, opt);
      row.global_sparsity = ev.sparsity.global_sparsity();
      row.gated_row_sparsity = ev.sparsity.gated_row_sparsity();
      row.ppl = ev.ppl;
      row.mean_ppl = ev.mean_ppl;
      row.ok = true;
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

}  // namespace koff
