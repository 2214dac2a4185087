#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "koff/corpus.hpp"
#include "koff/gates.hpp"
#include "koff/materialize.hpp"
#include "koff/model.hpp"
#include "koff/router.hpp"
#include "koff/trainer.hpp"

namespace koff {

struct EvalOptions {
  int seq_len = 64;    // predicted positions per chunk
  int batch = 8;       // chunks per forward call
  int max_chunks = 0;  // 0 evaluates the whole slice
};

struct NllSum {
  double nll = 0;
  int64_t count = 0;
};

// Tiles every document into chunks of seq_len+1 tokens (the tail chunk may
// be shorter) and sums next-token NLL in double.
NllSum nll_sum(const LogitFn& logits, const TokenStream& slice, int vocab, const EvalOptions& opt);
// exp of the token-weighted mean NLL. Input error on an empty slice.
double perplexity(const LogitFn& logits, const TokenStream& slice, int vocab, const EvalOptions& opt);

struct OffloadEval {
  SparsityReport sparsity;
  std::vector<double> ppl;  // per domain with its own module attached
  double mean_ppl = 0;
  CompactBackbone backbone;
  std::vector<MemoryModule<float>> modules;  // compacted
};

// Materializes the trained state and evaluates each domain's held-out split
// with the matched compacted module.
OffloadEval evaluate_offload(const DenseModel<float>& teacher, const OffloadState& state, const TrainPlan& plan,
                             const CorpusSet& corpora, const EvalOptions& opt);

// rows = evaluation domain, columns = attached module.
using SwapMatrix = std::vector<std::vector<double>>;

SwapMatrix swap_matrix(const CompactBackbone& backbone, const std::vector<MemoryModule<float>>& compact_modules,
                       const CorpusSet& corpora, const EvalOptions& opt);

struct ProfileRow {
  SiteId site;
  int64_t channels = 0;
  int64_t pruned = 0;
  double sparsity = 0;
};

// Fraction of channels with deterministic gate 0, ordered by layer.
std::vector<ProfileRow> layer_sparsity_profile(const GateSet<float>& gates, const HardConcreteConfig& hc);

// Row-major n x d matrix.
struct Embeddings {
  int n = 0;
  int d = 0;
  std::vector<double> data;
  const double* row(int i) const { return data.data() + static_cast<size_t>(i) * d; }
};

// Linear CKA of column-centered X and Y:
// ||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F).
double linear_cka(const Embeddings& x, const Embeddings& y);
// Mean Jaccard overlap of cosine k-nearest-neighbor sets (self excluded).
double knn_overlap(const Embeddings& x, const Embeddings& y, int k);
// Cosine between per-class centroids of X and Y, averaged over classes.
// Requires x.d == y.d.
double centroid_cosine(const Embeddings& x, const Embeddings& y, const std::vector<int>& labels);

struct ProbeResult {
  double cka = 0;
  double knn_overlap = 0;
  double centroid_cos = 0;
};

Embeddings embed_dense(const DenseModel<float>& model, const std::vector<LabelledText>& texts);
Embeddings embed_compact(const CompactBackbone& b, const std::vector<LabelledText>& texts);
// Mean-pooled final hidden states of both backbones, no modules attached.
ProbeResult backbone_probes(const DenseModel<float>& dense, const CompactBackbone& backbone,
                            const std::vector<LabelledText>& texts, int k = 10);

struct LapeOptions {
  double tail = 0.15;
  int windows_per_domain = 64;
  int seq_len = 64;
  uint64_t seed = 1;
};

// Activation probability of every MLP intermediate neuron (gate branch
// post-activation > 0) per domain.
struct LapeProfile {
  int n_layers = 0;
  int d_inter = 0;
  int n_domains = 0;
  std::vector<double> prob;     // [layer*d_inter + i][domain]
  std::vector<double> entropy;  // per neuron, NaN when excluded
  std::vector<uint8_t> excluded;
  int64_t n_excluded = 0;
};

struct LapeRow {
  std::string proj;  // "gate", "up" or "either"
  double sparsity = 0;
  double p_pruned_specific = 0;
  double p_pruned_general = 0;
  double ratio_general = 0;  // P(pruned | general) / sparsity
};

struct LapeResult {
  LapeProfile profile;
  int64_t n_specific = 0;
  int64_t n_general = 0;
  std::vector<uint8_t> specific, general;
  std::vector<LapeRow> rows;
};

LapeProfile lape_profile(const DenseModel<float>& teacher, const CorpusSet& corpora, const LapeOptions& opt);
LapeResult lape_crossref(const LapeProfile& profile, const GateSet<float>& gates, const HardConcreteConfig& hc,
                         double tail);
LapeResult lape_crossref(const DenseModel<float>& teacher, const GateSet<float>& gates, const HardConcreteConfig& hc,
                         const CorpusSet& corpora, const LapeOptions& opt);

struct SweepRow {
  double s_star = 0;
  bool ok = false;
  std::string error;
  double global_sparsity = 0;
  double gated_row_sparsity = 0;
  std::vector<double> ppl;  // per domain, matched module
  double mean_ppl = 0;
};

// One offloading run per target; failed runs are kept as marked rows.
std::vector<SweepRow> sparsity_sweep(const DenseModel<float>& teacher, const TrainPlan& base, const CorpusSet& corpora,
                                     const std::vector<double>& targets, const EvalOptions& opt);

// Plain CSV: header row then data rows; doubles printed with 10 significant
// digits.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string fmt(double v);

}  // namespace koff
