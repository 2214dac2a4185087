#pragma once

#include <string>
#include <vector>

#include "koff/analysis.hpp"
#include "koff/corpus.hpp"
#include "koff/model.hpp"
#include "koff/router.hpp"
#include "koff/trainer.hpp"

namespace koff {

// Everything one desk pipeline needs, read from a single flat config.
struct DeskConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TeacherPlan teacher;
  TrainPlan plan;
  RouterPlan router;
  EvalOptions eval;
  LapeOptions lape;
  int probe_texts_per_domain = 40;
  int probe_k = 10;
  std::vector<double> sweep_targets = {0.05, 0.15, 0.4};

  static DeskConfig from_config(const Config& c);
  // Same config with every seed shifted, for seed replicates.
  DeskConfig with_seed(uint64_t seed) const;
};

// Ablation variants layered on top of a base plan:
// koff, pruning_only, lora_only, kv_only, prune_recover, all_layers,
// no_retention, sft, blended.
const std::vector<std::string>& variant_names();
TrainPlan variant_plan(const TrainPlan& base, const std::string& variant);

struct Prepared {
  CorpusSet corpora;
  DenseModel<float> teacher;
  std::vector<double> teacher_ppl;  // per domain, held-out split
  double teacher_mean_ppl = 0;
};

// Generates the corpora, trains the teacher and scores it.
Prepared prepare(const DeskConfig& cfg);

std::vector<double> teacher_perplexities(const DenseModel<float>& teacher, const CorpusSet& corpora,
                                         const EvalOptions& opt);

}  // namespace koff
