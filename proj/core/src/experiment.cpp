#include "koff/experiment.hpp"

#include <algorithm>
#include <numeric>

#include "koff/config.hpp"
#include "koff/errors.hpp"

namespace koff {

DeskConfig DeskConfig::from_config(const Config& c) {
  DeskConfig d;
  d.corpus = CorpusConfig::from_config(c);
  d.model = ModelConfig::from_config(c);
  d.teacher = TeacherPlan::from_config(c);
  d.plan = TrainPlan::from_config(c);
  d.router = RouterPlan::from_config(c);
  d.eval.seq_len = static_cast<int>(c.get_int("eval_seq_len", d.plan.seq_len));
  d.eval.batch = static_cast<int>(c.get_int("eval_batch", d.eval.batch));
  d.eval.max_chunks = static_cast<int>(c.get_int("eval_max_chunks", d.eval.max_chunks));
  d.lape.tail = c.get_double("lape_tail", d.lape.tail);
  d.lape.windows_per_domain = static_cast<int>(c.get_int("lape_windows", d.lape.windows_per_domain));
  d.lape.seq_len = static_cast<int>(c.get_int("lape_seq_len", d.plan.seq_len));
  d.lape.seed = d.plan.seed;
  d.probe_texts_per_domain = static_cast<int>(c.get_int("probe_texts_per_domain", d.probe_texts_per_domain));
  d.probe_k = static_cast<int>(c.get_int("probe_k", d.probe_k));
  d.sweep_targets = c.get_doubles("sweep_targets", d.sweep_targets);
  if (d.corpus.vocab_size != d.model.vocab_size) throw ConfigError("corpus and model vocab_size differ");
  d.plan.validate(d.model);
  return d;
}

DeskConfig DeskConfig::with_seed(uint64_t seed) const {
  DeskConfig d = *this;
  d.corpus.seed = seed;
  d.teacher.seed = seed;
  d.plan.seed = seed;
  d.router.seed = seed;
  d.lape.seed = seed;
  return d;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"koff",         "pruning_only", "lora_only",
                                                 "kv_only",      "prune_recover", "all_layers",
                                                 "no_retention", "sft",           "blended"};
  return names;
}

TrainPlan variant_plan(const TrainPlan& base, const std::string& variant) {
  TrainPlan p = base;
  if (variant == "koff") {
  } else if (variant == "pruning_only") {
    p.memory.use_lora = false;
    p.memory.use_kv = false;
  } else if (variant == "lora_only") {
    p.memory.use_kv = false;
  } else if (variant == "kv_only") {
    p.memory.use_lora = false;
  } else if (variant == "prune_recover") {
    p.schedule = ScheduleKind::kPruneThenRecover;
    if (p.split_step <= 0 || p.split_step > p.steps) p.split_step = p.steps / 2;
  } else if (variant == "all_layers") {
    p.memory.first_layer = 0;
  } else if (variant == "no_retention") {
    p.retention_interval = 0;
  } else if (variant == "sft") {
    p.loss = LossKind::kSft;
  } else if (variant == "blended") {
    p.loss = LossKind::kBlended;
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  return p;
}

std::vector<double> teacher_perplexities(const DenseModel<float>& teacher, const CorpusSet& corpora,
                                         const EvalOptions& opt) {
  std::vector<double> out;
  for (const auto& d : corpora.domains)
    out.push_back(perplexity(dense_logits_fn(teacher), d.eval, teacher.config.vocab_size, opt));
  return out;
}

Prepared prepare(const DeskConfig& cfg) {
  Prepared p;
  p.corpora = generate_corpora(cfg.corpus);
  p.teacher = train_teacher(cfg.model, cfg.teacher, p.corpora);
  p.teacher_ppl = teacher_perplexities(p.teacher, p.corpora, cfg.eval);
  p.teacher_mean_ppl = std::accumulate(p.teacher_ppl.begin(), p.teacher_ppl.end(), 0.0) / p.teacher_ppl.size();
  return p;
}

}  // namespace koff
