#include "koff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/materialize.hpp"
#include "koff/ops.hpp"

namespace koff {

std::string loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kTeacherKl: return "teacher_kl";
    case LossKind::kSft: return "sft";
    case LossKind::kBlended: return "blended";
  }
  return "?";
}

void TrainPlan::validate(const ModelConfig& m) const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1 || seq_len < 1) throw ConfigError("batch_size and seq_len must be >= 1");
  if (seq_len > m.max_seq_len) throw ConfigError("seq_len exceeds the model's max_seq_len");
  if (top_k < 1 || top_k > m.vocab_size) throw ConfigError("top_k must lie in [1, vocab_size]");
  if (!(lr_lora > 0 && lr_gate > 0 && lr_mem > 0)) throw ConfigError("learning rates must be > 0");
  if (!(blend_alpha >= 0 && blend_alpha <= 1)) throw ConfigError("blend_alpha must lie in [0, 1]");
  if (retention_interval < 0) throw ConfigError("retention_interval must be >= 0 (0 disables)");
  if (schedule == ScheduleKind::kPruneThenRecover && (split_step < 0 || split_step > steps))
    throw ConfigError("split_step must lie in [0, steps]");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  gates.validate();
  memory.validate(m);
}

TrainPlan TrainPlan::from_config(const Config& c) {
  TrainPlan p;
  p.steps = static_cast<int>(c.get_int("steps", p.steps));
  p.batch_size = static_cast<int>(c.get_int("batch_size", p.batch_size));
  p.seq_len = static_cast<int>(c.get_int("seq_len", p.seq_len));
  p.top_k = static_cast<int>(c.get_int("top_k", p.top_k));
  p.lr_lora = c.get_double("lr_lora", p.lr_lora);
  p.lr_gate = c.get_double("lr_gate", p.lr_gate);
  p.lr_mem = c.get_double("lr_mem", p.lr_mem);
  p.weight_decay = c.get_double("weight_decay", p.weight_decay);
  p.gate_init = c.get_double("gate_init", p.gate_init);
  p.prune = c.get_bool("prune", p.prune);
  p.gates = HardConcreteConfig::from_config(c);
  p.memory = MemoryConfig::from_config(c);
  double interval = c.get_double("retention_interval", p.retention_interval);
  p.retention_interval = std::isinf(interval) ? 0 : static_cast<int>(interval);
  p.retention_batch_size = static_cast<int>(c.get_int("retention_batch_size", p.retention_batch_size));
  auto target = c.get_string("retention_target", "gates");
  if (target == "gates") p.retention_target = RetentionTarget::kGatesOnly;
  else if (target == "gates_and_modules") p.retention_target = RetentionTarget::kGatesAndModules;
  else throw ConfigError("retention_target must be gates or gates_and_modules, got '" + target + "'");
  p.retention_hinge = c.get_bool("retention_hinge", p.retention_hinge);
  auto loss = c.get_string("loss", "teacher_kl");
  if (loss == "teacher_kl") p.loss = LossKind::kTeacherKl;
  else if (loss == "sft") p.loss = LossKind::kSft;
  else if (loss == "blended") p.loss = LossKind::kBlended;
  else throw ConfigError("loss must be teacher_kl, sft or blended, got '" + loss + "'");
  p.blend_alpha = c.get_double("blend_alpha", p.blend_alpha);
  auto schedule = c.get_string("schedule", "joint");
  if (schedule == "joint") p.schedule = ScheduleKind::kJoint;
  else if (schedule == "prune_then_recover") p.schedule = ScheduleKind::kPruneThenRecover;
  else throw ConfigError("schedule must be joint or prune_then_recover, got '" + schedule + "'");
  p.split_step = static_cast<int>(c.get_int("split_step", p.steps / 2));
  p.mask_memory = c.get_bool("mask_memory", p.mask_memory);
  p.seed = static_cast<uint64_t>(c.get_int("seed", static_cast<long long>(p.seed)));
  p.log_every = static_cast<int>(c.get_int("log_every", p.log_every));
  return p;
}

void TrainPlan::write_meta(std::map<std::string, std::string>& meta) const {
  auto put = [&](const std::string& k, const auto& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    meta["plan." + k] = os.str();
  };
  put("steps", steps);
  put("batch_size", batch_size);
  put("seq_len", seq_len);
  put("top_k", top_k);
  put("lr_lora", lr_lora);
  put("lr_gate", lr_gate);
  put("lr_mem", lr_mem);
  put("gate_init", gate_init);
  put("prune", prune);
  put("beta", gates.beta);
  put("gamma", gates.gamma);
  put("zeta", gates.zeta);
  put("lambda", gates.lambda);
  put("s_star", gates.s_star);
  put("lora_rank", memory.lora_rank);
  put("n_kv", memory.n_kv);
  put("use_lora", memory.use_lora);
  put("use_kv", memory.use_kv);
  put("retention_interval", retention_interval);
  put("loss", loss_kind_name(loss));
  put("mask_memory", mask_memory);
  put("seed", seed);
}

TeacherTargets top_k_targets(std::span<const float> logits, int vocab, int k) {
  if (vocab < 1 || logits.size() % vocab != 0) throw DimensionError("teacher logits are not [positions, vocab]");
  if (k < 1 || k > vocab) throw ContractError("top_k must lie in [1, vocab]");
  TeacherTargets t;
  t.k = k;
  t.positions = static_cast<int>(logits.size() / vocab);
  t.idx.resize(static_cast<size_t>(t.positions) * k);
  t.prob.resize(t.idx.size());
  std::vector<int32_t> order(static_cast<size_t>(vocab));
  for (int r = 0; r < t.positions; ++r) {
    const float* row = logits.data() + static_cast<size_t>(r) * vocab;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](int32_t a, int32_t b) {
      return row[a] > row[b] || (row[a] == row[b] && a < b);
    });
    double mx = row[order[0]], z = 0;
    std::vector<double> e(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) z += (e[i] = std::exp(static_cast<double>(row[order[i]]) - mx));
    for (int i = 0; i < k; ++i) {
      t.idx[static_cast<size_t>(r) * k + i] = order[i];
      t.prob[static_cast<size_t>(r) * k + i] = static_cast<float>(e[i] / z);
    }
  }
  return t;
}

TeacherTargets teacher_targets(const DenseModel<float>& teacher, const TokenBatch& batch, int k) {
  NoGradGuard no_grad;
  auto logits = forward_dense(teacher, batch);
  return top_k_targets(logits.data(), teacher.config.vocab_size, k);
}

template <typename T>
LossParts<T> offload_loss(const DenseModel<T>& model, const GateSet<T>* gates, const MemoryModule<T>* module,
                          const TrainBatch& batch, const TeacherTargets* targets, const GateNoise* noise,
                          const TrainPlan& plan, bool with_hinge) {
  GateValues<T> z;
  if (gates) z = noise ? sample_gates(*gates, plan.gates, *noise) : deterministic_gates(*gates, plan.gates);
  Attachment<T> att{gates ? &z : nullptr, module, plan.mask_memory};
  auto logits = forward<T>(model, batch.input, att);

  auto kl = [&] {
    if (!targets) throw ContractError("distillation needs teacher targets");
    return distill_loss(logits, *targets);
  };
  LossParts<T> parts;
  switch (plan.loss) {
    case LossKind::kTeacherKl: parts.task = kl(); break;
    case LossKind::kSft: parts.task = cross_entropy(logits, batch.targets); break;
    case LossKind::kBlended: {
      const T a = static_cast<T>(plan.blend_alpha);
      parts.task = add(scale(cross_entropy(logits, batch.targets), a), scale(kl(), T(1) - a));
      break;
    }
  }
  parts.total = parts.task;
  if (with_hinge && gates && plan.gates.lambda > 0) {
    parts.hinge = hinge_penalty(*gates, plan.gates);
    parts.total = add(parts.total, parts.hinge);
  }
  return parts;
}

template LossParts<float> offload_loss<float>(const DenseModel<float>&, const GateSet<float>*,
                                              const MemoryModule<float>*, const TrainBatch&, const TeacherTargets*,
                                              const GateNoise*, const TrainPlan&, bool);
template LossParts<double> offload_loss<double>(const DenseModel<double>&, const GateSet<double>*,
                                                const MemoryModule<double>*, const TrainBatch&,
                                                const TeacherTargets*, const GateNoise*, const TrainPlan&, bool);

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mode"] = m.mode;
  j["domain"] = m.domain;
  j["loss"] = m.loss;
  j["task"] = m.task;
  j["hinge"] = m.hinge;
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& [s, v] : m.a_hat) a[s.str()] = v;
  j["a_hat"] = a;
  j["global_sparsity"] = m.global_sparsity;
  return j.dump();
}

OffloadTrainer::OffloadTrainer(const DenseModel<float>& teacher, const TrainPlan& plan, int n_domains)
    : teacher_(teacher),
      plan_(plan),
      noise_rng_(plan.seed, Stream::kGateNoise),
      retention_rng_(plan.seed, Stream::kRetention) {
  plan_.validate(teacher.config);
  if (n_domains < 1) throw ConfigError("offloading needs at least one domain");
  state_.gates = init_gates(teacher, plan_.gate_init);
  for (auto& t : state_.gates.parameters()) t.set_requires_grad(plan_.prune);
  gate_opt_ = AdamW(state_.gates.parameters(), {plan_.lr_gate, 0.9, 0.999, 1e-8, 0.0});
  for (int d = 0; d < n_domains; ++d) {
    auto m = init_module<float>(teacher.config, plan_.memory, d, plan_.seed);
    set_requires_grad(m, true);
    lora_opt_.emplace_back(m.lora_parameters(), AdamWConfig{plan_.lr_lora, 0.9, 0.999, 1e-8, plan_.weight_decay});
    mem_opt_.emplace_back(m.kv_parameters(), AdamWConfig{plan_.lr_mem, 0.9, 0.999, 1e-8, 0.0});
    state_.modules.push_back(std::move(m));
  }
}

StepMetrics OffloadTrainer::step(const TrainBatch& batch, const MemoryModule<float>* module, bool update_gates,
                                 AdamW* lora_opt, AdamW* mem_opt, bool with_hinge, const char* mode) {
  TeacherTargets targets;
  if (plan_.loss != LossKind::kSft) targets = teacher_targets(teacher_, batch.input, plan_.top_k);
  const bool stochastic = plan_.prune && !gates_frozen_;
  GateNoise noise;
  if (stochastic) noise = draw_gate_noise(state_.gates, noise_rng_);

  auto parts = offload_loss<float>(teacher_, plan_.prune ? &state_.gates : nullptr, module, batch,
                                   plan_.loss == LossKind::kSft ? nullptr : &targets,
                                   stochastic ? &noise : nullptr, plan_, with_hinge && stochastic);
  StepMetrics m;
  m.step = state_.step;
  m.mode = mode;
  m.domain = module ? module->domain : batch.domain;
  m.loss = parts.total.item();
  m.task = parts.task.item();
  m.hinge = parts.hinge.defined() ? parts.hinge.item() : 0.0;
  if (!std::isfinite(m.loss)) {
    double la_max = 0;
    for (const auto& t : state_.gates.parameters())
      for (float v : t.values()) la_max = std::max(la_max, std::abs(static_cast<double>(v)));
    std::ostringstream os;
    os << "non-finite loss at step " << m.step << " (" << mode << ", domain " << m.domain << "): task=" << m.task
       << " hinge=" << m.hinge << " max|log_alpha|=" << la_max;
    throw NumericError(os.str());
  }

  gate_opt_.zero_grad();
  if (lora_opt) lora_opt->zero_grad();
  if (mem_opt) mem_opt->zero_grad();
  if (parts.total.node()->tracked) backward(parts.total);
  if (update_gates && stochastic) gate_opt_.step();
  if (lora_opt) lora_opt->step();
  if (mem_opt) mem_opt->step();
  gate_opt_.zero_grad();
  for (auto& o : lora_opt_) o.zero_grad();
  for (auto& o : mem_opt_) o.zero_grad();

  if (plan_.prune) {
    m.a_hat = active_fractions(state_.gates, plan_.gates);
    m.global_sparsity = sparsity_report(teacher_, state_.gates, plan_.gates).global_sparsity();
  }
  return m;
}

StepMetrics OffloadTrainer::train_step_domain(const TrainBatch& batch) {
  if (batch.domain < 0 || batch.domain >= static_cast<int>(state_.modules.size()))
    throw ContractError("no module for domain " + std::to_string(batch.domain));
  const int d = batch.domain;
  StepMetrics m;
  if (modules_detached_) {
    m = step(batch, nullptr, true, nullptr, nullptr, true, "domain");
    m.domain = d;
  } else {
    m = step(batch, &state_.modules[d], true, &lora_opt_[d], &mem_opt_[d], true, "domain");
  }
  ++state_.step;
  return m;
}

StepMetrics OffloadTrainer::train_step_retention(const TrainBatch& batch) {
  const int n = static_cast<int>(state_.modules.size());
  const int d = n == 1 ? 0 : static_cast<int>(retention_rng_.below(static_cast<uint64_t>(n)));
  const bool modules_too = plan_.retention_target == RetentionTarget::kGatesAndModules && !modules_detached_;
  const MemoryModule<float>* module = modules_detached_ ? nullptr : &state_.modules[d];
  auto m = step(batch, module, true, modules_too ? &lora_opt_[d] : nullptr, modules_too ? &mem_opt_[d] : nullptr,
                plan_.retention_hinge, "retention");
  m.domain = d;
  return m;
}

OffloadResult run_schedule(const DenseModel<float>& teacher, const TrainPlan& plan, const CorpusSet& corpora,
                           const StepCallback& on_step) {
  if (corpora.domains.empty()) throw ConfigError("empty corpus: no domains");
  for (const auto& d : corpora.domains)
    if (d.train.empty()) throw ConfigError("empty corpus: domain " + std::to_string(d.domain) + " has no training data");
  const int n = corpora.n_domains();
  OffloadTrainer trainer(teacher, plan, n);
  OffloadResult result;
  if (plan.steps == 0) {
    result.state = trainer.state();
    return result;
  }

  Rng batches(plan.seed, Stream::kBatches);
  std::vector<Rng> domain_rng;
  for (int d = 0; d < n; ++d) domain_rng.push_back(batches.fork(static_cast<uint64_t>(d) + 1));
  Rng retention_rng = Rng(plan.seed, Stream::kRetention).fork(1);
  const int rbs = plan.retention_batch_size > 0 ? plan.retention_batch_size : plan.batch_size;
  const bool two_stage = plan.schedule == ScheduleKind::kPruneThenRecover;
  if (two_stage) trainer.detach_modules(plan.split_step > 0);
  bool frozen = false;

  auto record = [&](const StepMetrics& m, bool keep) {
    if (on_step) on_step(m);
    if (keep) result.log.push_back(m);
  };

  for (int s = 0; s < plan.steps; ++s) {
    if (two_stage && s == plan.split_step) {
      trainer.detach_modules(false);
      trainer.freeze_gates(true);
      frozen = true;
    }
    const int d = s % n;
    auto batch = sample_batch(corpora.domains[d].train, plan.batch_size, plan.seq_len, domain_rng[d]);
    const bool keep = (s + 1) % plan.log_every == 0 || s + 1 == plan.steps;
    record(trainer.train_step_domain(batch), keep);

    const bool retention_useful = !(frozen && plan.retention_target == RetentionTarget::kGatesOnly);
    if (plan.retention_interval > 0 && (s + 1) % plan.retention_interval == 0 && !corpora.retention_train.empty() &&
        plan.prune && retention_useful) {
      auto rb = sample_batch(corpora.retention_train, rbs, plan.seq_len, retention_rng);
      record(trainer.train_step_retention(rb), keep);
    }
  }
  result.state = trainer.state();
  return result;
}

TeacherPlan TeacherPlan::from_config(const Config& c) {
  TeacherPlan p;
  p.steps = static_cast<int>(c.get_int("teacher_steps", p.steps));
  p.batch_size = static_cast<int>(c.get_int("teacher_batch_size", p.batch_size));
  p.seq_len = static_cast<int>(c.get_int("teacher_seq_len", c.get_int("seq_len", p.seq_len)));
  p.lr = c.get_double("teacher_lr", p.lr);
  p.weight_decay = c.get_double("teacher_weight_decay", p.weight_decay);
  p.warmup = static_cast<int>(c.get_int("teacher_warmup", p.warmup));
  p.seed = static_cast<uint64_t>(c.get_int("seed", static_cast<long long>(p.seed)));
  p.log_every = static_cast<int>(c.get_int("log_every", p.log_every));
  if (p.steps < 0 || p.batch_size < 1 || p.seq_len < 1 || !(p.lr > 0))
    throw ConfigError("teacher plan needs steps >= 0, batch_size, seq_len >= 1 and lr > 0");
  return p;
}

DenseModel<float> train_teacher(const ModelConfig& cfg, const TeacherPlan& plan, const CorpusSet& corpora,
                                const std::function<void(const TeacherStep&)>& on_step) {
  cfg.validate();
  if (corpora.domains.empty()) throw ConfigError("empty corpus: no domains");
  if (corpora.vocab_size > cfg.vocab_size) throw ConfigError("corpus vocabulary exceeds the model vocabulary");
  if (plan.seq_len > cfg.max_seq_len) throw ConfigError("teacher seq_len exceeds max_seq_len");
  auto model = init_dense<float>(cfg, plan.seed);
  set_requires_grad(model, true);
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  AdamW opt(params, {plan.lr, 0.9, 0.95, 1e-8, plan.weight_decay});

  std::vector<const TokenStream*> streams;
  for (const auto& d : corpora.domains) streams.push_back(&d.train);
  if (!corpora.retention_train.empty()) streams.push_back(&corpora.retention_train);
  Rng base(plan.seed, Stream::kBatches);
  std::vector<Rng> rngs;
  for (size_t i = 0; i < streams.size(); ++i) rngs.push_back(base.fork(1000 + i));

  for (int s = 0; s < plan.steps; ++s) {
    double lr = plan.lr;
    if (s < plan.warmup) {
      lr *= static_cast<double>(s + 1) / plan.warmup;
    } else {
      double t = static_cast<double>(s - plan.warmup) / std::max(1, plan.steps - plan.warmup);
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * t));
    }
    opt.set_lr(lr);
    const size_t i = static_cast<size_t>(s) % streams.size();
    auto batch = sample_batch(*streams[i], plan.batch_size, plan.seq_len, rngs[i]);
    auto loss = cross_entropy(forward_dense(model, batch.input), batch.targets);
    if (!std::isfinite(loss.item()))
      throw NumericError("non-finite teacher loss at step " + std::to_string(s));
    opt.zero_grad();
    backward(loss);
    opt.step();
    if (on_step && ((s + 1) % plan.log_every == 0 || s + 1 == plan.steps)) on_step({s, loss.item()});
  }
  opt.zero_grad();
  set_requires_grad(model, false);
  return model;
}

}  // namespace koff
