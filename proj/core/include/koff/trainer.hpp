#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "koff/corpus.hpp"
#include "koff/gates.hpp"
#include "koff/memory.hpp"
#include "koff/model.hpp"
#include "koff/optim.hpp"
#include "koff/rng.hpp"

namespace koff {

enum class LossKind { kTeacherKl, kSft, kBlended };
enum class ScheduleKind { kJoint, kPruneThenRecover };
enum class RetentionTarget { kGatesOnly, kGatesAndModules };

std::string loss_kind_name(LossKind k);

struct TrainPlan {
  int steps = 600;
  int batch_size = 16;
  int seq_len = 64;
  int top_k = 100;
  double lr_lora = 1e-5;
  double lr_gate = 1e-2;
  double lr_mem = 1e-2;
  double weight_decay = 0.0;
  double gate_init = 3.0;  // initial log_alpha
  bool prune = true;  // false trains modules against the unmasked backbone
  HardConcreteConfig gates;
  MemoryConfig memory;
  int retention_interval = 20;  // 0 disables retention batches
  int retention_batch_size = 0;  // 0 means batch_size
  RetentionTarget retention_target = RetentionTarget::kGatesOnly;
  bool retention_hinge = false;
  LossKind loss = LossKind::kTeacherKl;
  double blend_alpha = 0.5;  // weight of cross-entropy in the blended loss
  ScheduleKind schedule = ScheduleKind::kJoint;
  int split_step = 0;
  bool mask_memory = true;
  uint64_t seed = 1;
  int log_every = 10;

  void validate(const ModelConfig& m) const;
  static TrainPlan from_config(const Config& c);
  void write_meta(std::map<std::string, std::string>& meta) const;
};

// Top-K teacher support per position with probabilities renormalized over it.
struct TeacherTargets {
  int k = 0;
  int positions = 0;
  std::vector<int32_t> idx;  // positions*k
  std::vector<float> prob;   // positions*k
};

// Pure selection over a row-major [positions, vocab] logit block. Ties at the
// K-th rank go to the lowest token index.
TeacherTargets top_k_targets(std::span<const float> logits, int vocab, int k);
TeacherTargets teacher_targets(const DenseModel<float>& teacher, const TokenBatch& batch, int k);

template <typename T>
Tensor<T> distill_loss(const Tensor<T>& student_logits, const TeacherTargets& targets) {
  return topk_kl(student_logits, targets.idx, targets.prob, targets.k);
}

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> task;   // distillation / CE part
  Tensor<T> hinge;  // undefined when not applied
};

// Loss of one batch under fixed gate noise. Exposed for gradient checking.
template <typename T>
LossParts<T> offload_loss(const DenseModel<T>& model, const GateSet<T>* gates, const MemoryModule<T>* module,
                          const TrainBatch& batch, const TeacherTargets* targets, const GateNoise* noise,
                          const TrainPlan& plan, bool with_hinge);

struct StepMetrics {
  int step = 0;
  std::string mode;  // "domain" or "retention"
  int domain = -1;
  double loss = 0;
  double task = 0;
  double hinge = 0;
  std::map<SiteId, double> a_hat;
  double global_sparsity = 0;  // deterministic-gate estimate
};

std::string metrics_json(const StepMetrics& m);

struct OffloadState {
  GateSet<float> gates;
  std::vector<MemoryModule<float>> modules;
  int step = 0;
};

// Owns the student parameters and their three optimizer groups. The teacher
// is held by reference and never written.
class OffloadTrainer {
 public:
  OffloadTrainer(const DenseModel<float>& teacher, const TrainPlan& plan, int n_domains);

  StepMetrics train_step_domain(const TrainBatch& batch);
  StepMetrics train_step_retention(const TrainBatch& batch);

  // Gates stop updating and the hinge is dropped (second stage of
  // prune-then-recover).
  void freeze_gates(bool on) { gates_frozen_ = on; }
  // Domain batches run without modules (first stage of prune-then-recover).
  void detach_modules(bool on) { modules_detached_ = on; }

  OffloadState& state() { return state_; }
  const OffloadState& state() const { return state_; }
  const TrainPlan& plan() const { return plan_; }

 private:
  StepMetrics step(const TrainBatch& batch, const MemoryModule<float>* module, bool update_gates,
                   AdamW* lora_opt, AdamW* mem_opt, bool with_hinge, const char* mode);

  const DenseModel<float>& teacher_;
  TrainPlan plan_;
  OffloadState state_;
  AdamW gate_opt_;
  std::vector<AdamW> lora_opt_;
  std::vector<AdamW> mem_opt_;
  Rng noise_rng_;
  Rng retention_rng_;
  bool gates_frozen_ = false;
  bool modules_detached_ = false;
};

using StepCallback = std::function<void(const StepMetrics&)>;

struct OffloadResult {
  OffloadState state;
  std::vector<StepMetrics> log;  // every log_every steps plus the final step
};

// Round-robin over domains; one retention batch after every S domain steps.
OffloadResult run_schedule(const DenseModel<float>& teacher, const TrainPlan& plan, const CorpusSet& corpora,
                           const StepCallback& on_step = {});

struct TeacherPlan {
  int steps = 1500;
  int batch_size = 16;
  int seq_len = 64;
  double lr = 3e-3;
  double weight_decay = 0.01;
  int warmup = 50;
  uint64_t seed = 1;
  int log_every = 50;

  static TeacherPlan from_config(const Config& c);
};

struct TeacherStep {
  int step = 0;
  double loss = 0;
};

// Next-token training of the dense model on every domain plus the retention
// stream, cycling through the streams.
DenseModel<float> train_teacher(const ModelConfig& cfg, const TeacherPlan& plan, const CorpusSet& corpora,
                                const std::function<void(const TeacherStep&)>& on_step = {});

}  // namespace koff
