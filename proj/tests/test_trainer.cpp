#include <cmath>

#include "doctest.h"
#include "koff/corpus.hpp"
#include "koff/errors.hpp"
#include "koff/gates.hpp"
#include "koff/memory.hpp"
#include "koff/optim.hpp"
#include "koff/trainer.hpp"
#include "test_util.hpp"

using namespace koff;

namespace {

ModelConfig toy_model() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_inter = 16;
  c.max_seq_len = 16;
  return c;
}

CorpusSet toy_corpora() {
  CorpusConfig cc;
  cc.vocab_size = 32;
  cc.shared_vocab = 8;
  cc.n_domains = 2;
  cc.tokens_per_domain = 2000;
  cc.retention_tokens = 1000;
  cc.doc_len = 17;
  return generate_corpora(cc);
}

TrainPlan toy_plan() {
  TrainPlan p;
  p.steps = 6;
  p.batch_size = 2;
  p.seq_len = 8;
  p.top_k = 8;
  p.gates.lambda = 1;
  p.retention_interval = 2;
  p.log_every = 1;
  return p;
}

uint64_t hash_state(const OffloadState& s) {
  uint64_t h = hash_gates(s.gates);
  for (const auto& m : s.modules) h ^= hash_module(m) + 0x9E3779B97F4A7C15ULL + (h << 6);
  return h;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("top-K targets hand example") {
    const std::vector<float> logits = {3, 1, 0};
    auto t = top_k_targets(logits, 3, 2);
    REQUIRE(t.k == 2);
    CHECK(t.idx == std::vector<int32_t>{0, 1});
    const double z = std::exp(3.0) + std::exp(1.0);
    CHECK(t.prob[0] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-6));
    CHECK(t.prob[1] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-6));
    CHECK(t.prob[0] == doctest::Approx(0.8808).epsilon(1e-4));
  }

  TEST_CASE("top-K ties go to the lowest index") {
    const std::vector<float> logits = {0, 2, 1, 2, 2};
    auto t = top_k_targets(logits, 5, 2);
    CHECK(t.idx == std::vector<int32_t>{1, 3});
    CHECK(t.prob[0] == doctest::Approx(0.5));
  }

  TEST_CASE("K = vocab reproduces the full softmax and probabilities sum to one") {
    Rng rng(1, Stream::kTest);
    std::vector<float> logits(3 * 6);
    for (auto& v : logits) v = float(rng.normal());
    auto t = top_k_targets(logits, 6, 6);
    for (int p = 0; p < 3; ++p) {
      double z = 0, total = 0;
      for (int j = 0; j < 6; ++j) z += std::exp(double(logits[p * 6 + j]));
      for (int j = 0; j < 6; ++j) {
        const int i = t.idx[p * 6 + j];
        CHECK(t.prob[p * 6 + j] == doctest::Approx(std::exp(double(logits[p * 6 + i])) / z).epsilon(1e-5));
        total += t.prob[p * 6 + j];
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("distillation loss hand example") {
    // Student softmax is (0.5, 0.25, 0.25).
    auto logits = Tensor<double>::from({1, 3}, {std::log(0.5), std::log(0.25), std::log(0.25)});
    TeacherTargets t{2, 1, {0, 1}, {0.75f, 0.25f}};
    CHECK(distill_loss(logits, t).item() == doctest::Approx(0.75 * std::log(1.5)).epsilon(1e-6));
    CHECK(distill_loss(logits, t).item() == doctest::Approx(0.3041).epsilon(1e-4));
  }

  TEST_CASE("distillation loss is zero for student equal to teacher and nonnegative otherwise") {
    Rng rng(2, Stream::kTest);
    std::vector<float> logits(4 * 7);
    for (auto& v : logits) v = float(rng.normal());
    auto student = Tensor<double>::from({4, 7}, std::vector<double>(logits.begin(), logits.end()));
    CHECK(std::abs(distill_loss(student, top_k_targets(logits, 7, 7)).item()) < 1e-6);
    for (int trial = 0; trial < 20; ++trial) {
      auto other = koff::test::randn({4, 7}, rng, 2.0);
      CHECK(distill_loss(other, top_k_targets(logits, 7, 3)).item() >= -1e-9);
    }
  }

  TEST_CASE("gradient check: full joint loss on a 2-layer toy") {
    auto model = init_dense<double>(toy_model(), 3);
    TrainPlan plan = toy_plan();
    plan.gates.lambda = 2;
    plan.memory.first_layer = 0;
    plan.memory.n_kv = 3;
    Rng rng(4, Stream::kTest);
    GateSet<double> gates;
    GateNoise noise;
    for (const auto& s : model.sites()) {
      const int64_t n = model.site_weight(s).dim(0);
      gates.log_alpha[s] = koff::test::rand_uniform({n}, rng, 2.0, 2.5);
      auto& u = noise[s];
      for (int64_t i = 0; i < n; ++i) u.push_back(0.3 + 0.4 * rng.uniform());
    }
    auto mod = init_module<double>(model.config, plan.memory, 0, 5);
    for (auto& [s, p] : mod.lora)
      for (auto& v : p.b.mutable_data()) v = 0.3 * rng.normal();

    TrainBatch batch;
    batch.input = TokenBatch{2, 5, {1, 4, 9, 16, 25, 2, 3, 5, 7, 11}};
    batch.targets = {4, 9, 16, 25, 0, 3, 5, 7, 11, 13};
    batch.domain = 0;
    TeacherTargets targets;
    {
      auto t = forward_dense(init_dense<double>(toy_model(), 99), batch.input);
      std::vector<float> lf(t.values().begin(), t.values().end());
      targets = top_k_targets(lf, 32, plan.top_k);
    }
    std::vector<Tensor<double>> params = gates.parameters();
    for (auto& t : mod.lora_parameters()) params.push_back(t);
    for (auto& t : mod.kv_parameters()) params.push_back(t);
    auto parts = offload_loss<double>(model, &gates, &mod, batch, &targets, &noise, plan, true);
    REQUIRE(parts.hinge.defined());
    REQUIRE(parts.hinge.item() > 0.0);
    auto r = koff::test::grad_check(params, [&] {
      return offload_loss<double>(model, &gates, &mod, batch, &targets, &noise, plan, true).total;
    });
    MESSAGE("joint loss grad check: max rel ", r.max_rel, " over ", r.checked, " entries");
    CHECK(r.max_rel < 1e-3);
  }

  TEST_CASE("teacher as student is a fixed point") {
    auto model = init_dense<double>(toy_model(), 6);
    TrainPlan plan = toy_plan();
    plan.gates.lambda = 0;
    plan.top_k = 32;
    plan.memory.use_kv = false;
    auto gates = init_gates(model, 30.0);
    auto mod = init_module<double>(model.config, plan.memory, 0, 1);
    Rng rng(7, Stream::kTest);
    auto noise = draw_gate_noise(gates, rng);
    TrainBatch batch;
    batch.input = TokenBatch{1, 6, {3, 1, 4, 1, 5, 9}};
    auto t = forward_dense(model, batch.input);
    std::vector<float> lf(t.values().begin(), t.values().end());
    auto targets = top_k_targets(lf, 32, 32);
    for (auto& p : gates.parameters()) p.set_requires_grad(true);
    set_requires_grad(mod, true);
    auto parts = offload_loss<double>(model, &gates, &mod, batch, &targets, &noise, plan, true);
    CHECK(std::abs(parts.total.item()) < 1e-6);
    backward(parts.total);
    double g2 = 0;
    for (auto& p : mod.lora_parameters())
      for (double g : p.grad()) g2 += g * g;
    for (auto& p : gates.parameters())
      for (double g : p.grad()) g2 += g * g;
    CHECK(std::sqrt(g2) < 1e-5);
  }

  TEST_CASE("SFT loss is next-token cross entropy") {
    auto model = init_dense<double>(toy_model(), 8);
    TrainPlan plan = toy_plan();
    plan.loss = LossKind::kSft;
    TrainBatch batch;
    batch.input = TokenBatch{1, 4, {1, 2, 3, 4}};
    batch.targets = {2, 3, 4, 5};
    auto parts = offload_loss<double>(model, nullptr, nullptr, batch, nullptr, nullptr, plan, false);
    CHECK(parts.total.item() == doctest::Approx(cross_entropy(forward_dense(model, batch.input), batch.targets).item()));
    plan.loss = LossKind::kTeacherKl;
    CHECK_THROWS_AS(offload_loss<double>(model, nullptr, nullptr, batch, nullptr, nullptr, plan, false), ContractError);
  }

  TEST_CASE("AdamW with zero learning rate leaves parameters bitwise unchanged") {
    auto p = Tensor<float>::from({3}, {0.5f, -1.0f, 2.0f});
    p.set_requires_grad(true);
    AdamW opt({p}, {0.0, 0.9, 0.999, 1e-8, 0.1});
    backward(sum(mul(p, p)));
    const auto before = p.values();
    opt.step();
    CHECK(p.values() == before);
  }

  TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
    auto p = Tensor<float>::from({2}, {1.0f, -1.0f});
    p.set_requires_grad(true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-12, 0.0});
    backward(sum(p));
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.9f));
    CHECK(p.at(1) == doctest::Approx(-1.1f));
  }

  TEST_CASE("zero learning rates are rejected by the plan") {
    TrainPlan p = toy_plan();
    p.lr_gate = 0;
    CHECK_THROWS_AS(p.validate(toy_model()), ConfigError);
  }

  TEST_CASE("training never writes the teacher and steps=0 returns the init state") {
    auto teacher = init_dense<float>(toy_model(), 10);
    const auto h = hash_model(teacher);
    auto corpora = toy_corpora();
    TrainPlan plan = toy_plan();
    auto res = run_schedule(teacher, plan, corpora);
    CHECK(hash_model(teacher) == h);
    CHECK(res.state.step == plan.steps);
    CHECK(hash_state(res.state) != hash_state(OffloadTrainer(teacher, plan, 2).state()));

    plan.steps = 0;
    auto none = run_schedule(teacher, plan, corpora);
    CHECK(hash_state(none.state) == hash_state(OffloadTrainer(teacher, plan, 2).state()));
  }

  TEST_CASE("runs are reproducible") {
    auto teacher = init_dense<float>(toy_model(), 11);
    auto corpora = toy_corpora();
    auto a = run_schedule(teacher, toy_plan(), corpora);
    auto b = run_schedule(teacher, toy_plan(), corpora);
    CHECK(hash_state(a.state) == hash_state(b.state));
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) CHECK(metrics_json(a.log[i]) == metrics_json(b.log[i]));
  }

  TEST_CASE("a retention step updates gates only") {
    auto teacher = init_dense<float>(toy_model(), 12);
    auto corpora = toy_corpora();
    OffloadTrainer tr(teacher, toy_plan(), 2);
    Rng rng(3, Stream::kTest);
    auto b0 = sample_batch(corpora.domains[0].train, 2, 8, rng);
    tr.train_step_domain(b0);  // makes B nonzero so LoRA would receive gradient
    std::vector<uint64_t> mods;
    for (const auto& m : tr.state().modules) mods.push_back(hash_module(m));
    const auto g = hash_gates(tr.state().gates);
    auto m = tr.train_step_retention(sample_batch(corpora.retention_train, 2, 8, rng));
    CHECK(m.mode == "retention");
    CHECK(hash_gates(tr.state().gates) != g);
    for (size_t d = 0; d < mods.size(); ++d) CHECK(hash_module(tr.state().modules[d]) == mods[d]);
  }

  TEST_CASE("single-domain retention always picks module 0") {
    auto teacher = init_dense<float>(toy_model(), 13);
    auto corpora = toy_corpora();
    OffloadTrainer tr(teacher, toy_plan(), 1);
    Rng rng(4, Stream::kTest);
    for (int i = 0; i < 5; ++i) CHECK(tr.train_step_retention(sample_batch(corpora.retention_train, 2, 8, rng)).domain == 0);
  }

  TEST_CASE("disabled retention matches the no_retention trajectory") {
    auto teacher = init_dense<float>(toy_model(), 14);
    auto corpora = toy_corpora();
    TrainPlan off = toy_plan();
    off.retention_interval = 0;
    TrainPlan big = toy_plan();
    big.retention_interval = 1000;  // never reached within 6 steps
    CHECK(hash_state(run_schedule(teacher, off, corpora).state) ==
          hash_state(run_schedule(teacher, big, corpora).state));
  }

  TEST_CASE("prune-then-recover freezes gates after the split") {
    auto teacher = init_dense<float>(toy_model(), 15);
    auto corpora = toy_corpora();
    TrainPlan full = toy_plan();
    full.schedule = ScheduleKind::kPruneThenRecover;
    full.split_step = 3;
    TrainPlan first = full;
    first.steps = 3;
    auto a = run_schedule(teacher, full, corpora);
    auto b = run_schedule(teacher, first, corpora);
    CHECK(hash_gates(a.state.gates) == hash_gates(b.state.gates));
    // The first stage trains no module; the second does.
    auto fresh = OffloadTrainer(teacher, full, 2).state();
    CHECK(hash_module(b.state.modules[0]) == hash_module(fresh.modules[0]));
    CHECK(hash_module(a.state.modules[0]) != hash_module(fresh.modules[0]));
  }

  TEST_CASE("empty corpus is a config error") {
    auto teacher = init_dense<float>(toy_model(), 16);
    CorpusSet empty;
    CHECK_THROWS_AS(run_schedule(teacher, toy_plan(), empty), ConfigError);
  }
}
