#include <cmath>

#include "doctest.h"
#include "koff/checkpoint.hpp"
#include "koff/corpus.hpp"
#include "koff/errors.hpp"
#include "koff/gates.hpp"
#include "koff/materialize.hpp"
#include "koff/memory.hpp"
#include "koff/router.hpp"
#include "test_util.hpp"

using namespace koff;
using koff::test::max_abs_diff;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_inter = 16;
  c.max_seq_len = 16;
  return c;
}

// Mixture of closed, fractional and open gates; channel 0 of every site stays
// open so no site is fully pruned.
GateSet<float> mixed_gates(const DenseModel<float>& m, Rng& rng) {
  auto g = init_gates(m, 10.0);
  for (auto& [s, t] : g.log_alpha) {
    auto d = t.mutable_data();
    for (size_t i = 1; i < d.size(); ++i) {
      const double r = rng.uniform();
      d[i] = r < 0.35 ? -10.0f : r < 0.65 ? float(-1.5 + 3 * rng.uniform()) : 10.0f;
    }
  }
  return g;
}

MemoryModule<float> random_module(const ModelConfig& c, Rng& rng) {
  MemoryConfig mc;
  mc.first_layer = 0;
  mc.n_kv = 4;
  mc.kv_init_std = 0.5;
  auto m = init_module<float>(c, mc, 0, 3);
  for (auto& [s, p] : m.lora)
    for (auto& v : p.b.mutable_data()) v = float(0.2 * rng.normal());
  return m;
}

TokenBatch random_batch(Rng& rng, const ModelConfig& c) {
  TokenBatch b;
  b.batch = 1 + static_cast<int>(rng.below(2));
  b.seq = 1 + static_cast<int>(rng.below(c.max_seq_len));
  for (int i = 0; i < b.batch * b.seq; ++i) b.ids.push_back(static_cast<int32_t>(rng.below(c.vocab_size)));
  return b;
}

int64_t count(const std::vector<uint8_t>& v) { return std::count(v.begin(), v.end(), uint8_t(1)); }

}  // namespace

TEST_SUITE("materialize") {
  TEST_CASE("compacted logits equal the masked model on 100 random inputs") {
    Rng rng(1, Stream::kTest);
    auto model = init_dense<float>(toy(), 2);
    auto gates = mixed_gates(model, rng);
    HardConcreteConfig hc;
    auto zhat = deterministic_gates(gates, hc);
    auto keep = keep_mask(zhat);
    // The mixture must exercise every compaction rule.
    bool frac = false, k_pruned = false, v_pruned = false, either_only = false;
    for (const auto& [s, z] : zhat)
      for (float v : z.values()) frac |= v > 0 && v < 1;
    for (int l = 0; l < 2; ++l) {
      k_pruned |= count(keep[{l, Proj::kK}]) < 8;
      v_pruned |= count(keep[{l, Proj::kV}]) < 8;
      const auto &g = keep[{l, Proj::kGate}], &u = keep[{l, Proj::kUp}];
      for (int i = 0; i < 16; ++i) either_only |= g[i] != u[i];
    }
    REQUIRE(frac);
    REQUIRE(k_pruned);
    REQUIRE(v_pruned);
    REQUIRE(either_only);

    auto mod = random_module(model.config, rng);
    auto backbone = materialize(model, gates, hc);
    auto cmod = compact_module(mod, backbone);
    auto masked_bare = masked_logits_fn(model, &zhat, nullptr);
    auto masked_mod = masked_logits_fn(model, &zhat, &mod);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto b = random_batch(rng, model.config);
      worst = std::max(worst, max_abs_diff(compact_logits(backbone, nullptr, b), masked_bare(b)));
      worst = std::max(worst, max_abs_diff(compact_logits(backbone, &cmod, b), masked_mod(b)));
    }
    MESSAGE("max abs logit difference ", worst);
    CHECK(worst <= 1e-5);
    CHECK(backbone.non_embedding_params() < model.non_embedding_params());
  }

  TEST_CASE("saturated gates give the dense model back") {
    auto model = init_dense<float>(toy(), 3);
    HardConcreteConfig hc;
    auto gates = init_gates(model, 30.0);
    auto b = materialize(model, gates, hc);
    CHECK(b.non_embedding_params() == model.non_embedding_params());
    CHECK(sparsity_report(b).global_sparsity() == 0.0);
    TokenBatch batch{1, 5, {1, 2, 3, 4, 5}};
    CHECK(max_abs_diff(compact_logits(b, nullptr, batch), dense_logits_fn(model)(batch)) <= 1e-6);
    MemoryConfig mc;
    auto mod = init_module<float>(model.config, mc, 0, 1);
    CHECK(hash_module(compact_module(mod, b)) == hash_module(mod));
  }

  TEST_CASE("a closed K channel removes the paired Q row") {
    ModelConfig c = toy();
    c.n_layers = 1;
    auto model = init_dense<float>(c, 4);
    auto gates = init_gates(model, 30.0);
    gates.log_alpha[{0, Proj::kK}].mutable_data()[5] = -30.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    CHECK(b.layers[0].wk.dim(0) == 7);
    CHECK(b.layers[0].wq.dim(0) == 7);
    CHECK(b.layers[0].wv.dim(0) == 8);
    auto z = deterministic_gates(gates, hc);
    TokenBatch batch{1, 6, {4, 8, 15, 16, 2, 3}};
    CHECK(max_abs_diff(compact_logits(b, nullptr, batch), masked_logits_fn(model, &z, nullptr)(batch)) <= 1e-6);
  }

  TEST_CASE("a closed V channel removes the W_O column and memory V channel") {
    ModelConfig c = toy();
    c.n_layers = 1;
    auto model = init_dense<float>(c, 5);
    auto gates = init_gates(model, 30.0);
    gates.log_alpha[{0, Proj::kV}].mutable_data()[2] = -30.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    CHECK(b.layers[0].wv.dim(0) == 7);
    CHECK(b.layers[0].wo.dim(1) == 7);
    CHECK(b.layers[0].wo.dim(0) == 8);
    Rng rng(5, Stream::kTest);
    auto mod = random_module(c, rng);
    auto cm = compact_module(mod, b);
    CHECK(cm.mem_v.at(0).dim(1) == 7);
    CHECK(cm.mem_k.at(0).dim(1) == 8);
    auto z = deterministic_gates(gates, hc);
    TokenBatch batch{1, 6, {4, 8, 15, 16, 2, 3}};
    CHECK(max_abs_diff(compact_logits(b, &cm, batch), masked_logits_fn(model, &z, &mod)(batch)) <= 1e-5);
  }

  TEST_CASE("fractional gate is folded into the retained row") {
    ModelConfig c = toy();
    c.n_layers = 1;
    auto model = init_dense<float>(c, 6);
    auto gates = init_gates(model, 30.0);
    gates.log_alpha[{0, Proj::kUp}].mutable_data()[3] = 0.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    const auto& up = b.layers[0].w_up;
    REQUIRE(up.dim(0) == 16);
    for (int j = 0; j < 8; ++j) {
      CHECK(up.at(3 * 8 + j) == doctest::Approx(0.5 * model.layers[0].w_up.at(3 * 8 + j)).epsilon(1e-6));
      CHECK(up.at(4 * 8 + j) == model.layers[0].w_up.at(4 * 8 + j));
    }
    auto z = deterministic_gates(gates, hc);
    TokenBatch batch{1, 4, {1, 3, 5, 7}};
    CHECK(max_abs_diff(compact_logits(b, nullptr, batch), masked_logits_fn(model, &z, nullptr)(batch)) <= 1e-6);
  }

  TEST_CASE("either rule and down scatter") {
    ModelConfig c = toy();
    c.n_layers = 1;
    auto model = init_dense<float>(c, 7);
    auto gates = init_gates(model, 30.0);
    gates.log_alpha[{0, Proj::kGate}].mutable_data()[1] = -30.0f;
    gates.log_alpha[{0, Proj::kUp}].mutable_data()[2] = -30.0f;
    gates.log_alpha[{0, Proj::kDown}].mutable_data()[0] = -30.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    const auto& l = b.layers[0];
    CHECK(l.inter_keep.size() == 14u);
    CHECK(std::find(l.inter_keep.begin(), l.inter_keep.end(), 1) == l.inter_keep.end());
    CHECK(std::find(l.inter_keep.begin(), l.inter_keep.end(), 2) == l.inter_keep.end());
    CHECK(l.w_down.dim(0) == 7);
    CHECK(l.w_down.dim(1) == 14);
    CHECK(l.down_keep.front() == 1);
  }

  TEST_CASE("LoRA B keeps only retained rows") {
    ModelConfig c = toy();
    c.n_layers = 1;
    auto model = init_dense<float>(c, 8);
    auto gates = init_gates(model, 30.0);
    for (int i : {1, 4, 6}) gates.log_alpha[{0, Proj::kK}].mutable_data()[i] = -30.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    MemoryConfig mc;
    mc.first_layer = 0;
    auto cm = compact_module(init_module<float>(c, mc, 0, 1), b);
    CHECK(cm.lora.at({0, Proj::kK}).b.dim(0) == 5);
    CHECK(cm.lora.at({0, Proj::kV}).b.dim(0) == 8);
  }

  TEST_CASE("fully pruned site is a materialization error naming it") {
    auto model = init_dense<float>(toy(), 9);
    auto gates = init_gates(model, 30.0);
    for (auto& v : gates.log_alpha[{1, Proj::kV}].mutable_data()) v = -30.0f;
    HardConcreteConfig hc;
    try {
      materialize(model, gates, hc);
      FAIL("expected a materialization error");
    } catch (const MaterializationError& e) {
      CHECK(std::string(e.what()).find(SiteId{1, Proj::kV}.str()) != std::string::npos);
    }
  }

  TEST_CASE("module shape mismatch is a config error") {
    auto model = init_dense<float>(toy(), 10);
    HardConcreteConfig hc;
    auto b = materialize(model, init_gates(model, 30.0), hc);
    ModelConfig other = toy();
    other.d_model = 16;
    MemoryConfig mc;
    CHECK_THROWS_AS(compact_module(init_module<float>(other, mc, 0, 1), b), ConfigError);
  }

  TEST_CASE("sparsity: nothing pruned is zero") {
    ModelConfig c = toy();
    KeepMask keep;
    for (int l = 0; l < c.n_layers; ++l)
      for (auto p : {Proj::kK, Proj::kV, Proj::kGate, Proj::kUp, Proj::kDown})
        keep[{l, p}] = std::vector<uint8_t>((p == Proj::kGate || p == Proj::kUp) ? 16 : 8, 1);
    auto r = count_sparsity(c, keep);
    CHECK(r.global_sparsity() == 0.0);
    CHECK(r.gated_row_sparsity() == 0.0);
  }

  TEST_CASE("sparsity: one channel kept per site matches a hand count") {
    ModelConfig c = toy();
    KeepMask keep;
    for (int l = 0; l < 2; ++l)
      for (auto p : {Proj::kK, Proj::kV, Proj::kGate, Proj::kUp, Proj::kDown}) {
        std::vector<uint8_t> k((p == Proj::kGate || p == Proj::kUp) ? 16 : 8, 0);
        k[0] = 1;
        keep[{l, p}] = k;
      }
    auto r = count_sparsity(c, keep);
    // Dense per layer: 2 norms (16) + 4 attention maps (256) + 3 MLP maps (384).
    CHECK(r.dense_params == 2 * (16 + 256 + 384) + 8);
    // Kept per layer: norms 16, wq+wk one row each 16, wv row 8, wo column 8,
    // w_gate+w_up one row each 16, w_down one entry 1.
    CHECK(r.removed_params == r.dense_params - (2 * (16 + 16 + 16 + 16 + 1) + 8));
    CHECK(r.pruned_channels.at({0, Proj::kUp}) == 15);
    CHECK(r.local.at({1, Proj::kK}) == doctest::Approx(7.0 / 8));
  }

  TEST_CASE("sparsity: 15 percent local on Llama-like ratios gives about 12.5 percent gated-row sparsity") {
    ModelConfig c;
    c.vocab_size = 32;
    c.d_model = 120;
    c.d_inter = 320;  // the 8192/3072 ratio
    c.n_layers = 2;
    c.n_heads = 4;
    KeepMask keep;
    for (int l = 0; l < 2; ++l)
      for (auto p : {Proj::kK, Proj::kV, Proj::kGate, Proj::kUp, Proj::kDown}) {
        const int n = (p == Proj::kGate || p == Proj::kUp) ? 320 : 120;
        std::vector<uint8_t> k(n, 1);
        for (int i = 0; i < n * 15 / 100; ++i) k[i] = 0;
        keep[{l, p}] = k;
      }
    auto r = count_sparsity(c, keep);
    const double d = 120, f = 320;
    const double dense = 2 * (4 * d * d + 3 * f * d + 2 * d) + d;
    const double rows = 2 * 0.15 * (2 * d * d + 3 * f * d);
    CHECK(r.gated_row_sparsity() == doctest::Approx(rows / dense).epsilon(1e-12));
    CHECK(std::abs(r.gated_row_sparsity() - 0.125) < 1e-3);
    // Physical removal also drops paired Q rows, W_O columns and W_down
    // columns. Aligned gate/up pruning keeps the intersection at 85%.
    const double removed =
        2 * (2 * 0.15 * d * d + 2 * 0.15 * d * d + 2 * 0.15 * f * d + (d * f - 0.85 * d * 0.85 * f));
    CHECK(double(r.removed_params) == doctest::Approx(removed).epsilon(1e-12));
  }

  TEST_CASE("backbone checkpoint round-trip") {
    Rng rng(11, Stream::kTest);
    auto model = init_dense<float>(toy(), 11);
    HardConcreteConfig hc;
    auto b = materialize(model, mixed_gates(model, rng), hc);
    Checkpoint ck;
    save_backbone(ck, b);
    auto back = load_backbone(ck);
    CHECK(hash_backbone(back) == hash_backbone(b));
  }
}

TEST_SUITE("router") {
  TEST_CASE("uniform router breaks ties toward domain 0") {
    auto emb = Tensor<float>::full({10, 4}, 0.5f);
    Router r{Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({3})};
    const std::vector<int32_t> t = {1, 2, 3};
    CHECK(route(r, emb, t) == 0);
    CHECK_THROWS_AS(route(r, emb, std::span<const int32_t>{}), InputError);
  }

  TEST_CASE("pooling is the mean embedding") {
    auto emb = Tensor<float>::from({3, 2}, {1, 0, 0, 1, 3, 3});
    const std::vector<int32_t> t = {0, 2};
    CHECK(pool_embeddings(emb, t) == std::vector<float>{2, 1.5f});
  }

  TEST_CASE("router learns separable domains and routes deterministically") {
    CorpusConfig cc;
    cc.vocab_size = 64;
    cc.shared_vocab = 16;
    cc.tokens_per_domain = 20000;
    cc.retention_tokens = 1000;
    cc.doc_len = 65;
    auto corpora = generate_corpora(cc);
    ModelConfig mc;
    mc.vocab_size = 64;
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_inter = 16;
    mc.max_seq_len = 64;
    auto model = init_dense<float>(mc, 1);
    const auto before = hash_model(model);
    RouterPlan plan;
    plan.texts_per_domain = 60;
    plan.text_len = 32;
    Rng rng(2, Stream::kRouter);
    auto train = sample_texts(corpora, false, plan.texts_per_domain, plan.text_len, rng);
    auto held = sample_texts(corpora, true, 40, plan.text_len, rng);
    auto r = train_router(model.tok_emb, train, 3, plan);
    const double acc = router_accuracy(r, model.tok_emb, held);
    MESSAGE("held-out router accuracy ", acc);
    CHECK(acc >= 0.9);
    CHECK(route(r, model.tok_emb, held[0].tokens) == route(r, model.tok_emb, held[0].tokens));
    CHECK(hash_model(model) == before);
  }
}

TEST_SUITE("generate") {
  TEST_CASE("zero tokens returns the prompt and overflow is an input error") {
    auto model = init_dense<float>(toy(), 12);
    HardConcreteConfig hc;
    auto b = materialize(model, init_gates(model, 30.0), hc);
    const std::vector<int32_t> prompt = {1, 2, 3};
    CHECK(generate(b, nullptr, prompt, 0) == prompt);
    CHECK_THROWS_AS(generate(b, nullptr, prompt, 14), InputError);
  }

  TEST_CASE("greedy decoding agrees between compact and masked models") {
    Rng rng(13, Stream::kTest);
    auto model = init_dense<float>(toy(), 13);
    HardConcreteConfig hc;
    auto gates = mixed_gates(model, rng);
    auto z = deterministic_gates(gates, hc);
    auto b = materialize(model, gates, hc);
    const std::vector<int32_t> prompt = {5, 6};
    auto a = generate(b, nullptr, prompt, 10);
    auto m = generate(masked_logits_fn(model, &z, nullptr), prompt, 10, 20, 16);
    CHECK(a.size() == 12u);
    CHECK(a == m);
  }
}
