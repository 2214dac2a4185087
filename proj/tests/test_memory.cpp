#include <cmath>

#include "doctest.h"
#include "koff/errors.hpp"
#include "koff/gates.hpp"
#include "koff/memory.hpp"
#include "koff/model.hpp"
#include "koff/ops.hpp"
#include "test_util.hpp"

using namespace koff;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_inter = 16;
  c.max_seq_len = 16;
  return c;
}

}  // namespace

TEST_SUITE("memory") {
  TEST_CASE("masked adapted linear hand example") {
    auto x = Tensor<double>::from({1, 2}, {2, 3});
    auto w = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    LoraPair<double> lora{Tensor<double>::from({1, 2}, {1, 1}), Tensor<double>::from({2, 1}, {1, 0}), 1.0};
    auto gate = Tensor<double>::from({2}, {1, 0});
    CHECK(masked_adapted_linear(x, w, &lora, &gate).values() == std::vector<double>{7, 0});
    auto open = Tensor<double>::from({2}, {1, 1});
    CHECK(masked_adapted_linear(x, w, &lora, &open).values() == std::vector<double>{7, 3});
    CHECK(masked_adapted_linear<double>(x, w, nullptr, &gate).values() == std::vector<double>{2, 0});
  }

  TEST_CASE("zero gate zeroes the output for any LoRA and input") {
    Rng rng(1, Stream::kTest);
    auto x = koff::test::randn({4, 6}, rng), w = koff::test::randn({5, 6}, rng);
    LoraPair<double> lora{koff::test::randn({2, 6}, rng), koff::test::randn({5, 2}, rng), 3.0};
    auto gate = Tensor<double>::from({5}, {1, 0, 0.5, 0, 1});
    auto y = masked_adapted_linear(x, w, &lora, &gate);
    for (int r = 0; r < 4; ++r) {
      CHECK(y.at(r * 5 + 1) == 0.0);
      CHECK(y.at(r * 5 + 3) == 0.0);
    }
  }

  TEST_CASE("fresh LoRA is an identity delta") {
    Rng rng(2, Stream::kTest);
    auto x = koff::test::randn({3, 4}, rng), w = koff::test::randn({2, 4}, rng);
    LoraPair<double> lora{koff::test::randn({2, 4}, rng), Tensor<double>::zeros({2, 2}), 2.0};
    CHECK(masked_adapted_linear<double>(x, w, &lora, nullptr).values() == linear(x, w).values());
  }

  TEST_CASE("LoRA shape mismatch is a config error") {
    auto x = Tensor<double>::zeros({1, 2});
    auto w = Tensor<double>::zeros({2, 2});
    LoraPair<double> bad{Tensor<double>::zeros({1, 3}), Tensor<double>::zeros({2, 1}), 1.0};
    CHECK_THROWS_AS(masked_adapted_linear<double>(x, w, &bad, nullptr), ConfigError);
  }

  TEST_CASE("V gate zero on a channel removes it from the attention output") {
    Rng rng(3, Stream::kTest);
    const AttentionShape s{1, 3, 1};
    auto h = koff::test::randn({3, 4}, rng);
    auto wk = koff::test::randn({4, 4}, rng), wv = koff::test::randn({4, 4}, rng), q = koff::test::randn({3, 4}, rng);
    MemoryModule<double> m;
    m.first_layer = 0;
    m.n_kv = 2;
    m.mem_k[0] = koff::test::randn({2, 4}, rng);
    m.mem_v[0] = Tensor<double>::full({2, 4}, 1.0);
    auto kgate = Tensor<double>::full({4}, 1.0);
    auto vgate = Tensor<double>::from({4}, {1, 1, 0, 1});
    auto k = masked_adapted_linear<double>(h, wk, nullptr, &kgate);
    auto v = masked_adapted_linear<double>(h, wv, nullptr, &vgate);
    auto [mk, mv] = inject_memory(m, 0, &kgate, &vgate, true);
    auto out = attention(q, k, v, mk, mv, s);
    for (int t = 0; t < 3; ++t) {
      CHECK(out.at(t * 4 + 2) == 0.0);
      CHECK(out.at(t * 4 + 0) != 0.0);
    }
    // Unmasked memory leaks the pruned channel back in.
    auto [uk, uv] = inject_memory(m, 0, &kgate, &vgate, false);
    auto leak = attention(q, k, v, uk, uv, s);
    CHECK(leak.at(2) != 0.0);
  }

  TEST_CASE("init statistics and determinism") {
    ModelConfig c = small_model();
    c.d_model = 64;
    c.n_heads = 4;
    MemoryConfig mc;
    mc.first_layer = 0;
    mc.n_kv = 800;
    auto a = init_module<float>(c, mc, 0, 11);
    auto b = init_module<float>(c, mc, 0, 11);
    CHECK(hash_module(a) == hash_module(b));
    CHECK(hash_module(a) != hash_module(init_module<float>(c, mc, 1, 11)));
    double s = 0, s2 = 0;
    int64_t n = 0;
    for (const auto& t : a.kv_parameters())
      for (float v : t.values()) {
        s += v;
        s2 += double(v) * v;
        ++n;
      }
    REQUIRE(n >= 100000);
    const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::abs(sd - 0.02) < 1e-3);
    for (const auto& [site, p] : a.lora) {
      for (float v : p.b.values()) REQUIRE(v == 0.0f);
      CHECK(p.scale == doctest::Approx(16.0 / 8));
    }
  }

  TEST_CASE("default module covers the five sites of the upper half") {
    ModelConfig c = small_model();
    c.n_layers = 4;
    auto m = init_module<float>(c, MemoryConfig{}, 0, 1);
    CHECK(m.first_layer == 2);
    CHECK(m.lora.size() == 2u * 5u);
    for (const auto& [site, p] : m.lora) CHECK(site.layer >= 2);
    CHECK(m.mem_k.size() == 2u);
    CHECK(m.mem_k.at(2).shape() == Shape{16, 8});
  }

  TEST_CASE("attaching a module leaves backbone and gates untouched") {
    auto model = init_dense<float>(small_model(), 1);
    auto gates = init_gates(model, 1.0);
    const auto hm = hash_model(model), hg = hash_gates(gates);
    MemoryConfig mc;
    mc.first_layer = 0;
    auto mod = init_module<float>(model.config, mc, 0, 3);
    for (auto& [s, p] : mod.lora)
      for (auto& v : p.b.mutable_data()) v = 0.1f;
    HardConcreteConfig hc;
    auto z = deterministic_gates(gates, hc);
    forward_offloaded(model, z, mod, TokenBatch{1, 4, {1, 2, 3, 4}});
    CHECK(hash_model(model) == hm);
    CHECK(hash_gates(gates) == hg);
  }

  TEST_CASE("KV head layout round-trips") {
    std::vector<float> slots(3 * 2 * 4);
    for (size_t i = 0; i < slots.size(); ++i) slots[i] = float(i);
    auto heads = kv_to_heads(slots, 3, 2, 4);
    // Head 1, slot 2, dim 0 sits at slot-major offset 2*8 + 4.
    CHECK(heads[(1 * 3 + 2) * 4] == slots[2 * 8 + 4]);
    CHECK(kv_from_heads(heads, 3, 2, 4) == slots);
  }

  TEST_CASE("negative n_kv is rejected") {
    MemoryConfig mc;
    mc.n_kv = -1;
    CHECK_THROWS_AS(mc.validate(small_model()), ConfigError);
  }
}
