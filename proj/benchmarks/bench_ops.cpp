#include <benchmark/benchmark.h>

#include "koff/gates.hpp"
#include "koff/materialize.hpp"
#include "koff/memory.hpp"
#include "koff/model.hpp"
#include "koff/ops.hpp"
#include "koff/rng.hpp"

namespace {

koff::Tensor<float> randn(koff::Shape shape, uint64_t seed) {
  koff::Rng rng(seed, koff::Stream::kTest);
  std::vector<float> v(static_cast<size_t>(koff::numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return koff::Tensor<float>::from(std::move(shape), std::move(v));
}

koff::ModelConfig desk_model() {
  koff::ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_inter = 256;
  c.max_seq_len = 128;
  return c;
}

koff::TokenBatch batch_of(int b, int s) {
  koff::TokenBatch t{b, s, {}};
  for (int i = 0; i < b * s; ++i) t.ids.push_back(i % 256);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  auto a = randn({n, n}, 1), b = randn({n, n}, 2);
  koff::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(koff::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const int seq = static_cast<int>(state.range(0));
  const koff::AttentionShape s{8, seq, 2};
  auto q = randn({8 * seq, 64}, 1), k = randn({8 * seq, 64}, 2), v = randn({8 * seq, 64}, 3);
  auto mk = randn({16, 64}, 4), mv = randn({16, 64}, 5);
  koff::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(koff::attention(q, k, v, mk, mv, s));
}
BENCHMARK(BM_Attention)->Arg(32)->Arg(64);

void BM_DenseForward(benchmark::State& state) {
  auto m = koff::init_dense<float>(desk_model(), 1);
  auto b = batch_of(8, 32);
  koff::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(koff::forward_dense(m, b));
}
BENCHMARK(BM_DenseForward);

void BM_OffloadTrainStepGraph(benchmark::State& state) {
  auto m = koff::init_dense<float>(desk_model(), 1);
  auto gates = koff::init_gates(m, 1.5);
  for (auto& t : gates.parameters()) t.set_requires_grad(true);
  koff::MemoryConfig mc;
  auto mod = koff::init_module<float>(m.config, mc, 0, 1);
  koff::set_requires_grad(mod, true);
  koff::HardConcreteConfig hc;
  koff::Rng rng(1, koff::Stream::kGateNoise);
  auto b = batch_of(8, 32);
  for (auto _ : state) {
    auto noise = koff::draw_gate_noise(gates, rng);
    auto z = koff::sample_gates(gates, hc, noise);
    auto loss = koff::mean(koff::forward_offloaded(m, z, mod, b));
    koff::backward(loss);
  }
}
BENCHMARK(BM_OffloadTrainStepGraph);

void BM_CompactForward(benchmark::State& state) {
  auto m = koff::init_dense<float>(desk_model(), 1);
  auto gates = koff::init_gates(m, 3.0);
  koff::Rng rng(2, koff::Stream::kTest);
  for (auto& [s, t] : gates.log_alpha)
    for (size_t i = 1; i < t.mutable_data().size(); ++i)
      if (rng.uniform() < 0.3) t.mutable_data()[i] = -10.0f;
  koff::HardConcreteConfig hc;
  auto backbone = koff::materialize(m, gates, hc);
  auto b = batch_of(8, 32);
  for (auto _ : state) benchmark::DoNotOptimize(koff::compact_logits(backbone, nullptr, b));
}
BENCHMARK(BM_CompactForward);

}  // namespace

BENCHMARK_MAIN();
