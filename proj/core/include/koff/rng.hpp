#pragma once

#include <cstdint>
#include <vector>

namespace koff {

// Named random consumers. Each gets an independent counter-based stream, so
// adding a new consumer never shifts the samples another one sees.
enum class Stream : uint64_t {
  kModelInit = 1,
  kGateInit = 2,
  kModuleInit = 3,
  kGateNoise = 4,
  kBatches = 5,
  kRetention = 6,
  kCorpus = 7,
  kRouter = 8,
  kEval = 9,
  kTest = 99,
};

// Counter-based generator: sample i of stream (seed, id) is a pure function
// of (seed, id, i). SplitMix64 finalizer over a Weyl sequence.
class Rng {
 public:
  Rng(uint64_t seed, uint64_t stream_id) : key_(mix(seed ^ mix(stream_id + 0x9E3779B97F4A7C15ULL))) {}
  Rng(uint64_t seed, Stream stream) : Rng(seed, static_cast<uint64_t>(stream)) {}

  uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }
  // Open interval (0, 1); never returns 0 or 1.
  double uniform();
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n);

  // Derives an independent child stream, e.g. one per domain.
  Rng fork(uint64_t salt) const { return Rng(key_, salt); }

  uint64_t counter() const { return counter_; }

  static uint64_t mix(uint64_t z);

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::vector<double> uniform_vector(Rng& rng, size_t n);

}  // namespace koff
