#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "koff/model.hpp"
#include "koff/rng.hpp"

namespace koff {

enum class CorpusStyle { kTopic, kLanguage };

struct CorpusConfig {
  int vocab_size = 512;
  int n_domains = 3;
  int shared_vocab = 128;  // core tokens [0, shared_vocab)
  CorpusStyle style = CorpusStyle::kTopic;
  // Probability mass of domain-specific successors; negative picks the
  // style default (topic 0.45, language 0.8).
  double exclusive_mix = -1.0;
  int successors = 8;  // candidates per successor group
  double order2_strength = 1.0;
  double temperature = 1.0;
  double retention_temperature = 1.6;
  int tokens_per_domain = 200000;
  int retention_tokens = 60000;
  int doc_len = 129;
  uint64_t seed = 1;

  double resolved_exclusive_mix() const;
  int exclusive_per_domain() const;
  void validate() const;
  static CorpusConfig from_config(const Config& c);
};

struct TransitionRow {
  std::vector<int32_t> next;
  std::vector<double> prob;
};

// One order-2 Markov source. Successor candidates of token b come in two
// groups: a shared group over the core vocabulary whose structure is common
// to every domain, and a domain group drawn mostly from this domain's
// exclusive range. The previous-but-one token a perturbs the logits.
struct DomainSpec {
  int domain = 0;  // -1 for the general retention source
  int shared_begin = 0, shared_end = 0;
  int excl_begin = 0, excl_end = 0;
  double exclusive_mix = 0.5;
  double exclusive_pick = 0.7;  // chance a domain-group candidate is exclusive
  int successors = 8;
  double order2_strength = 1.0;
  double temperature = 1.0;
  uint64_t seed = 0;
  uint64_t shared_seed = 0;

  TransitionRow row(int prev2, int prev1) const;
  void validate(int vocab_size) const;
};

std::vector<DomainSpec> make_domain_specs(const CorpusConfig& cfg);
DomainSpec make_retention_spec(const CorpusConfig& cfg);

// Fixed-length documents stored back to back.
struct TokenStream {
  int domain = -1;
  int doc_len = 0;
  std::vector<int32_t> tokens;

  int n_docs() const { return doc_len ? static_cast<int>(tokens.size() / doc_len) : 0; }
  std::span<const int32_t> doc(int i) const {
    return {tokens.data() + static_cast<size_t>(i) * doc_len, static_cast<size_t>(doc_len)};
  }
  bool empty() const { return tokens.empty(); }
};

struct DomainCorpus {
  int domain = 0;
  TokenStream train;
  TokenStream eval;
};

struct CorpusSet {
  int vocab_size = 0;
  int doc_len = 0;
  std::vector<DomainCorpus> domains;
  TokenStream retention_train;
  TokenStream retention_eval;

  int n_domains() const { return static_cast<int>(domains.size()); }
};

std::vector<int32_t> generate_stream(const DomainSpec& spec, int n_docs, int doc_len, Rng& rng);

// 95/5 document split per domain; eval documents never repeat a training
// document (checked by hash).
CorpusSet generate_corpora(const std::vector<DomainSpec>& specs, const DomainSpec& retention,
                           const CorpusConfig& cfg);
CorpusSet generate_corpora(const CorpusConfig& cfg);

std::vector<double> unigram(std::span<const int32_t> tokens, int vocab_size);
// Jensen-Shannon divergence in nats.
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);
uint64_t hash_doc(std::span<const int32_t> doc);

struct TrainBatch {
  TokenBatch input;
  std::vector<int32_t> targets;  // next token per input position
  int domain = -1;
};

// Random windows of seq+1 tokens taken inside single documents.
TrainBatch sample_batch(const TokenStream& stream, int batch, int seq, Rng& rng);

struct CorpusFileHeader {
  int vocab_size = 0;
  int domain = -1;
  int64_t token_count = 0;
  int doc_len = 0;
  std::string split;
};

// One JSON header line, then raw little-endian int32 token ids.
void write_corpus_file(const std::filesystem::path& path, const CorpusFileHeader& header,
                       std::span<const int32_t> tokens);
TokenStream read_corpus_file(const std::filesystem::path& path, CorpusFileHeader* header = nullptr);

// Writes <dir>/domain<d>.{train,eval}.tok and retention.{train,eval}.tok;
// returns the written paths.
std::vector<std::filesystem::path> save_corpus_set(const std::filesystem::path& dir, const CorpusSet& set);
CorpusSet load_corpus_set(const std::filesystem::path& dir);

}  // namespace koff
