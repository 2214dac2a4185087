#pragma once

#include <span>
#include <vector>

#include "koff/corpus.hpp"
#include "koff/model.hpp"

namespace koff {

class Checkpoint;

struct RouterPlan {
  int epochs = 300;  // full-batch passes
  int texts_per_domain = 200;
  int text_len = 64;
  double lr = 0.05;
  double weight_decay = 1e-4;
  uint64_t seed = 1;

  static RouterPlan from_config(const Config& c);
};

// Mean of frozen token embeddings followed by a linear map to domain logits.
struct Router {
  Tensor<float> w;  // [n_domains, d_model]
  Tensor<float> b;  // [n_domains]
  int n_domains() const { return static_cast<int>(w.dim(0)); }
};

std::vector<float> pool_embeddings(const Tensor<float>& tok_emb, std::span<const int32_t> tokens);
std::vector<float> router_logits(const Router& r, const Tensor<float>& tok_emb, std::span<const int32_t> tokens);

// Argmax domain with lowest-index tie-break. Input error on empty tokens.
int route(const Router& r, const Tensor<float>& tok_emb, std::span<const int32_t> tokens);

struct LabelledText {
  std::vector<int32_t> tokens;
  int domain = 0;
};

// Random windows of text_len tokens per domain from the given split.
std::vector<LabelledText> sample_texts(const CorpusSet& set, bool eval_split, int per_domain, int text_len, Rng& rng);

Router train_router(const Tensor<float>& tok_emb, const std::vector<LabelledText>& data, int n_domains,
                    const RouterPlan& plan);
double router_accuracy(const Router& r, const Tensor<float>& tok_emb, const std::vector<LabelledText>& data);

void save_router(Checkpoint& ck, const Router& r);
Router load_router(const Checkpoint& ck);

}  // namespace koff
