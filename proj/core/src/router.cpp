#include "koff/router.hpp"

#include <algorithm>
#include <cmath>

#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/ops.hpp"
#include "koff/optim.hpp"

namespace koff {

RouterPlan RouterPlan::from_config(const Config& c) {
  RouterPlan p;
  p.epochs = static_cast<int>(c.get_int("router_epochs", p.epochs));
  p.texts_per_domain = static_cast<int>(c.get_int("router_texts_per_domain", p.texts_per_domain));
  p.text_len = static_cast<int>(c.get_int("router_text_len", p.text_len));
  p.lr = c.get_double("router_lr", p.lr);
  p.weight_decay = c.get_double("router_weight_decay", p.weight_decay);
  p.seed = static_cast<uint64_t>(c.get_int("seed", static_cast<long long>(p.seed)));
  if (p.epochs < 0 || p.texts_per_domain < 1 || p.text_len < 1 || !(p.lr > 0))
    throw ConfigError("router plan needs epochs >= 0, texts_per_domain, text_len >= 1 and lr > 0");
  return p;
}

std::vector<float> pool_embeddings(const Tensor<float>& tok_emb, std::span<const int32_t> tokens) {
  if (tokens.empty()) throw InputError("cannot route an empty input");
  const int64_t v = tok_emb.dim(0), d = tok_emb.dim(1);
  std::vector<double> acc(static_cast<size_t>(d), 0.0);
  for (int32_t t : tokens) {
    if (t < 0 || t >= v) throw InputError("token id " + std::to_string(t) + " outside vocabulary");
    for (int64_t j = 0; j < d; ++j) acc[j] += tok_emb.at(int64_t(t) * d + j);
  }
  std::vector<float> out(acc.size());
  for (size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<float>(acc[j] / tokens.size());
  return out;
}

std::vector<float> router_logits(const Router& r, const Tensor<float>& tok_emb, std::span<const int32_t> tokens) {
  auto x = pool_embeddings(tok_emb, tokens);
  const int n = r.n_domains();
  const int64_t d = static_cast<int64_t>(x.size());
  std::vector<float> out(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    double s = r.b.at(k);
    for (int64_t j = 0; j < d; ++j) s += double(r.w.at(k * d + j)) * x[j];
    out[k] = static_cast<float>(s);
  }
  return out;
}

int route(const Router& r, const Tensor<float>& tok_emb, std::span<const int32_t> tokens) {
  auto logits = router_logits(r, tok_emb, tokens);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<LabelledText> sample_texts(const CorpusSet& set, bool eval_split, int per_domain, int text_len,
                                       Rng& rng) {
  std::vector<LabelledText> out;
  for (const auto& d : set.domains) {
    const auto& s = eval_split ? d.eval : d.train;
    if (s.empty()) throw InputError("domain " + std::to_string(d.domain) + " has no text to sample");
    const int len = std::min(text_len, s.doc_len);
    for (int i = 0; i < per_domain; ++i) {
      auto doc = s.doc(static_cast<int>(rng.below(static_cast<uint64_t>(s.n_docs()))));
      const int off = static_cast<int>(rng.below(static_cast<uint64_t>(s.doc_len - len + 1)));
      out.push_back({std::vector<int32_t>(doc.begin() + off, doc.begin() + off + len), d.domain});
    }
  }
  return out;
}

Router train_router(const Tensor<float>& tok_emb, const std::vector<LabelledText>& data, int n_domains,
                    const RouterPlan& plan) {
  if (data.empty()) throw InputError("router training needs labelled texts");
  if (n_domains < 1) throw ConfigError("router needs at least one domain");
  const int64_t d = tok_emb.dim(1), n = static_cast<int64_t>(data.size());
  std::vector<float> feats;
  std::vector<int32_t> labels;
  for (const auto& t : data) {
    if (t.domain < 0 || t.domain >= n_domains) throw InputError("label outside [0, n_domains)");
    auto x = pool_embeddings(tok_emb, t.tokens);
    feats.insert(feats.end(), x.begin(), x.end());
    labels.push_back(t.domain);
  }
  // Standardize features so one learning rate fits any embedding scale.
  std::vector<double> mu(static_cast<size_t>(d), 0.0), sd(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mu[j] += feats[i * d + j];
  for (auto& m : mu) m /= n;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) sd[j] += (feats[i * d + j] - mu[j]) * (feats[i * d + j] - mu[j]);
  for (auto& s : sd) s = std::sqrt(s / n) + 1e-8;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) feats[i * d + j] = static_cast<float>((feats[i * d + j] - mu[j]) / sd[j]);

  auto x = Tensor<float>::from({n, d}, feats);
  auto w = Tensor<float>::zeros({n_domains, d});
  auto b = Tensor<float>::zeros({n_domains});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW opt({w, b}, {plan.lr, 0.9, 0.999, 1e-8, plan.weight_decay});
  for (int e = 0; e < plan.epochs; ++e) {
    auto loss = cross_entropy(add_row(linear(x, w), b), labels);
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
  // Fold the standardization into the linear map.
  Router r;
  std::vector<float> wf(static_cast<size_t>(n_domains * d));
  std::vector<float> bf(static_cast<size_t>(n_domains));
  for (int k = 0; k < n_domains; ++k) {
    double bias = b.at(k);
    for (int64_t j = 0; j < d; ++j) {
      const double wj = w.at(k * d + j) / sd[j];
      wf[k * d + j] = static_cast<float>(wj);
      bias -= wj * mu[j];
    }
    bf[k] = static_cast<float>(bias);
  }
  r.w = Tensor<float>::from({n_domains, d}, std::move(wf));
  r.b = Tensor<float>::from({n_domains}, std::move(bf));
  return r;
}

double router_accuracy(const Router& r, const Tensor<float>& tok_emb, const std::vector<LabelledText>& data) {
  if (data.empty()) throw InputError("router accuracy over an empty set");
  int correct = 0;
  for (const auto& t : data) correct += route(r, tok_emb, t.tokens) == t.domain;
  return static_cast<double>(correct) / data.size();
}

void save_router(Checkpoint& ck, const Router& r) {
  ck.put("router/W", r.w);
  ck.put("router/b", r.b);
}

Router load_router(const Checkpoint& ck) {
  if (!ck.contains("router/W")) throw MissingDependency("router", "train-router");
  return {ck.get("router/W"), ck.get("router/b")};
}

}  // namespace koff
