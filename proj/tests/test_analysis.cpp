#include <cmath>
#include <numeric>

#include "doctest.h"
#include "koff/analysis.hpp"
#include "koff/corpus.hpp"
#include "koff/errors.hpp"
#include "koff/gates.hpp"
#include "koff/materialize.hpp"
#include "test_util.hpp"

using namespace koff;

namespace {

Embeddings random_embeddings(int n, int d, Rng& rng) {
  Embeddings e{n, d, std::vector<double>(static_cast<size_t>(n) * d)};
  for (auto& v : e.data) v = rng.normal();
  return e;
}

// Random orthogonal d x d matrix by Gram-Schmidt on Gaussian columns.
std::vector<double> random_orthogonal(int d, Rng& rng) {
  std::vector<double> q(static_cast<size_t>(d) * d);
  for (auto& v : q) v = rng.normal();
  for (int c = 0; c < d; ++c) {
    for (int p = 0; p < c; ++p) {
      double dot = 0;
      for (int r = 0; r < d; ++r) dot += q[r * d + c] * q[r * d + p];
      for (int r = 0; r < d; ++r) q[r * d + c] -= dot * q[r * d + p];
    }
    double n = 0;
    for (int r = 0; r < d; ++r) n += q[r * d + c] * q[r * d + c];
    n = std::sqrt(n);
    for (int r = 0; r < d; ++r) q[r * d + c] /= n;
  }
  return q;
}

Embeddings times(const Embeddings& x, const std::vector<double>& q) {
  Embeddings y{x.n, x.d, std::vector<double>(x.data.size(), 0.0)};
  for (int i = 0; i < x.n; ++i)
    for (int j = 0; j < x.d; ++j)
      for (int k = 0; k < x.d; ++k) y.data[i * x.d + j] += x.row(i)[k] * q[k * x.d + j];
  return y;
}

// CKA written directly from centered Gram matrices:
// HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with K = Xc Xc^T.
double cka_oracle(const Embeddings& x, const Embeddings& y) {
  auto centered_gram = [](const Embeddings& e) {
    std::vector<double> mu(e.d, 0.0);
    for (int i = 0; i < e.n; ++i)
      for (int j = 0; j < e.d; ++j) mu[j] += e.row(i)[j] / e.n;
    std::vector<double> g(static_cast<size_t>(e.n) * e.n, 0.0);
    for (int a = 0; a < e.n; ++a)
      for (int b = 0; b < e.n; ++b)
        for (int j = 0; j < e.d; ++j) g[a * e.n + b] += (e.row(a)[j] - mu[j]) * (e.row(b)[j] - mu[j]);
    return g;
  };
  auto k = centered_gram(x), l = centered_gram(y);
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  return dot(k, l) / std::sqrt(dot(k, k) * dot(l, l));
}

ModelConfig toy_model(int vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_inter = 16;
  c.max_seq_len = 32;
  return c;
}

CorpusSet toy_corpora(int n_domains = 3) {
  CorpusConfig cc;
  cc.vocab_size = 40;
  cc.shared_vocab = 10;
  cc.n_domains = n_domains;
  cc.tokens_per_domain = 3000;
  cc.retention_tokens = 500;
  cc.doc_len = 25;
  return generate_corpora(cc);
}

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("uniform logits give perplexity V") {
    auto corpora = toy_corpora();
    LogitFn uniform = [](const TokenBatch& b) { return std::vector<float>(size_t(b.batch) * b.seq * 40, 0.0f); };
    EvalOptions opt;
    opt.seq_len = 7;
    CHECK(perplexity(uniform, corpora.domains[0].eval, 40, opt) == doctest::Approx(40.0).epsilon(1e-9));
    CHECK_THROWS_AS(perplexity(uniform, TokenStream{}, 40, opt), InputError);
  }

  TEST_CASE("perplexity matches a per-document oracle") {
    auto corpora = toy_corpora();
    auto model = init_dense<float>(toy_model(40), 1);
    auto md = cast_model<double>(model);
    const auto& slice = corpora.domains[1].eval;
    double nll = 0;
    int64_t n = 0;
    for (int d = 0; d < slice.n_docs(); ++d) {
      auto doc = slice.doc(d);
      std::vector<int32_t> in(doc.begin(), doc.end() - 1);
      auto ls = log_softmax_lastdim(forward_dense(md, TokenBatch{1, int(in.size()), in}));
      for (size_t t = 0; t < in.size(); ++t) nll -= ls.at(int64_t(t) * 40 + doc[t + 1]);
      n += static_cast<int64_t>(in.size());
    }
    EvalOptions opt;
    opt.seq_len = 24;  // one chunk per document
    CHECK(perplexity(dense_logits_fn(model), slice, 40, opt) == doctest::Approx(std::exp(nll / n)).epsilon(1e-5));
    // Shorter chunks see less context but score the same positions.
    opt.seq_len = 5;
    auto s = nll_sum(dense_logits_fn(model), slice, 40, opt);
    CHECK(s.count == n);
  }

  TEST_CASE("CKA identities and invariances") {
    Rng rng(2, Stream::kTest);
    auto x = random_embeddings(60, 6, rng);
    CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(knn_overlap(x, x, 5) == 1.0);
    std::vector<int> labels(60);
    for (int i = 0; i < 60; ++i) labels[i] = i % 3;
    CHECK(centroid_cosine(x, x, labels) == doctest::Approx(1.0).epsilon(1e-12));

    auto rotated = times(x, random_orthogonal(6, rng));
    CHECK(std::abs(linear_cka(x, rotated) - 1.0) < 1e-6);
    auto scaled = x;
    for (auto& v : scaled.data) v *= 3.7;
    CHECK(std::abs(linear_cka(x, scaled) - 1.0) < 1e-6);
    auto y = random_embeddings(60, 6, rng);
    CHECK(std::abs(linear_cka(rotated, scaled) - linear_cka(x, x)) < 1e-6);
    CHECK(std::abs(linear_cka(times(y, random_orthogonal(6, rng)), x) - linear_cka(y, x)) < 1e-6);
  }

  TEST_CASE("CKA matches the centered-Gram oracle") {
    Rng rng(3, Stream::kTest);
    auto x = random_embeddings(30, 5, rng), y = random_embeddings(30, 7, rng);
    for (int i = 0; i < 30; ++i) y.data[i * 7] += 2 * x.row(i)[0];
    const double got = linear_cka(x, y);
    CHECK(got == doctest::Approx(cka_oracle(x, y)).epsilon(1e-10));
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }

  TEST_CASE("independent Gaussian sets have low CKA") {
    Rng rng(4, Stream::kTest);
    auto x = random_embeddings(400, 8, rng), y = random_embeddings(400, 8, rng);
    const double c = linear_cka(x, y);
    MESSAGE("independent CKA ", c);
    CHECK(c < 0.5);
  }

  TEST_CASE("probe input errors") {
    Rng rng(5, Stream::kTest);
    auto x = random_embeddings(5, 3, rng);
    CHECK_THROWS_AS(knn_overlap(x, x, 5), InputError);
    CHECK_THROWS_AS(linear_cka(x, random_embeddings(6, 3, rng)), DimensionError);
  }

  TEST_CASE("backbone probes of an unpruned backbone are perfect") {
    auto corpora = toy_corpora();
    auto model = init_dense<float>(toy_model(40), 6);
    HardConcreteConfig hc;
    auto b = materialize(model, init_gates(model, 30.0), hc);
    Rng rng(6, Stream::kTest);
    auto texts = sample_texts(corpora, true, 8, 16, rng);
    auto r = backbone_probes(model, b, texts, 5);
    CHECK(r.cka == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(r.knn_overlap == 1.0);
    CHECK(r.centroid_cos == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(backbone_probes(model, b, std::vector<LabelledText>(texts.begin(), texts.begin() + 5), 5),
                    InputError);
  }

  TEST_CASE("swap matrix with identical modules has equal columns") {
    auto corpora = toy_corpora();
    auto model = init_dense<float>(toy_model(40), 7);
    Rng rng(7, Stream::kTest);
    auto gates = init_gates(model, 10.0);
    for (auto& [s, t] : gates.log_alpha) t.mutable_data()[1] = -10.0f;
    HardConcreteConfig hc;
    auto b = materialize(model, gates, hc);
    MemoryConfig mc;
    mc.kv_init_std = 0.3;
    auto mod = init_module<float>(model.config, mc, 0, 1);
    for (auto& [s, p] : mod.lora)
      for (auto& v : p.b.mutable_data()) v = float(0.1 * rng.normal());
    auto cm = compact_module(mod, b);
    EvalOptions opt;
    opt.seq_len = 12;
    opt.max_chunks = 20;
    auto m = swap_matrix(b, {cm, cm, cm}, corpora, opt);
    REQUIRE(m.size() == 3u);
    for (const auto& row : m) {
      REQUIRE(row.size() == 3u);
      CHECK(std::abs(row[1] - row[0]) <= 1e-6 * row[0]);
      CHECK(std::abs(row[2] - row[0]) <= 1e-6 * row[0]);
    }
    auto one = toy_corpora(1);
    CHECK(swap_matrix(b, {cm}, one, opt).size() == 1u);
    CHECK_THROWS_AS(swap_matrix(b, {cm}, corpora, opt), ConfigError);
  }

  TEST_CASE("layer profile of saturated gates is all zeros") {
    auto model = init_dense<float>(toy_model(40), 8);
    HardConcreteConfig hc;
    auto rows = layer_sparsity_profile(init_gates(model, 30.0), hc);
    CHECK(rows.size() == 10u);
    for (const auto& r : rows) CHECK(r.sparsity == 0.0);
    auto g = init_gates(model, 30.0);
    for (int i = 0; i < 4; ++i) g.log_alpha[{1, Proj::kUp}].mutable_data()[i] = -30.0f;
    for (const auto& r : layer_sparsity_profile(g, hc))
      if (r.site == SiteId{1, Proj::kUp}) CHECK(r.sparsity == doctest::Approx(0.25));
  }

  TEST_CASE("LAPE: a neuron firing in one domain is one-hot with zero entropy") {
    CorpusConfig cc;
    cc.vocab_size = 32;
    cc.shared_vocab = 8;
    cc.n_domains = 2;
    cc.tokens_per_domain = 2000;
    cc.retention_tokens = 200;
    cc.doc_len = 33;
    auto corpora = generate_corpora(cc);
    auto spec = make_domain_specs(cc)[0];
    ModelConfig c;
    c.vocab_size = 32;
    c.d_model = 32;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_inter = 4;
    c.max_seq_len = 32;
    auto m = init_dense<float>(c, 1);
    // Residual stream equals the one-hot token embedding at the MLP input.
    m.tok_emb = Tensor<float>::zeros({32, 32});
    for (int i = 0; i < 32; ++i) m.tok_emb.mutable_data()[i * 32 + i] = 1.0f;
    m.pos_emb = Tensor<float>::zeros({32, 32});
    m.layers[0].wo = Tensor<float>::zeros({32, 32});
    auto& wg = m.layers[0].w_gate;
    wg = Tensor<float>::zeros({4, 32});
    for (int t = 0; t < 32; ++t) {
      wg.mutable_data()[t] = (t >= spec.excl_begin && t < spec.excl_end) ? 1.0f : -1.0f;
      wg.mutable_data()[32 + t] = 1.0f;
    }
    LapeOptions opt;
    opt.windows_per_domain = 20;
    opt.seq_len = 16;
    auto p = lape_profile(m, corpora, opt);
    CHECK(p.prob[0 * 2 + 0] > 0.0);
    CHECK(p.prob[0 * 2 + 1] == 0.0);
    CHECK(p.entropy[0] == 0.0);
    CHECK(p.entropy[1] == doctest::Approx(std::log(2.0)));
    CHECK(p.n_excluded == 2);

    HardConcreteConfig hc;
    auto gates = init_gates(m, 30.0);
    gates.log_alpha[{0, Proj::kGate}].mutable_data()[0] = -30.0f;
    auto r = lape_crossref(p, gates, hc, 0.5);
    CHECK(r.n_specific == 1);
    CHECK(r.specific[0] == 1);
    CHECK(r.general[1] == 1);
    REQUIRE(r.rows.size() == 3u);
    CHECK(r.rows[0].proj == "gate");
    CHECK(r.rows[0].p_pruned_specific == 1.0);
    CHECK(r.rows[0].p_pruned_general == 0.0);
    CHECK(r.rows[0].sparsity == doctest::Approx(0.25));
    CHECK(r.rows[2].sparsity == doctest::Approx(0.25));
  }

  TEST_CASE("LAPE refuses a single domain") {
    auto corpora = toy_corpora(1);
    auto model = init_dense<float>(toy_model(40), 9);
    CHECK_THROWS_AS(lape_profile(model, corpora, LapeOptions{}), InputError);
    LapeProfile p;
    p.n_domains = 1;
    HardConcreteConfig hc;
    CHECK_THROWS_AS(lape_crossref(p, init_gates(model, 1.0), hc, 0.15), InputError);
  }

  TEST_CASE("CSV formatting") {
    CHECK(fmt(0.5) == "0.5");
    CHECK(fmt(1.0 / 3) == "0.3333333333");
  }
}
