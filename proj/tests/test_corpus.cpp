#include <filesystem>
#include <set>

#include "doctest.h"
#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/corpus.hpp"
#include "koff/errors.hpp"
#include "koff/gates.hpp"
#include "koff/memory.hpp"
#include "test_util.hpp"

using namespace koff;

namespace {

CorpusConfig small(CorpusStyle style = CorpusStyle::kTopic) {
  CorpusConfig cc;
  cc.vocab_size = 128;
  cc.shared_vocab = 32;
  cc.style = style;
  cc.tokens_per_domain = 20000;
  cc.retention_tokens = 4000;
  cc.doc_len = 65;
  return cc;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("koff_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("domains are separated in unigram space") {
    for (auto style : {CorpusStyle::kTopic, CorpusStyle::kLanguage}) {
      auto set = generate_corpora(small(style));
      REQUIRE(set.n_domains() == 3);
      for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
          const double js = js_divergence(unigram(set.domains[a].train.tokens, 128),
                                          unigram(set.domains[b].train.tokens, 128));
          CHECK(js > 0.1);
        }
    }
  }

  TEST_CASE("JS divergence reference values") {
    const std::vector<double> p = {1, 0}, q = {0, 1}, u = {0.5, 0.5};
    CHECK(js_divergence(p, p) == 0.0);
    CHECK(js_divergence(p, q) == doctest::Approx(std::log(2.0)));
    // 0.5 * KL(p || m) with m = (0.75, 0.25), plus 0.5 * KL(u || m).
    const double expect = 0.5 * std::log(1 / 0.75) + 0.5 * (0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25));
    CHECK(js_divergence(p, u) == doctest::Approx(expect));
  }

  TEST_CASE("generation is deterministic per seed") {
    auto a = generate_corpora(small()), b = generate_corpora(small());
    auto c_cfg = small();
    c_cfg.seed = 2;
    auto c = generate_corpora(c_cfg);
    CHECK(a.domains[1].train.tokens == b.domains[1].train.tokens);
    CHECK(a.retention_eval.tokens == b.retention_eval.tokens);
    CHECK(a.domains[1].train.tokens != c.domains[1].train.tokens);
  }

  TEST_CASE("evaluation documents never repeat training documents") {
    auto set = generate_corpora(small());
    for (const auto& d : set.domains) {
      std::set<uint64_t> train;
      for (int i = 0; i < d.train.n_docs(); ++i) train.insert(hash_doc(d.train.doc(i)));
      REQUIRE(d.eval.n_docs() > 0);
      for (int i = 0; i < d.eval.n_docs(); ++i) CHECK(train.count(hash_doc(d.eval.doc(i))) == 0);
      // Roughly a 95/5 split.
      CHECK(d.eval.n_docs() * 10 < d.train.n_docs());
    }
  }

  TEST_CASE("transition rows are distributions over valid tokens") {
    auto specs = make_domain_specs(small());
    for (const auto& s : specs)
      for (int a : {0, 5, 40}) {
        auto row = s.row(a, 3);
        double total = 0;
        for (size_t i = 0; i < row.next.size(); ++i) {
          CHECK(row.next[i] >= 0);
          CHECK(row.next[i] < 128);
          total += row.prob[i];
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
      }
  }

  TEST_CASE("empty corpus and bad sizes are config errors") {
    auto cc = small();
    cc.tokens_per_domain = 0;
    CHECK_THROWS_AS(generate_corpora(cc), ConfigError);
    cc = small();
    cc.shared_vocab = 1;
    CHECK_THROWS_AS(generate_corpora(cc), ConfigError);
    cc = small();
    cc.vocab_size = 33;  // no room for exclusive ranges
    CHECK_THROWS_AS(generate_corpora(cc), ConfigError);
  }

  TEST_CASE("batches are windows inside documents with shifted targets") {
    auto set = generate_corpora(small());
    Rng rng(1, Stream::kBatches);
    auto b = sample_batch(set.domains[2].train, 4, 16, rng);
    CHECK(b.domain == 2);
    REQUIRE(b.input.ids.size() == 64u);
    for (int r = 0; r < 4; ++r)
      for (int t = 0; t + 1 < 16; ++t) CHECK(b.targets[r * 16 + t] == b.input.ids[r * 16 + t + 1]);
    CHECK_THROWS_AS(sample_batch(set.domains[2].train, 1, 65, rng), ConfigError);
  }

  TEST_CASE("corpus files round-trip") {
    auto dir = scratch_dir("corpus");
    auto set = generate_corpora(small());
    save_corpus_set(dir, set);
    auto back = load_corpus_set(dir);
    CHECK(back.n_domains() == 3);
    CHECK(back.domains[0].eval.tokens == set.domains[0].eval.tokens);
    CHECK(back.retention_train.tokens == set.retention_train.tokens);
    std::filesystem::remove_all(dir);
  }
}

TEST_SUITE("io") {
  TEST_CASE("checkpoint round-trip preserves model, gates and modules bitwise") {
    auto dir = scratch_dir("ckpt");
    ModelConfig c;
    c.vocab_size = 16;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_inter = 8;
    c.max_seq_len = 8;
    auto model = init_dense<float>(c, 3);
    auto gates = init_gates(model, 0.7);
    gates.log_alpha[{1, Proj::kDown}].mutable_data()[2] = -4.25f;
    auto mod = init_module<float>(c, MemoryConfig{}, 2, 5);
    Checkpoint ck;
    save_model(ck, model);
    save_gates(ck, gates);
    save_module(ck, mod, c);
    ck.meta()["note"] = "round trip";
    ck.save(dir / "all.json");
    auto back = Checkpoint::load(dir / "all.json");
    CHECK(hash_model(load_model(back)) == hash_model(model));
    CHECK(hash_gates(load_gates(back)) == hash_gates(gates));
    CHECK(hash_module(load_module(back, 2, c)) == hash_module(mod));
    CHECK(back.meta().at("note") == "round trip");
    CHECK(back.contains("gates/1/down/log_alpha"));
    CHECK_FALSE(back.names_with_prefix("mem/2/kv/").empty());
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("missing checkpoint entry is reported") {
    Checkpoint ck;
    CHECK_THROWS_AS(ck.get("nope"), Error);
    CHECK_THROWS_AS(Checkpoint::load("/nonexistent/koff.json"), Error);
  }

  TEST_CASE("config parsing, overrides and unused keys") {
    auto c = Config::parse("# comment\nsteps = 12\nlr_gate=0.5\nsweep_targets = 0.1, 0.2\nflag = true\n");
    CHECK(c.get_int("steps", 0) == 12);
    CHECK(c.get_double("lr_gate", 0) == 0.5);
    CHECK(c.get_doubles("sweep_targets", {}) == std::vector<double>{0.1, 0.2});
    CHECK(c.get_bool("flag", false));
    CHECK(c.get_int("absent", 7) == 7);
    c.apply_override("steps=3");
    CHECK(c.get_int("steps", 0) == 3);
    CHECK_NOTHROW(c.require_all_used());
    c.set("typo_key", "1");
    CHECK(c.unused_keys() == std::vector<std::string>{"typo_key"});
    CHECK_THROWS_AS(c.require_all_used(), ConfigError);
    CHECK_THROWS_AS(Config::parse("no equals sign here"), ConfigError);
    CHECK_THROWS_AS(Config::parse("steps = twelve").get_int("steps", 0), ConfigError);
    CHECK_THROWS_AS(c.apply_override("novalue"), ConfigError);
  }

  TEST_CASE("hashes are stable and sensitive") {
    const std::string a = "abc";
    CHECK(fnv1a(a.data(), a.size()) == 0xe71fa2190541574bULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
    auto t = Tensor<float>::from({2}, {1, 2});
    auto u = Tensor<float>::from({2}, {1, 2.0000002f});
    CHECK(hash_tensor(t) != hash_tensor(u));
  }
}
