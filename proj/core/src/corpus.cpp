#include "koff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <unordered_set>

#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"

namespace koff {

namespace {

// Uniform [0,1) keyed by (seed, a, b, c).
double keyed_unit(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t h = Rng::mix(seed ^ Rng::mix(a * 0x9E3779B97F4A7C15ULL + Rng::mix(b * 0xC2B2AE3D27D4EB4FULL + c)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

int keyed_index(uint64_t seed, uint64_t a, uint64_t b, uint64_t c, int n) {
  return std::min(n - 1, static_cast<int>(keyed_unit(seed, a, b, c) * n));
}

// Tags separating the keyed draws.
constexpr uint64_t kTagCandidate = 1, kTagLogit = 2, kTagContext = 3, kTagPick = 4;

void add_group(std::vector<int32_t>& next, std::vector<double>& prob, const std::vector<int32_t>& cand,
               const std::vector<double>& logits, double mass, double temperature) {
  if (mass <= 0 || cand.empty()) return;
  double mx = *std::max_element(logits.begin(), logits.end()) / temperature;
  std::vector<double> w(cand.size());
  double z = 0;
  for (size_t i = 0; i < cand.size(); ++i) z += (w[i] = std::exp(logits[i] / temperature - mx));
  for (size_t i = 0; i < cand.size(); ++i) {
    auto it = std::find(next.begin(), next.end(), cand[i]);
    double p = mass * w[i] / z;
    if (it == next.end()) {
      next.push_back(cand[i]);
      prob.push_back(p);
    } else {
      prob[it - next.begin()] += p;
    }
  }
}

}  // namespace

double CorpusConfig::resolved_exclusive_mix() const {
  if (exclusive_mix >= 0) return exclusive_mix;
  return style == CorpusStyle::kLanguage ? 0.8 : 0.45;
}

int CorpusConfig::exclusive_per_domain() const { return (vocab_size - shared_vocab) / std::max(1, n_domains); }

void CorpusConfig::validate() const {
  if (n_domains < 1) throw ConfigError("corpus needs at least one domain");
  if (shared_vocab < 2 || shared_vocab > vocab_size) throw ConfigError("shared_vocab must lie in [2, vocab_size]");
  if (resolved_exclusive_mix() > 0 && exclusive_per_domain() < 1)
    throw ConfigError("no room for exclusive vocabularies: vocab_size too small for shared_vocab and n_domains");
  if (tokens_per_domain <= 0) throw ConfigError("tokens_per_domain must be > 0 (empty corpus)");
  if (doc_len < 3) throw ConfigError("doc_len must be >= 3");
  if (successors < 1) throw ConfigError("successors must be >= 1");
  if (!(temperature > 0 && retention_temperature > 0)) throw ConfigError("temperatures must be > 0");
}

CorpusConfig CorpusConfig::from_config(const Config& c) {
  CorpusConfig k;
  k.vocab_size = static_cast<int>(c.get_int("vocab_size", k.vocab_size));
  k.n_domains = static_cast<int>(c.get_int("n_domains", k.n_domains));
  k.shared_vocab = static_cast<int>(c.get_int("shared_vocab", k.shared_vocab));
  auto style = c.get_string("corpus_style", "topic");
  if (style == "topic") k.style = CorpusStyle::kTopic;
  else if (style == "language") k.style = CorpusStyle::kLanguage;
  else throw ConfigError("corpus_style must be topic or language, got '" + style + "'");
  k.exclusive_mix = c.get_double("exclusive_mix", k.exclusive_mix);
  k.successors = static_cast<int>(c.get_int("successors", k.successors));
  k.order2_strength = c.get_double("order2_strength", k.order2_strength);
  k.temperature = c.get_double("corpus_temperature", k.temperature);
  k.retention_temperature = c.get_double("retention_temperature", k.retention_temperature);
  k.tokens_per_domain = static_cast<int>(c.get_int("tokens_per_domain", k.tokens_per_domain));
  k.retention_tokens = static_cast<int>(c.get_int("retention_tokens", k.retention_tokens));
  k.doc_len = static_cast<int>(c.get_int("doc_len", k.doc_len));
  k.seed = static_cast<uint64_t>(c.get_int("corpus_seed", static_cast<long long>(k.seed)));
  k.validate();
  return k;
}

void DomainSpec::validate(int vocab_size) const {
  if (shared_begin < 0 || shared_end <= shared_begin || shared_end > vocab_size)
    throw ConfigError("domain " + std::to_string(domain) + " has an invalid shared-core range");
  if (excl_end < excl_begin || excl_begin < 0 || excl_end > vocab_size)
    throw ConfigError("domain " + std::to_string(domain) + " has an invalid exclusive range");
  if (excl_end > excl_begin && excl_begin < shared_end && shared_begin < excl_end)
    throw ConfigError("domain " + std::to_string(domain) + " exclusive range overlaps the shared core");
  if (exclusive_mix > 0 && excl_end == excl_begin && exclusive_pick > 0)
    throw ConfigError("domain " + std::to_string(domain) + " mixes exclusive tokens but has none");
}

TransitionRow DomainSpec::row(int prev2, int prev1) const {
  TransitionRow r;
  const int n_core = shared_end - shared_begin;
  const int n_excl = excl_end - excl_begin;
  std::vector<int32_t> cand(static_cast<size_t>(successors));
  std::vector<double> logits(static_cast<size_t>(successors));

  for (int i = 0; i < successors; ++i) {
    cand[i] = shared_begin + keyed_index(shared_seed, kTagCandidate, prev1, i, n_core);
    logits[i] = 3.0 * keyed_unit(shared_seed, kTagLogit, prev1, i) +
                order2_strength * (2.0 * keyed_unit(shared_seed, kTagContext, prev2, i) - 1.0);
  }
  add_group(r.next, r.prob, cand, logits, 1.0 - exclusive_mix, temperature);

  if (exclusive_mix > 0) {
    for (int i = 0; i < successors; ++i) {
      bool exclusive = n_excl > 0 && keyed_unit(seed, kTagPick, prev1, i) < exclusive_pick;
      cand[i] = exclusive ? excl_begin + keyed_index(seed, kTagCandidate, prev1, i, n_excl)
                          : shared_begin + keyed_index(seed, kTagCandidate, prev1, i, n_core);
      logits[i] = 3.0 * keyed_unit(seed, kTagLogit, prev1, i) +
                  order2_strength * (2.0 * keyed_unit(seed, kTagContext, prev2, i) - 1.0);
    }
    add_group(r.next, r.prob, cand, logits, exclusive_mix, temperature);
  }
  return r;
}

std::vector<DomainSpec> make_domain_specs(const CorpusConfig& cfg) {
  cfg.validate();
  std::vector<DomainSpec> specs;
  const int per = cfg.exclusive_per_domain();
  const uint64_t shared_seed = Rng::mix(cfg.seed * 0x2545F4914F6CDD1DULL + 17);
  for (int d = 0; d < cfg.n_domains; ++d) {
    DomainSpec s;
    s.domain = d;
    s.shared_begin = 0;
    s.shared_end = cfg.shared_vocab;
    s.excl_begin = cfg.shared_vocab + d * per;
    s.excl_end = s.excl_begin + per;
    s.exclusive_mix = cfg.resolved_exclusive_mix();
    s.exclusive_pick = cfg.style == CorpusStyle::kLanguage ? 1.0 : 0.7;
    s.successors = cfg.successors;
    s.order2_strength = cfg.order2_strength;
    s.temperature = cfg.temperature;
    s.seed = Rng::mix(cfg.seed * 0x9E3779B97F4A7C15ULL + 1000 + d);
    s.shared_seed = shared_seed;
    specs.push_back(s);
  }
  return specs;
}

DomainSpec make_retention_spec(const CorpusConfig& cfg) {
  auto specs = make_domain_specs(cfg);
  DomainSpec s = specs.front();
  s.domain = -1;
  s.excl_begin = s.excl_end = 0;
  s.exclusive_mix = 0.0;
  s.exclusive_pick = 0.0;
  s.temperature = cfg.retention_temperature;
  s.seed = Rng::mix(cfg.seed * 0x9E3779B97F4A7C15ULL + 999);
  return s;
}

std::vector<int32_t> generate_stream(const DomainSpec& spec, int n_docs, int doc_len, Rng& rng) {
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(n_docs) * doc_len);
  const int n_core = spec.shared_end - spec.shared_begin;
  for (int d = 0; d < n_docs; ++d) {
    int a = spec.shared_begin + static_cast<int>(rng.below(n_core));
    int b = spec.shared_begin + static_cast<int>(rng.below(n_core));
    out.push_back(a);
    out.push_back(b);
    for (int t = 2; t < doc_len; ++t) {
      auto row = spec.row(a, b);
      double u = rng.uniform();
      double acc = 0;
      int next = row.next.back();
      for (size_t i = 0; i < row.next.size(); ++i) {
        acc += row.prob[i];
        if (u < acc) {
          next = row.next[i];
          break;
        }
      }
      out.push_back(next);
      a = b;
      b = next;
    }
  }
  return out;
}

uint64_t hash_doc(std::span<const int32_t> doc) { return fnv1a(doc.data(), doc.size() * sizeof(int32_t)); }

namespace {

// 95/5 split by document; drops eval documents that duplicate a train one.
void split_stream(const std::vector<int32_t>& all, int doc_len, int domain, TokenStream& train, TokenStream& eval) {
  const int n_docs = static_cast<int>(all.size() / doc_len);
  int n_eval = static_cast<int>(std::lround(0.05 * n_docs));
  if (n_docs >= 2) n_eval = std::max(1, n_eval);
  const int n_train = n_docs - n_eval;
  train = {domain, doc_len, {all.begin(), all.begin() + static_cast<ptrdiff_t>(n_train) * doc_len}};
  eval = {domain, doc_len, {}};
  std::unordered_set<uint64_t> seen;
  for (int i = 0; i < n_train; ++i) seen.insert(hash_doc(train.doc(i)));
  for (int i = n_train; i < n_docs; ++i) {
    std::span<const int32_t> doc(all.data() + static_cast<size_t>(i) * doc_len, static_cast<size_t>(doc_len));
    if (seen.count(hash_doc(doc))) continue;
    eval.tokens.insert(eval.tokens.end(), doc.begin(), doc.end());
  }
}

}  // namespace

CorpusSet generate_corpora(const std::vector<DomainSpec>& specs, const DomainSpec& retention,
                           const CorpusConfig& cfg) {
  cfg.validate();
  if (specs.empty()) throw ConfigError("corpus needs at least one domain");
  for (const auto& s : specs) s.validate(cfg.vocab_size);
  for (size_t i = 0; i < specs.size(); ++i)
    for (size_t j = i + 1; j < specs.size(); ++j) {
      const auto &a = specs[i], &b = specs[j];
      if (a.excl_end > a.excl_begin && b.excl_end > b.excl_begin && a.excl_begin < b.excl_end &&
          b.excl_begin < a.excl_end)
        throw ConfigError("exclusive vocabularies of domains " + std::to_string(a.domain) + " and " +
                          std::to_string(b.domain) + " overlap");
    }
  CorpusSet set;
  set.vocab_size = cfg.vocab_size;
  set.doc_len = cfg.doc_len;
  const int n_docs = std::max(1, (cfg.tokens_per_domain + cfg.doc_len - 1) / cfg.doc_len);
  Rng base(cfg.seed, Stream::kCorpus);
  for (const auto& s : specs) {
    Rng rng = base.fork(static_cast<uint64_t>(s.domain) + 1);
    auto all = generate_stream(s, n_docs, cfg.doc_len, rng);
    DomainCorpus dc;
    dc.domain = s.domain;
    split_stream(all, cfg.doc_len, s.domain, dc.train, dc.eval);
    set.domains.push_back(std::move(dc));
  }
  if (cfg.retention_tokens > 0) {
    Rng rng = base.fork(0xFFFF);
    const int r_docs = std::max(1, (cfg.retention_tokens + cfg.doc_len - 1) / cfg.doc_len);
    auto all = generate_stream(retention, r_docs, cfg.doc_len, rng);
    split_stream(all, cfg.doc_len, -1, set.retention_train, set.retention_eval);
  }
  return set;
}

CorpusSet generate_corpora(const CorpusConfig& cfg) {
  return generate_corpora(make_domain_specs(cfg), make_retention_spec(cfg), cfg);
}

std::vector<double> unigram(std::span<const int32_t> tokens, int vocab_size) {
  std::vector<double> p(static_cast<size_t>(vocab_size), 0.0);
  for (auto t : tokens) p.at(static_cast<size_t>(t)) += 1.0;
  if (!tokens.empty())
    for (auto& x : p) x /= static_cast<double>(tokens.size());
  return p;
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw DimensionError("js_divergence over distributions of different size");
  double js = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  return js;
}

TrainBatch sample_batch(const TokenStream& stream, int batch, int seq, Rng& rng) {
  if (stream.empty()) throw ConfigError("cannot sample from an empty corpus");
  if (seq + 1 > stream.doc_len)
    throw ConfigError("seq_len " + std::to_string(seq) + " needs documents of at least " + std::to_string(seq + 1) +
                      " tokens");
  TrainBatch out;
  out.domain = stream.domain;
  out.input.batch = batch;
  out.input.seq = seq;
  out.input.ids.reserve(static_cast<size_t>(batch) * seq);
  out.targets.reserve(static_cast<size_t>(batch) * seq);
  for (int b = 0; b < batch; ++b) {
    auto doc = stream.doc(static_cast<int>(rng.below(static_cast<uint64_t>(stream.n_docs()))));
    int off = static_cast<int>(rng.below(static_cast<uint64_t>(stream.doc_len - seq)));
    out.input.ids.insert(out.input.ids.end(), doc.begin() + off, doc.begin() + off + seq);
    out.targets.insert(out.targets.end(), doc.begin() + off + 1, doc.begin() + off + seq + 1);
  }
  return out;
}

void write_corpus_file(const std::filesystem::path& path, const CorpusFileHeader& header,
                       std::span<const int32_t> tokens) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::ordered_json j;
  j["vocab_size"] = header.vocab_size;
  j["domain"] = header.domain;
  j["token_count"] = tokens.size();
  j["doc_len"] = header.doc_len;
  j["split"] = header.split;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write corpus file " + path.string());
  out << j.dump() << '\n';
  out.write(reinterpret_cast<const char*>(tokens.data()), static_cast<std::streamsize>(tokens.size_bytes()));
}

TokenStream read_corpus_file(const std::filesystem::path& path, CorpusFileHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus file " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed corpus header in " + path.string());
  }
  CorpusFileHeader h;
  h.vocab_size = j.at("vocab_size").get<int>();
  h.domain = j.at("domain").get<int>();
  h.token_count = j.at("token_count").get<int64_t>();
  h.doc_len = j.at("doc_len").get<int>();
  h.split = j.value("split", "");
  TokenStream s;
  s.domain = h.domain;
  s.doc_len = h.doc_len;
  s.tokens.resize(static_cast<size_t>(h.token_count));
  in.read(reinterpret_cast<char*>(s.tokens.data()), static_cast<std::streamsize>(s.tokens.size() * sizeof(int32_t)));
  if (in.gcount() != static_cast<std::streamsize>(s.tokens.size() * sizeof(int32_t)))
    throw InputError("corpus file " + path.string() + " is truncated");
  for (auto t : s.tokens)
    if (t < 0 || t >= h.vocab_size) throw InputError("corpus file " + path.string() + " has out-of-range token ids");
  if (header) *header = h;
  return s;
}

std::vector<std::filesystem::path> save_corpus_set(const std::filesystem::path& dir, const CorpusSet& set) {
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const TokenStream& s, const std::string& split) {
    auto p = dir / name;
    write_corpus_file(p, {set.vocab_size, s.domain, static_cast<int64_t>(s.tokens.size()), set.doc_len, split},
                      s.tokens);
    written.push_back(p);
  };
  for (const auto& d : set.domains) {
    put("domain" + std::to_string(d.domain) + ".train.tok", d.train, "train");
    put("domain" + std::to_string(d.domain) + ".eval.tok", d.eval, "eval");
  }
  if (!set.retention_train.empty()) {
    put("retention.train.tok", set.retention_train, "train");
    put("retention.eval.tok", set.retention_eval, "eval");
  }
  return written;
}

CorpusSet load_corpus_set(const std::filesystem::path& dir) {
  CorpusSet set;
  for (int d = 0;; ++d) {
    auto train = dir / ("domain" + std::to_string(d) + ".train.tok");
    if (!std::filesystem::exists(train)) break;
    CorpusFileHeader h;
    DomainCorpus dc;
    dc.domain = d;
    dc.train = read_corpus_file(train, &h);
    dc.eval = read_corpus_file(dir / ("domain" + std::to_string(d) + ".eval.tok"));
    set.vocab_size = h.vocab_size;
    set.doc_len = h.doc_len;
    set.domains.push_back(std::move(dc));
  }
  if (set.domains.empty()) throw MissingDependency("corpus in " + dir.string(), "gen-data");
  if (std::filesystem::exists(dir / "retention.train.tok")) {
    set.retention_train = read_corpus_file(dir / "retention.train.tok");
    set.retention_eval = read_corpus_file(dir / "retention.eval.tok");
  }
  return set;
}

}  // namespace koff
